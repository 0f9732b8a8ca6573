#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "tp2m/error.hpp"
#include "tp2m/fixtures.hpp"
#include "tp2m/pipeline.hpp"
#include "tp2m/verification.hpp"

using namespace tp2m;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

ModelConfig small_config(std::uint64_t seed = 0) {
  ModelConfig c;
  c.width = 16;
  c.init_seed = seed;
  return c;
}

std::vector<Vec3> random_points(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {d(rng), d(rng), d(rng)};
  return pts;
}

// Direct O(n^2) Chamfer-L1 with the same per-direction means.
double brute_chamfer(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
  auto one_way = [](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double total = 0.0;
    for (const Vec3& x : a) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < b.size(); ++j) {
        if (squared_distance(x, b[j]) < squared_distance(x, b[best])) best = j;
      }
      const double dx = x[0] - b[best][0], dy = x[1] - b[best][1], dz = x[2] - b[best][2];
      total += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    return total * (1.0 / static_cast<double>(a.size()));
  };
  return one_way(p, q) + one_way(q, p);
}

}  // namespace

TEST_CASE("forward trace: vertex and face counts, Euler characteristic") {
  TdmModel model(small_config(), make_ellipsoid_template());
  Rng rng(3);
  perturb_parameters(model.params(), rng, 0.02);
  const auto meshes = tdm_forward(synthetic_image(1), Camera{}, model, 1);
  REQUIRE(meshes.size() == 4);
  const std::size_t v[] = {156, 618, 2466, 9858};
  const std::size_t f[] = {308, 1232, 4928, 19712};
  for (int s = 0; s < 4; ++s) {
    CHECK(meshes[s].vertex_count() == v[s]);
    CHECK(meshes[s].face_count() == f[s]);
    CHECK(meshes[s].euler_characteristic() == 2);
  }
}

TEST_CASE("forward is deterministic") {
  TdmModel model(small_config(5), make_ellipsoid_template());
  Rng rng(5);
  perturb_parameters(model.params(), rng, 0.02);
  const auto a = tdm_forward(synthetic_image(2), Camera{}, model, 2);
  const auto b = tdm_forward(synthetic_image(2), Camera{}, model, 2);
  for (int s = 0; s < 4; ++s) CHECK(a[s].vertices() == b[s].vertices());
}

TEST_CASE("untrained model reproduces the template and its unpooled midpoints exactly") {
  const TriMesh tmpl = make_ellipsoid_template();
  TdmModel model(small_config(), tmpl);
  const FeaturePyramid pyramid = synth_backbone(synthetic_image(4), 4);
  Tape tape;
  const TdmTrace trace = model.forward(tape, pyramid, Camera{});
  for (std::size_t s = 0; s < kStageCount; ++s) CHECK(trace.outputs[s].value() == trace.inputs[s].value());
  TriMesh expect = tmpl;
  for (int i = 0; i < 3; ++i) expect = unpool(expect);
  CHECK(trace.output_meshes()[3].vertices() == expect.vertices());
}

TEST_CASE("a zero head without a base collapses to the origin and is caught") {
  Rng rng(7);
  ad::ParameterSet params;
  CoordinateHead head("h", 16, 16);
  head.init(params, rng);
  Tape tape;
  const Var out = head.forward(tape, params, tape.constant(Tensor::matrix(156, 16, 0.3)));
  CHECK(out.value().rows() == 156);
  CHECK(out.value().cols() == 3);
  CHECK_THROWS_AS(check_degenerate(out.value(), 1), NumericalError);
  CHECK_NOTHROW(check_degenerate(make_ellipsoid_template().positions(), 1));
}

TEST_CASE("coordinate head fits coordinates from frozen block tokens") {
  Rng rng(11);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  const std::size_t n = 32, width = 16;
  Tensor coords = Tensor::matrix(n, 3), x = Tensor::matrix(n, width);
  for (double& v : coords.values()) v = d(rng);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < width; ++c) x.at(i, c) = c < 3 ? coords.at(i, c) : d(rng);
  }
  std::vector<Vec3> pts(n);
  for (std::size_t i = 0; i < n; ++i) pts[i] = {coords.at(i, 0), coords.at(i, 1), coords.at(i, 2)};
  const auto nb = knn_indices(pts, 4);

  ad::ParameterSet frozen;
  LocalTransformerBlock block("block", width);
  block.init(frozen, rng);
  perturb_parameters(frozen, rng, 0.05);
  Tensor tokens;
  {
    Tape tape;
    tokens = block.forward(tape, frozen, tape.constant(x), tape.constant(coords), nb).value();
  }
  ad::ParameterSet params;
  CoordinateHead head("head", width, width);
  head.init(params, rng);
  // Start away from identity so the fit has work to do.
  perturb_parameters(params, rng, 0.1);
  auto max_error = [&] {
    Tape tape;
    const Tensor pred = head.forward(tape, params, tape.constant(tokens), tape.constant(coords)).value();
    double e = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) e = std::max(e, std::fabs(pred[i] - coords[i]));
    return e;
  };
  REQUIRE(max_error() > 0.05);
  Adam adam(1e-2);
  for (int step = 0; step < 500; ++step) {
    params.zero_grad();
    Tape tape;
    const Var pred = head.forward(tape, params, tape.constant(tokens), tape.constant(coords));
    const Var diff = ad::sub(pred, tape.constant(coords));
    tape.backward(ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(n)));
    adam.step(params);
  }
  const double err = max_error();
  CHECK(err < 1e-3);
}

TEST_CASE("chamfer examples and properties") {
  const std::vector<Vec3> p{{0, 0, 0}}, q{{1, 0, 0}};
  CHECK(chamfer_l1(p, q) == 2.0);
  std::mt19937_64 rng(13);
  const auto a = random_points(120, rng), b = random_points(90, rng);
  CHECK(chamfer_l1(a, a) == 0.0);
  CHECK(chamfer_l1(a, b) >= 0.0);
  CHECK(chamfer_l1(a, b) == doctest::Approx(chamfer_l1(b, a)).epsilon(1e-14));
  CHECK_THROWS_AS(chamfer_l1(std::vector<Vec3>{}, b), ContractViolation);
  const auto x = random_points(300, rng), y = random_points(300, rng);
  CHECK(chamfer_l1(x, y) == brute_chamfer(x, y));
}

TEST_CASE("smooth loss examples") {
  // Triangle in the x = 0 plane.
  const TriMesh tri({{0, 0, 0}, {0, 0, 1}, {0, 1, 0}}, {{0, 1, 2}});
  PointCloud flat{{{0, 0, 0}}, {{1, 0, 0}}};
  CHECK(smooth_loss(tri, flat) == 0.0);
  // Normal (0,0,1): edge 0->1 = (0,0,1) gives 1, edge 0->2 gives 0 and edge
  // 1->2 = (0,1,-1) gives |-1| = 1.
  PointCloud up{{{0, 0, 0}}, {{0, 0, 1}}};
  CHECK(smooth_loss(tri, up) == 2.0);
  PointCloud down{{{0, 0, 0}}, {{0, 0, -1}}};
  CHECK(smooth_loss(tri, down) == 2.0);

  std::mt19937_64 rng(17);
  const TriMesh t = make_ellipsoid_template();
  PointCloud cloud = sample_mesh_surface(t, 400, 3);
  const double base = smooth_loss(t.with_vertices(random_points(156, rng)), cloud);
  rng.seed(17);
  const auto verts = random_points(156, rng);
  for (std::size_t i = 0; i < cloud.normals.size(); i += 3) {
    for (double& c : cloud.normals[i]) c = -c;
  }
  CHECK(smooth_loss(t.with_vertices(verts), cloud) == base);
}

TEST_CASE("laplacian, point move and edge losses") {
  const TriMesh t = make_ellipsoid_template();
  CHECK(laplacian_loss(t, t) == 0.0);
  CHECK(point_move_loss(t, t) == 0.0);
  std::vector<Vec3> moved = t.vertices();
  const Vec3 shift{0.3, -0.4, 1.2};  // |shift| = 1.3
  for (auto& p : moved) {
    for (int c = 0; c < 3; ++c) p[c] += shift[c];
  }
  const TriMesh tm = t.with_vertices(moved);
  CHECK(laplacian_loss(t, tm) <= 1e-12);
  CHECK(point_move_loss(t, tm) == doctest::Approx(156 * 1.3).epsilon(1e-12));
  CHECK_THROWS_AS(point_move_loss(t, unpool(t)), ContractViolation);

  const double h = std::sqrt(3.0) / 2.0;
  const TriMesh tet({{0, 0, 0}, {1, 0, 0}, {0.5, h, 0}, {0.5, h / 3.0, std::sqrt(2.0 / 3.0)}},
                    {{0, 2, 1}, {0, 1, 3}, {1, 2, 3}, {2, 0, 3}});
  CHECK(edge_loss(tet) == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("loss report total recomputes bit-exactly") {
  TdmModel model(small_config(2), make_ellipsoid_template());
  Rng rng(2);
  perturb_parameters(model.params(), rng, 0.02);
  const FeaturePyramid pyramid = synth_backbone(synthetic_image(2), 2);
  const TargetIndex target(sample_cube_surface(500, 2));
  Tape tape;
  const TdmTrace trace = model.forward(tape, pyramid, Camera{});
  const LossWeights w;
  const LossReport r = tdm_losses(trace, target, w).report(w);
  CHECK(r.recompute_total() == r.total);
  CHECK(r.chamfer >= 0.0);
  CHECK(r.smooth >= 0.0);
  CHECK(r.laplacian >= 0.0);
  CHECK(r.point_move >= 0.0);
  CHECK(r.edge > 0.0);
}

TEST_CASE("full pipeline gradcheck on a parameter subsample") {
  TdmModel model(small_config(9), make_ellipsoid_template());
  Rng rng(9);
  perturb_parameters(model.params(), rng, 0.05);
  const FeaturePyramid pyramid = synth_backbone(synthetic_image(9), 9);
  const TargetIndex target(sample_cube_surface(300, 9));
  auto f = [&](Tape& tape) {
    const TdmTrace trace = model.forward(tape, pyramid, Camera{});
    return tdm_losses(trace, target, LossWeights{}).total;
  };
  // Bilinear pooling is piecewise linear, so some of the 9858 final-stage
  // vertices sit within a wider step of a grid line.
  const auto r = ad::gradcheck(f, model.params(), {1e-7, 2, 9});
  CAPTURE(r.worst_parameter);
  CHECK(r.coordinates >= 50);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("overfit: deterministic curves; identity target stays close") {
  const TriMesh tmpl = make_ellipsoid_template();
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.seed = 4;
  const PointCloud cube = sample_cube_surface(500, 4);
  const auto a = overfit_train(cube, cfg, tmpl), b = overfit_train(cube, cfg, tmpl);
  REQUIRE(a.curve.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.curve[i].total == b.curve[i].total);
  CHECK(a.final_meshes.back().vertices() == b.final_meshes.back().vertices());

  cfg.steps = 8;
  const auto self = overfit_train(sample_mesh_surface(tmpl, 2000, 4), cfg, tmpl);
  // The template already sits on its own surface: a small Chamfer term
  // from the start, well below the cube's.
  CHECK(self.curve.front().chamfer < 0.25);
  CHECK(self.curve.front().chamfer < 0.5 * a.curve.front().chamfer);
  CHECK(self.curve.back().total < self.curve.front().total);
}

TEST_CASE("point cloud IO") {
  const auto path = std::filesystem::temp_directory_path() / "tp2m_cloud.xyz";
  const PointCloud c = sample_cube_surface(50, 1);
  write_point_cloud(c, path);
  const PointCloud back = read_point_cloud(path);
  REQUIRE(back.points.size() == 50);
  for (std::size_t i = 0; i < 50; ++i) {
    for (int k = 0; k < 3; ++k) {
      CHECK(back.points[i][k] == doctest::Approx(c.points[i][k]).epsilon(1e-9));
      CHECK(back.normals[i][k] == c.normals[i][k]);
    }
  }
  {
    std::ofstream out(path);
    out << "0 0 0 0 0 2\n1 0 0 3 4 0\n";
  }
  const PointCloud fixed = read_point_cloud(path);
  CHECK(fixed.normals[0][2] == 1.0);
  CHECK(fixed.normals[1][0] == doctest::Approx(0.6));
  {
    std::ofstream out(path);
    out << "0 0 0 0 0\n";
  }
  CHECK_THROWS_AS(read_point_cloud(path), ConfigError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_point_cloud("/nonexistent/cloud.xyz"), IoError);
}
