#include "tp2m/verification.hpp"

#include <chrono>
#include <random>

#include "tp2m/error.hpp"
#include "tp2m/perception.hpp"
#include "tp2m/pipeline.hpp"

namespace tp2m {

namespace {

using ad::Tape;
using ad::Tensor;
using ad::Var;

Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// Contracts an output with fixed random weights so every entry matters.
Var probe(Tape& tape, Var out, const Tensor& weights) {
  return ad::sum(ad::mul(out, tape.constant(weights)));
}

TriMesh jittered(const TriMesh& mesh, Rng& rng, double amount) {
  std::uniform_real_distribution<double> dist(-amount, amount);
  std::vector<Vec3> verts = mesh.vertices();
  for (Vec3& v : verts) {
    for (double& c : v) c += dist(rng);
  }
  return mesh.with_vertices(verts);
}

std::vector<Vec3> to_points(const Tensor& t) {
  std::vector<Vec3> out(t.rows());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
  return out;
}

class Suite {
 public:
  Suite(std::size_t width, std::uint64_t seed) : width_(width), rng_(seed) {}

  void run(const std::string& name, ad::ParameterSet& params, const ad::ScalarFunction& f) {
    const auto start = std::chrono::steady_clock::now();
    GradcheckEntry entry;
    entry.block = name;
    entry.result = ad::gradcheck(f, params, {1e-6, 0, rng_()});
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    entries_.push_back(entry);
  }

  std::size_t width_;
  Rng rng_;
  std::vector<GradcheckEntry> entries_;
};

}  // namespace

TriMesh make_octahedron(double radius) {
  const double r = radius;
  std::vector<Vec3> v{{r, 0, 0}, {-r, 0, 0}, {0, r, 0}, {0, -r, 0}, {0, 0, r}, {0, 0, -r}};
  std::vector<Face> f{{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4},
                      {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}};
  return TriMesh(std::move(v), std::move(f));
}

void perturb_parameters(ad::ParameterSet& params, Rng& rng, double amplitude) {
  std::uniform_real_distribution<double> dist(-amplitude, amplitude);
  for (auto& p : params) {
    for (double& v : p.value.values()) v += dist(rng);
  }
}

std::vector<GradcheckEntry> run_gradient_suite(std::size_t width, std::uint64_t seed) {
  if (width == 0 || width % 4 != 0 || width > 32) {
    throw ConfigError("gradient suite width must be a multiple of 4 in [4, 32]");
  }
  const std::size_t d = width;
  Suite suite(d, seed);
  Rng& rng = suite.rng_;
  const TriMesh small = jittered(unpool(make_octahedron()), rng, 0.05);  // 18 vertices
  const TriMesh tiny = jittered(make_octahedron(), rng, 0.05);           // 6 vertices

  {
    ad::ParameterSet params;
    MultiHeadSelfAttention block("mhsa", d, 4);
    block.init(params, rng);
    perturb_parameters(params, rng);
    params.add("input", random_matrix(8, d, rng));
    const Tensor w = random_matrix(8, d, rng);
    suite.run("mhsa", params, [&](Tape& tape) {
      return probe(tape, block.forward(tape, params, tape.parameter(params.at("input"))), w);
    });
  }
  {
    ad::ParameterSet params;
    GraphConv conv("conv", d, d);
    conv.init(params, rng);
    params.add("input", random_matrix(small.vertex_count(), d, rng));
    const Tensor w = random_matrix(small.vertex_count(), d, rng);
    suite.run("graph_conv", params, [&](Tape& tape) {
      return probe(tape, conv.forward(tape, params, tape.parameter(params.at("input")), small.topology()), w);
    });
  }
  {
    ad::ParameterSet params;
    GraphResidualBlock grb("grb", d);
    grb.init(params, rng);
    perturb_parameters(params, rng);
    params.add("input", random_matrix(small.vertex_count(), d, rng));
    const Tensor w = random_matrix(small.vertex_count(), d, rng);
    suite.run("graph_residual_block", params, [&](Tape& tape) {
      return probe(tape, grb.forward(tape, params, tape.parameter(params.at("input")), small.topology()), w);
    });
  }
  {
    // 6 vertex tokens + 2 global tokens.
    ad::ParameterSet params;
    GlobalTransformerBlock block("global", d, 4, 2);
    block.init(params, rng);
    perturb_parameters(params, rng);
    params.add("input", random_matrix(8, d, rng));
    const Tensor w = random_matrix(8, d, rng);
    suite.run("global_block", params, [&](Tape& tape) {
      return probe(tape, block.forward(tape, params, tape.parameter(params.at("input")), tiny.topology()), w);
    });
  }

  const std::size_t n = 32, k = 4;
  const Tensor coords = random_matrix(n, 3, rng, -0.5, 0.5);
  const NeighborLists neighbors = knn_indices(to_points(coords), k);
  {
    ad::ParameterSet params;
    VectorAttention block("va", d);
    block.init(params, rng);
    perturb_parameters(params, rng);
    params.add("input", random_matrix(n, d, rng));
    params.add("coords", coords);
    const Tensor w = random_matrix(n, d, rng);
    suite.run("vector_attention", params, [&](Tape& tape) {
      return probe(tape,
                   block.forward(tape, params, tape.parameter(params.at("input")),
                                 tape.parameter(params.at("coords")), neighbors),
                   w);
    });
  }
  {
    ad::ParameterSet params;
    LocalTransformerBlock block("local", d);
    block.init(params, rng);
    perturb_parameters(params, rng);
    params.add("input", random_matrix(n, d, rng));
    params.add("coords", coords);
    const Tensor w = random_matrix(n, d, rng);
    suite.run("local_block", params, [&](Tape& tape) {
      return probe(tape,
                   block.forward(tape, params, tape.parameter(params.at("input")),
                                 tape.parameter(params.at("coords")), neighbors),
                   w);
    });
  }
  {
    ad::ParameterSet params;
    CoordinateHead head("head", d, d);
    head.init(params, rng);
    perturb_parameters(params, rng);
    params.add("input", random_matrix(n, d, rng));
    params.add("base", coords);
    const Tensor w = random_matrix(n, 3, rng);
    suite.run("coordinate_head", params, [&](Tape& tape) {
      return probe(tape,
                   head.forward(tape, params, tape.parameter(params.at("input")),
                                tape.parameter(params.at("base"))),
                   w);
    });
  }
  {
    // Projection -> bilinear sampling of a projected feature grid, w.r.t.
    // vertex positions, grid values and the projection weights.
    constexpr std::size_t resolution = 7, channels = 8;
    ad::ParameterSet params;
    params.add("grid", random_matrix(resolution * resolution, channels, rng));
    params.add("projection", random_matrix(channels, d, rng));
    params.add("positions", random_matrix(n, 3, rng, -0.4, 0.4));
    const Camera camera;
    const Tensor w = random_matrix(n, d, rng);
    suite.run("bilinear_pooling", params, [&](Tape& tape) {
      const Var grid = ad::matmul(tape.parameter(params.at("grid")), tape.parameter(params.at("projection")));
      const Var uvz = project_points(tape.parameter(params.at("positions")), camera);
      return probe(tape, bilinear_sample(grid, uvz, resolution), w);
    });
  }

  // Losses on the 18-vertex mesh against a 64-point target.
  PointCloud cloud;
  {
    const Tensor pts = random_matrix(64, 3, rng, -0.6, 0.6);
    const Tensor nrm = random_matrix(64, 3, rng);
    for (std::size_t i = 0; i < 64; ++i) {
      cloud.points.push_back({pts.at(i, 0), pts.at(i, 1), pts.at(i, 2)});
      Vec3 v{nrm.at(i, 0), nrm.at(i, 1), nrm.at(i, 2)};
      const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      cloud.normals.push_back({v[0] / len, v[1] / len, v[2] / len});
    }
  }
  const TargetIndex target(cloud);
  const TriMesh moved = jittered(small, rng, 0.1);
  auto loss_params = [&] {
    ad::ParameterSet params;
    params.add("before", small.positions());
    params.add("after", moved.positions());
    return params;
  };
  {
    ad::ParameterSet params;
    params.add("pred", random_matrix(64, 3, rng, -0.6, 0.6));
    suite.run("chamfer_l1", params,
              [&](Tape& tape) { return chamfer_l1(tape.parameter(params.at("pred")), target); });
  }
  {
    auto params = loss_params();
    suite.run("smooth_loss", params, [&](Tape& tape) {
      return smooth_loss(tape.parameter(params.at("after")), small.topology(), target);
    });
  }
  {
    auto params = loss_params();
    suite.run("laplacian_loss", params, [&](Tape& tape) {
      return laplacian_loss(tape.parameter(params.at("before")), tape.parameter(params.at("after")),
                            small.topology());
    });
  }
  {
    auto params = loss_params();
    suite.run("point_move_loss", params, [&](Tape& tape) {
      return point_move_loss(tape.parameter(params.at("before")), tape.parameter(params.at("after")));
    });
  }
  {
    auto params = loss_params();
    suite.run("edge_loss", params, [&](Tape& tape) {
      return edge_loss(tape.parameter(params.at("after")), small.topology());
    });
  }
  return suite.entries_;
}

}  // namespace tp2m
