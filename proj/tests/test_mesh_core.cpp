#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "tp2m/error.hpp"
#include "tp2m/fixtures.hpp"
#include "tp2m/mesh.hpp"
#include "tp2m/verification.hpp"

using namespace tp2m;

namespace {

std::vector<Vec3> random_points(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {d(rng), d(rng), d(rng)};
  return pts;
}

// Edge -> number of faces using it, counted straight from the face list.
std::map<Edge, int> edge_face_counts(const std::vector<Face>& faces) {
  std::map<Edge, int> counts;
  for (const Face& f : faces) {
    for (int i = 0; i < 3; ++i) {
      const auto a = f[i], b = f[(i + 1) % 3];
      ++counts[{std::min(a, b), std::max(a, b)}];
    }
  }
  return counts;
}

}  // namespace

TEST_CASE("default template: 156 vertices, 308 faces, 462 edges, closed genus 0") {
  const TriMesh t = make_ellipsoid_template();
  CHECK(t.vertex_count() == 156);
  CHECK(t.face_count() == 308);
  CHECK(t.edge_count() == 462);
  CHECK(t.euler_characteristic() == 2);
  CHECK(t.is_closed_manifold());
  const auto counts = edge_face_counts(t.faces());
  CHECK(counts.size() == 462);
  for (const auto& [edge, n] : counts) CHECK(n == 2);
  // Radii (0.5, 0.5, 0.25): every vertex lies on the ellipsoid surface.
  for (const Vec3& p : t.vertices()) {
    const double q = p[0] * p[0] / 0.25 + p[1] * p[1] / 0.25 + p[2] * p[2] / 0.0625;
    CHECK(q == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("template configs that miss 156 vertices are rejected") {
  EllipsoidConfig cfg;
  cfg.rings = 10;
  CHECK_THROWS_AS(make_ellipsoid_template(cfg), ConfigError);
}

TEST_CASE("bundled template matches the generator") {
  const TriMesh bundled = load_template();
  const TriMesh generated = make_ellipsoid_template();
  REQUIRE(bundled.vertex_count() == 156);
  CHECK(bundled.faces() == generated.faces());
  for (std::size_t i = 0; i < 156; ++i) {
    for (int c = 0; c < 3; ++c) CHECK(bundled.vertices()[i][c] == doctest::Approx(generated.vertices()[i][c]).epsilon(1e-6));
  }
}

TEST_CASE("topology validation") {
  CHECK_THROWS_AS(TriMesh({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {{0, 1, 3}}), ContractViolation);
  CHECK_THROWS_AS(TriMesh({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {{0, 1, 1}}), ContractViolation);
  const TriMesh t = make_ellipsoid_template();
  std::set<Edge> seen(t.edges().begin(), t.edges().end());
  CHECK(seen.size() == t.edges().size());
  CHECK(std::is_sorted(t.edges().begin(), t.edges().end()));
  for (const Edge& e : t.edges()) CHECK(e.first < e.second);
}

TEST_CASE("unpool counts across the three stages") {
  TriMesh m = make_ellipsoid_template();
  const std::size_t expect_v[] = {618, 2466, 9858};
  const std::size_t expect_f[] = {1232, 4928, 19712};
  const std::size_t expect_e[] = {1848, 7392, 29568};
  for (int s = 0; s < 3; ++s) {
    const std::size_t v = m.vertex_count(), e = m.edge_count(), f = m.face_count();
    m = unpool(m);
    CHECK(m.vertex_count() == expect_v[s]);
    CHECK(m.face_count() == expect_f[s]);
    CHECK(m.edge_count() == expect_e[s]);
    CHECK(m.vertex_count() == v + e);
    CHECK(m.face_count() == 4 * f);
    CHECK(m.euler_characteristic() == 2);
    CHECK(m.is_closed_manifold());
  }
}

TEST_CASE("unpool positions, features, ordering and determinism") {
  const TriMesh t = make_ellipsoid_template();
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  ad::Tensor feat = ad::Tensor::matrix(t.vertex_count(), 5);
  for (double& v : feat.values()) v = d(rng);
  const UnpoolResult r = unpool(t, feat);
  const UnpoolResult again = unpool(t, feat);
  CHECK(r.mesh.vertices() == again.mesh.vertices());
  CHECK(r.mesh.faces() == again.mesh.faces());
  CHECK(r.features == again.features);
  REQUIRE(r.midpoint_edges == t.edges());
  for (std::size_t i = 0; i < t.vertex_count(); ++i) {
    CHECK(r.mesh.vertices()[i] == t.vertices()[i]);
    for (std::size_t c = 0; c < 5; ++c) CHECK(r.features.at(i, c) == feat.at(i, c));
  }
  for (std::size_t e = 0; e < t.edge_count(); ++e) {
    const auto [a, b] = t.edges()[e];
    const std::size_t m = t.vertex_count() + e;
    for (int c = 0; c < 3; ++c) {
      CHECK(r.mesh.vertices()[m][c] == doctest::Approx(0.5 * (t.vertices()[a][c] + t.vertices()[b][c])).epsilon(1e-15));
    }
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(r.features.at(m, c) == doctest::Approx(0.5 * (feat.at(a, c) + feat.at(b, c))).epsilon(1e-15));
    }
  }
  CHECK_THROWS_AS(unpool(t, ad::Tensor::matrix(t.vertex_count() - 1, 5)), ContractViolation);
}

TEST_CASE("unpool preserves Euler characteristic on other closed meshes") {
  TriMesh m = make_octahedron();
  for (int s = 0; s < 3; ++s) {
    const long chi = m.euler_characteristic();
    m = unpool(m);
    CHECK(m.euler_characteristic() == chi);
  }
}

TEST_CASE("knn on unit square corners picks the adjacent corners") {
  const std::vector<Vec3> sq{{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
  const auto nn = knn_indices(sq, 2);
  CHECK(nn[0] == std::vector<std::uint32_t>{1, 3});
  CHECK(nn[1] == std::vector<std::uint32_t>{0, 2});
  CHECK(nn[2] == std::vector<std::uint32_t>{1, 3});
  CHECK(nn[3] == std::vector<std::uint32_t>{0, 2});
}

TEST_CASE("knn k=1 on two points, and k >= n rejected") {
  const std::vector<Vec3> two{{0, 0, 0}, {3, 4, 0}};
  const auto nn = knn_indices(two, 1);
  CHECK(nn[0] == std::vector<std::uint32_t>{1});
  CHECK(nn[1] == std::vector<std::uint32_t>{0});
  CHECK_THROWS_AS(knn_indices(two, 2), ContractViolation);
}

TEST_CASE("knn matches brute force, including ties and duplicates") {
  std::mt19937_64 rng(29);
  const auto pts = random_points(200, rng);
  CHECK(knn_indices(pts, 16) == knn_indices_brute_force(pts, 16));
  // Integer lattice: many equal distances exercise the index tie-break.
  std::vector<Vec3> lattice;
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 5; ++y)
      for (int z = 0; z < 4; ++z) lattice.push_back({double(x), double(y), double(z)});
  lattice.push_back({2, 2, 2});
  CHECK(knn_indices(lattice, 10) == knn_indices_brute_force(lattice, 10));
}

TEST_CASE("brute-force oracle: independent check of the ordering rule") {
  std::mt19937_64 rng(31);
  const auto pts = random_points(50, rng);
  const auto nn = knn_indices(pts, 5);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<std::pair<double, std::uint32_t>> all;
    for (std::uint32_t j = 0; j < pts.size(); ++j) {
      if (j != i) all.push_back({squared_distance(pts[i], pts[j]), j});
    }
    std::sort(all.begin(), all.end());
    for (std::size_t m = 0; m < 5; ++m) CHECK(nn[i][m] == all[m].second);
  }
}

TEST_CASE("laplacian coordinates of the octahedron") {
  const TriMesh oct = make_octahedron(1.0);
  const auto delta = laplacian_coords(oct);
  // Vertex 4 is (0, 0, 1) with the four equatorial vertices as neighbors.
  CHECK(delta[4][0] == 0.0);
  CHECK(delta[4][1] == 0.0);
  CHECK(delta[4][2] == 1.0);
  for (std::size_t i = 0; i < 6; ++i) {
    for (int c = 0; c < 3; ++c) CHECK(delta[i][c] == doctest::Approx(oct.vertices()[i][c]));
  }
}

TEST_CASE("laplacian coordinates: centroid vertex, translation, isolated vertex") {
  // Vertex 0 at the centroid of its ring.
  std::vector<Vec3> v{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {-1, 0, 0}, {0, -1, 0}};
  std::vector<Face> f{{0, 1, 2}, {0, 2, 3}, {0, 3, 4}, {0, 4, 1}};
  const TriMesh fan(v, f);
  const auto delta = laplacian_coords(fan);
  for (int c = 0; c < 3; ++c) CHECK(delta[0][c] == 0.0);

  std::mt19937_64 rng(37);
  const TriMesh t = make_ellipsoid_template();
  const auto base = laplacian_coords(t);
  std::vector<Vec3> moved = t.vertices();
  for (auto& p : moved) {
    p[0] += 0.75;
    p[1] -= 2.5;
    p[2] += 0.125;
  }
  const auto shifted = laplacian_coords(t.with_vertices(moved));
  for (std::size_t i = 0; i < base.size(); ++i) {
    for (int c = 0; c < 3; ++c) CHECK(std::fabs(shifted[i][c] - base[i][c]) <= 1e-12);
  }
  std::vector<Vec3> extra = v;
  extra.push_back({5, 5, 5});
  CHECK_THROWS_AS(laplacian_coords(TriMesh(extra, f)), ContractViolation);
}

TEST_CASE("OBJ round trip") {
  const TriMesh t = unpool(make_ellipsoid_template());
  const auto path = std::filesystem::temp_directory_path() / "tp2m_roundtrip.obj";
  write_obj(t, path);
  const TriMesh back = read_obj(path);
  CHECK(back.faces() == t.faces());
  REQUIRE(back.vertex_count() == t.vertex_count());
  for (std::size_t i = 0; i < t.vertex_count(); ++i) {
    for (int c = 0; c < 3; ++c) CHECK(std::fabs(back.vertices()[i][c] - t.vertices()[i][c]) <= 5e-7);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_obj("/nonexistent/mesh.obj"), IoError);
}
