#include "tp2m/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <random>

#include "tp2m/error.hpp"
#include "tp2m/lss.hpp"

namespace tp2m {

namespace {

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }

double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

double projected_extent(const TriMesh& mesh, const Camera& camera) {
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  for (const Vec3& p : mesh.vertices()) {
    const Projection q = project(p, camera);
    umin = std::min(umin, q.u);
    umax = std::max(umax, q.u);
    vmin = std::min(vmin, q.v);
    vmax = std::max(vmax, q.v);
  }
  return std::max(umax - umin, vmax - vmin);
}

}  // namespace

Image synthetic_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.01, 0.06), phase(0.0, 2.0 * std::numbers::pi);
  struct Wave {
    double fx, fy, ph;
  };
  std::array<std::array<Wave, 3>, 3> waves{};
  for (auto& channel : waves) {
    for (auto& w : channel) w = {freq(rng), freq(rng), phase(rng)};
  }
  Image img = Image::filled(kInputSize, kInputSize, 3, 0.0f);
  for (std::size_t y = 0; y < kInputSize; ++y) {
    for (std::size_t x = 0; x < kInputSize; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        double v = 0.0;
        for (const Wave& w : waves[c]) {
          v += std::sin(w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y) + w.ph);
        }
        img.at(x, y, c) = static_cast<float>(0.5 + v / 6.0);
      }
    }
  }
  return img;
}

PointCloud sample_cube_surface(std::size_t count, std::uint64_t seed, double side) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> face(0, 5);
  std::uniform_real_distribution<double> coord(-0.5 * side, 0.5 * side);
  PointCloud cloud;
  cloud.points.reserve(count);
  cloud.normals.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int f = face(rng);
    const int axis = f / 2;
    const double sign = f % 2 == 0 ? 1.0 : -1.0;
    Vec3 p{coord(rng), coord(rng), coord(rng)};
    p[static_cast<std::size_t>(axis)] = sign * 0.5 * side;
    Vec3 n{0.0, 0.0, 0.0};
    n[static_cast<std::size_t>(axis)] = sign;
    cloud.points.push_back(p);
    cloud.normals.push_back(n);
  }
  return cloud;
}

PointCloud sample_mesh_surface(const TriMesh& mesh, std::size_t count, std::uint64_t seed) {
  const auto& verts = mesh.vertices();
  std::vector<double> areas;
  std::vector<Vec3> normals;
  for (const Face& f : mesh.faces()) {
    const Vec3 n = cross(sub(verts[f[1]], verts[f[0]]), sub(verts[f[2]], verts[f[0]]));
    const double len = norm(n);
    areas.push_back(0.5 * len);
    normals.push_back(len > 0.0 ? Vec3{n[0] / len, n[1] / len, n[2] / len} : Vec3{0.0, 0.0, 1.0});
  }
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointCloud cloud;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t fi = pick(rng);
    const Face& f = mesh.faces()[fi];
    double a = unit(rng), b = unit(rng);
    if (a + b > 1.0) {
      a = 1.0 - a;
      b = 1.0 - b;
    }
    Vec3 p{};
    for (std::size_t k = 0; k < 3; ++k) {
      p[k] = verts[f[0]][k] + a * (verts[f[1]][k] - verts[f[0]][k]) + b * (verts[f[2]][k] - verts[f[0]][k]);
    }
    cloud.points.push_back(p);
    cloud.normals.push_back(normals[fi]);
  }
  return cloud;
}

LssFixture make_lss_fixture(const TriMesh& template_mesh, double matching_scale) {
  const double target = static_cast<double>(kInputSize) / (1.0 + 2.0 * matching_scale);
  // Extent shrinks monotonically with depth; bisect for the wanted span.
  Camera camera;
  double lo = 0.6, hi = 50.0;
  for (int i = 0; i < 200; ++i) {
    camera.extrinsic[11] = 0.5 * (lo + hi);
    if (projected_extent(template_mesh, camera) > target) {
      lo = camera.extrinsic[11];
    } else {
      hi = camera.extrinsic[11];
    }
  }
  camera.extrinsic[11] = 0.5 * (lo + hi);

  Camera photo = camera;
  photo.focal = camera.focal * 1.3;
  photo.cx = 197.0;
  photo.cy = 139.0;
  constexpr std::size_t kWidth = 360, kHeight = 300;

  LssFixture fx;
  fx.camera = camera;
  fx.mask = rasterize_silhouette(template_mesh, photo, kWidth, kHeight);
  fx.image = Image::filled(kWidth, kHeight, 3, 0.0f);
  for (std::size_t y = 0; y < kHeight; ++y) {
    for (std::size_t x = 0; x < kWidth; ++x) {
      const double gx = static_cast<double>(x) / kWidth, gy = static_cast<double>(y) / kHeight;
      const bool inside = fx.mask.at(x, y) != 0;
      const double dx = (static_cast<double>(x) - photo.cx) / 100.0;
      const double dy = (static_cast<double>(y) - photo.cy) / 100.0;
      const double shade = std::clamp(1.0 - 0.5 * (dx * dx + dy * dy), 0.0, 1.0);
      fx.image.at(x, y, 0) = static_cast<float>(inside ? 0.8 * shade : 0.85 - 0.1 * gy);
      fx.image.at(x, y, 1) = static_cast<float>(inside ? 0.3 * shade : 0.85 - 0.05 * gx);
      fx.image.at(x, y, 2) = static_cast<float>(inside ? 0.2 + 0.2 * shade : 0.9);
    }
  }
  return fx;
}

std::filesystem::path fixture_dir() {
  if (const char* env = std::getenv("TP2M_FIXTURE_DIR"); env != nullptr && *env != '\0') {
    return env;
  }
#ifdef TP2M_FIXTURE_DIR
  return TP2M_FIXTURE_DIR;
#else
  return "fixtures";
#endif
}

std::filesystem::path bundled_template_path() { return fixture_dir() / "ellipsoid_156.obj"; }

TriMesh load_template(const std::filesystem::path& path) {
  TriMesh mesh = read_obj(path);
  if (mesh.vertex_count() != kTemplateVertexCount) {
    throw ConfigError("template " + path.string() + " has " + std::to_string(mesh.vertex_count()) +
                      " vertices, expected 156");
  }
  return mesh;
}

void write_fixtures(const std::filesystem::path& dir, std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const TriMesh tmpl = make_ellipsoid_template();
  write_obj(tmpl, dir / "ellipsoid_156.obj");
  write_point_cloud(sample_cube_surface(2000, seed), dir / "cube_2000.xyz");
  write_png(synthetic_image(seed), dir / "synthetic.png");
  write_camera(Camera{}, dir / "default_camera.txt");
  const LssFixture fx = make_lss_fixture(tmpl);
  write_png(fx.image, dir / "lss_image.png");
  write_mask_png(fx.mask, dir / "lss_mask.png");
  write_camera(fx.camera, dir / "lss_camera.txt");
}

}  // namespace tp2m
