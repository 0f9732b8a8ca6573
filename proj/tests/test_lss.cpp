#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "tp2m/error.hpp"
#include "tp2m/fixtures.hpp"
#include "tp2m/lss.hpp"

using namespace tp2m;
namespace fs = std::filesystem;

namespace {

Image random_image(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Image img = Image::filled(w, h, 3, 0.0f);
  for (float& v : img.pixels) v = d(rng);
  return img;
}

Mask box_mask(std::size_t w, std::size_t h, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1) {
  Mask m{w, h, std::vector<std::uint8_t>(w * h, 0)};
  for (std::size_t y = y0; y <= y1; ++y)
    for (std::size_t x = x0; x <= x1; ++x) m.bits[y * w + x] = 1;
  return m;
}

Image mirror(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

Mask mirror(const Mask& m) {
  Mask out = m;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) out.bits[y * m.width + x] = m.at(m.width - 1 - x, y);
  return out;
}

ModelConfig small_config() {
  ModelConfig c;
  c.width = 16;
  return c;
}

}  // namespace

TEST_CASE("border width is round(s * h)") {
  std::mt19937_64 rng(1);
  const Image img = random_image(80, 70, rng);
  const Mask m = box_mask(80, 70, 10, 12, 59, 40);  // 50 x 29
  CHECK(crop_and_pad(img, m, 0.3).side == 50);
  CHECK(crop_and_pad(img, m, 0.3).border == 15);
  CHECK(crop_and_pad(img, m, 0.25).border == 13);  // 12.5 rounds away from zero
  CHECK(crop_and_pad(img, m, 0.2).border == 10);
  CHECK(crop_and_pad(img, m, 0.0).border == 0);
  const CropResult r = crop_and_pad(img, m, 0.4);
  CHECK(r.padded_side == 90);
  CHECK(r.image.width == 224);
  CHECK(r.image.height == 224);
  CHECK(r.mask.width == 224);
}

TEST_CASE("unit-ratio crop copies the box and fills the rest with the border mean") {
  std::mt19937_64 rng(2);
  const Image img = random_image(200, 180, rng);
  const Mask m = box_mask(200, 180, 10, 20, 149, 159);  // h = 140, p = 42, h + 2p = 224
  const CropResult r = crop_and_pad(img, m, 0.3);
  REQUIRE(r.padded_side == 224);
  for (std::size_t y = 0; y < 140; ++y) {
    for (std::size_t x = 0; x < 140; ++x) {
      for (std::size_t c = 0; c < 3; ++c) CHECK(r.image.at(x + 42, y + 42, c) == img.at(x + 10, y + 20, c));
    }
  }
  // Border ring mean, computed directly.
  for (std::size_t c = 0; c < 3; ++c) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        if (x == 0 || y == 0 || x + 1 == img.width || y + 1 == img.height) {
          total += img.at(x, y, c);
          ++count;
        }
      }
    }
    const double fill = total / static_cast<double>(count);
    CHECK(r.image.at(0, 0, c) == doctest::Approx(fill).epsilon(1e-6));
    CHECK(r.image.at(223, 100, c) == doctest::Approx(fill).epsilon(1e-6));
    CHECK(r.image.at(100, 10, c) == doctest::Approx(fill).epsilon(1e-6));
  }
  CHECK(r.mask.count() == 140 * 140);
  CHECK(r.mask.at(42, 42) == 1);
  CHECK(r.mask.at(41, 42) == 0);
}

TEST_CASE("crop commutes exactly with horizontal mirroring") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    const std::size_t w = 61 + trial * 10, h = 47 + trial;
    const Image img = random_image(w, h, rng);
    std::uniform_int_distribution<std::size_t> dx(0, w / 3), dy(0, h / 3);
    const std::size_t x0 = dx(rng), y0 = dy(rng);
    Mask m = box_mask(w, h, x0, y0, x0 + w / 2, y0 + h / 2);
    m.bits[(y0 + 1) * w + x0] = 0;  // break the symmetry of the mask itself
    for (double s : {0.2, 0.25, 0.3, 0.35, 0.4}) {
      const CropResult a = crop_and_pad(mirror(img), mirror(m), s);
      const CropResult b = crop_and_pad(img, m, s);
      CHECK(a.image.pixels == mirror(b.image).pixels);
      CHECK(a.mask.bits == mirror(b.mask).bits);
    }
  }
}

TEST_CASE("crop contract violations") {
  std::mt19937_64 rng(4);
  const Image img = random_image(30, 30, rng);
  CHECK_THROWS_AS(crop_and_pad(img, box_mask(31, 30, 1, 1, 5, 5), 0.3), ContractViolation);
  CHECK_THROWS_AS(crop_and_pad(img, Mask{30, 30, std::vector<std::uint8_t>(900, 0)}, 0.3), ContractViolation);
  CHECK_THROWS_AS(crop_and_pad(img, box_mask(30, 30, 1, 1, 5, 5), -0.1), ContractViolation);
}

TEST_CASE("mask IoU examples") {
  const Mask a = box_mask(8, 8, 0, 0, 3, 7);
  const Mask b = box_mask(8, 8, 4, 0, 7, 7);
  const Mask half = box_mask(8, 8, 2, 0, 5, 7);
  CHECK(mask_iou(a, a) == 1.0);
  CHECK(mask_iou(a, b) == 0.0);
  CHECK(mask_iou(a, half) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(mask_iou(half, a) == mask_iou(a, half));
  const Mask empty{8, 8, std::vector<std::uint8_t>(64, 0)};
  CHECK(mask_iou(empty, empty) == 0.0);
  CHECK_THROWS_AS(mask_iou(a, box_mask(9, 8, 0, 0, 1, 1)), ContractViolation);
}

TEST_CASE("silhouette rasterization and quality score") {
  // Square of side 2 at depth 2.48 spans exactly 200 pixels around the center.
  const TriMesh quad({{-1, -1, 0}, {1, -1, 0}, {1, 1, 0}, {-1, 1, 0}}, {{0, 1, 2}, {0, 2, 3}});
  Camera cam;
  cam.extrinsic[11] = 2.48;
  const Mask sil = rasterize_silhouette(quad, cam);
  CHECK(sil.count() == 200 * 200);
  CHECK(sil.at(12, 12) == 1);
  CHECK(sil.at(11, 12) == 0);
  CHECK(sil.at(211, 211) == 1);
  CHECK(sil.at(212, 211) == 0);
  CHECK(quality_score(quad, sil, cam) == 1.0);

  Camera behind = cam;
  behind.extrinsic[11] = -3.0;
  CHECK(rasterize_silhouette(quad, behind).count() == 0);
  CHECK(quality_score(quad, sil, behind) == 0.0);

  const TriMesh tmpl = make_ellipsoid_template();
  const Mask t = rasterize_silhouette(tmpl, Camera{});
  for (std::uint64_t seed : {1u, 2u}) {
    std::mt19937_64 rng(seed);
    Mask noisy = t;
    std::uniform_int_distribution<std::size_t> pick(0, noisy.bits.size() - 1);
    for (int i = 0; i < 500; ++i) noisy.bits[pick(rng)] ^= 1;
    const double q = quality_score(tmpl, noisy, Camera{});
    CHECK(q >= 0.0);
    CHECK(q <= 1.0);
    CHECK(q < 1.0);
  }
}

TEST_CASE("scale grid parsing and validation") {
  CHECK(default_scale_grid() == std::vector<double>{0.20, 0.25, 0.30, 0.35, 0.40});
  CHECK(parse_scale_grid("0.2,0.3, 0.4") == std::vector<double>{0.2, 0.3, 0.4});
  CHECK(parse_scale_grid("0.3") == std::vector<double>{0.3});
  CHECK_THROWS_AS(parse_scale_grid("0.1,0.3"), ConfigError);
  CHECK_THROWS_AS(parse_scale_grid("0.3,0.45"), ConfigError);
  CHECK(parse_scale_grid("0.1,0.3", true) == std::vector<double>{0.1, 0.3});
  CHECK_THROWS_AS(parse_scale_grid("0.3,abc"), ConfigError);
  CHECK_THROWS_AS(parse_scale_grid("0.3x"), ConfigError);
  CHECK_THROWS_AS(parse_scale_grid("-0.1", true), ConfigError);

  RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.width = 10;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.width = 16;
  cfg.grid = {0.5};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.allow_wide_grid = true;
  CHECK_NOTHROW(cfg.validate());
  cfg.grid.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("search: single candidate, ties to the smaller s, all-fail diagnostics") {
  const LssFixture fx = make_lss_fixture(make_ellipsoid_template());
  TdmModel model(small_config(), make_ellipsoid_template());

  const std::vector<double> one{0.35};
  const LssResult single = linear_scale_search(fx.image, fx.mask, fx.camera, model, one, 0);
  CHECK(single.table.size() == 1);
  CHECK(single.best == 0);
  CHECK(single.chosen().s == 0.35);

  const std::vector<double> grid{0.4, 0.25, 0.3};
  auto flat = [](const TriMesh&, const Mask&, const Camera&) { return 0.5; };
  const LssResult tie = linear_scale_search(fx.image, fx.mask, fx.camera, model, grid, 0, flat);
  CHECK(tie.chosen().s == 0.25);

  int calls = 0;
  auto flaky = [&](const TriMesh&, const Mask&, const Camera&) -> double {
    if (calls++ == 1) throw NumericalError("synthetic failure");
    return 0.1 * calls;
  };
  const LssResult partial = linear_scale_search(fx.image, fx.mask, fx.camera, model, grid, 0, flaky);
  CHECK_FALSE(partial.table[1].ok);
  CHECK(partial.table[1].error == "synthetic failure");
  CHECK(partial.chosen().s == 0.3);

  auto broken = [](const TriMesh&, const Mask&, const Camera&) -> double {
    throw NumericalError("degenerate");
  };
  try {
    linear_scale_search(fx.image, fx.mask, fx.camera, model, grid, 0, broken);
    FAIL("expected a NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("s=0.4: degenerate") != std::string::npos);
    CHECK(msg.find("s=0.25: degenerate") != std::string::npos);
    CHECK(msg.find("s=0.3: degenerate") != std::string::npos);
  }
}

TEST_CASE("search on the rendered fixture selects the matching scale") {
  const TriMesh tmpl = make_ellipsoid_template();
  const LssFixture fx = make_lss_fixture(tmpl);
  TdmModel model(small_config(), tmpl);
  const auto grid = default_scale_grid();
  const LssResult a = linear_scale_search(fx.image, fx.mask, fx.camera, model, grid, 7);
  const LssResult b = linear_scale_search(fx.image, fx.mask, fx.camera, model, grid, 7);
  REQUIRE(a.table.size() == 5);
  CHECK(a.chosen().s == 0.30);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a.table[i].ok);
    CHECK(a.table[i].score == b.table[i].score);
    CHECK(a.table[i].score >= 0.0);
    CHECK(a.table[i].score <= 1.0);
    CHECK(a.chosen().score >= a.table[i].score);
    CHECK(a.table[i].border == static_cast<std::size_t>(std::lround(grid[i] * static_cast<double>(a.table[i].side))));
  }
  CHECK(a.best_mesh.vertices() == b.best_mesh.vertices());

  RunConfig cfg;
  cfg.seed = 7;
  const fs::path path = fs::temp_directory_path() / "tp2m_lss_report.json";
  write_lss_report(a, cfg, path);
  std::ifstream in(path);
  const nlohmann::json report = nlohmann::json::parse(in);
  CHECK(report["chosen_s"].get<double>() == 0.30);
  CHECK(report["candidates"].size() == 5);
  CHECK(report["candidates"][2]["score"].get<double>() == a.table[2].score);
  fs::remove(path);
}
