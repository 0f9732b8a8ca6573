// Command-line front end: reconstruct, overfit, gradcheck, fixtures, unpool-trace.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tp2m/error.hpp"
#include "tp2m/fixtures.hpp"
#include "tp2m/lss.hpp"
#include "tp2m/pipeline.hpp"
#include "tp2m/verification.hpp"

namespace fs = std::filesystem;
using namespace tp2m;

namespace {

constexpr int kExitUsage = 2;

const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kIo: return "io error";
    case ErrorCategory::kConfig: return "config error";
    case ErrorCategory::kNumerical: return "numerical error";
    case ErrorCategory::kContract: break;
  }
  return "error";
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

int run_reconstruct(const RunConfig& cfg, const std::string& grid_text, const fs::path& template_path) {
  RunConfig config = cfg;
  if (!grid_text.empty()) config.grid = parse_scale_grid(grid_text, config.allow_wide_grid);
  config.validate();
  const Image image = read_image(config.image);
  const Mask mask = read_mask(config.mask);
  const Camera camera = config.camera ? read_camera(*config.camera) : Camera{};
  camera.validate();
  ModelConfig mc;
  mc.width = config.width;
  mc.init_seed = config.seed;
  TdmModel model(mc, load_template(template_path));
  if (config.checkpoint) load_parameters(model.params(), *config.checkpoint);

  const LssResult result = linear_scale_search(image, mask, camera, model, config.grid, config.seed);
  ensure_dir(config.out_dir);
  write_obj(result.best_mesh, config.out_dir / "mesh.obj");
  write_lss_report(result, config, config.out_dir / "report.json");
  for (const auto& c : result.table) {
    if (c.ok) {
      std::printf("s=%.3f p=%zu score=%.6f\n", c.s, c.border, c.score);
    } else {
      std::printf("s=%.3f failed: %s\n", c.s, c.error.c_str());
    }
  }
  std::printf("chosen s=%.3f score=%.6f\n", result.chosen().s, result.chosen().score);
  return 0;
}

int run_overfit(TrainConfig config, const std::optional<fs::path>& target_path, const fs::path& out_dir,
                const std::optional<fs::path>& save, const fs::path& template_path) {
  const PointCloud target = target_path ? read_point_cloud(*target_path)
                                        : read_point_cloud(fixture_dir() / "cube_2000.xyz");
  if (config.width == 0 || config.width % config.heads != 0) {
    throw ConfigError("width must be a positive multiple of the head count");
  }
  const TriMesh tmpl = load_template(template_path);
  ModelConfig mc;
  mc.width = config.width;
  mc.heads = config.heads;
  mc.init_seed = config.seed;
  TdmModel model(mc, tmpl);
  const FeaturePyramid pyramid = synth_backbone(synthetic_image(config.seed), config.seed);
  const TrainResult result = overfit_train(target, config, model, pyramid, Camera{},
                                           [&](std::size_t step, const LossReport& r) {
                                             if (step % 25 == 0 || step + 1 == config.steps) {
                                               std::printf("step %zu total %.6f\n", step, r.total);
                                               std::fflush(stdout);
                                             }
                                           });
  ensure_dir(out_dir);
  write_loss_csv(result.curve, out_dir / "loss.csv");
  write_obj(result.final_meshes.back(), out_dir / "final.obj");
  if (save) save_parameters(model.params(), *save);
  const double first = result.curve.front().total, last = result.curve.back().total;
  std::printf("initial %.6f final %.6f ratio %.4f\n", first, last, last / first);
  std::printf("final mesh chamfer-L1 %.6f (mean point distance per direction, summed; model units, unscaled)\n",
              chamfer_l1(result.final_meshes.back().vertices(), target.points));
  return 0;
}

int run_gradcheck(std::size_t width, std::uint64_t seed) {
  const auto entries = run_gradient_suite(width, seed);
  bool ok = true;
  for (const auto& e : entries) {
    std::printf("%-22s max_rel_error %.3e  coords %6zu  %s\n", e.block.c_str(), e.result.max_rel_error,
                e.result.coordinates, e.passed() ? "ok" : "FAIL");
    ok = ok && e.passed();
  }
  if (!ok) throw NumericalError("gradient check exceeded tolerance 1e-4");
  return 0;
}

int run_unpool_trace(const fs::path& template_path) {
  TriMesh mesh = load_template(template_path);
  std::string vertices = std::to_string(mesh.vertex_count());
  std::string faces = std::to_string(mesh.face_count());
  std::string euler = std::to_string(mesh.euler_characteristic());
  for (int i = 0; i < 3; ++i) {
    mesh = unpool(mesh);
    vertices += " " + std::to_string(mesh.vertex_count());
    faces += " " + std::to_string(mesh.face_count());
    euler += " " + std::to_string(mesh.euler_characteristic());
  }
  std::printf("%s\n", vertices.c_str());
  std::printf("faces %s\n", faces.c_str());
  std::printf("euler %s\n", euler.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-view mesh reconstruction with transformer deformation stages"};
  app.require_subcommand(1);
  fs::path template_path = bundled_template_path();
  app.add_option("--template", template_path, "Template mesh (OBJ, 156 vertices)");

  RunConfig rc;
  std::string grid_text;
  std::string camera_path, checkpoint_path;
  auto* reconstruct = app.add_subcommand("reconstruct", "Image + mask to OBJ mesh and scale-search report");
  reconstruct->add_option("--image", rc.image, "Input image (PNG or raw f32)")->required();
  reconstruct->add_option("--mask", rc.mask, "Object mask (PNG, nonzero = object)")->required();
  reconstruct->add_option("--camera", camera_path, "Camera file (key = value)");
  reconstruct->add_option("--checkpoint", checkpoint_path, "Checkpoint stem");
  reconstruct->add_option("--out-dir", rc.out_dir, "Output directory");
  reconstruct->add_option("--grid", grid_text, "Comma-separated scale values");
  reconstruct->add_flag("--allow-wide-grid", rc.allow_wide_grid, "Accept scales outside [0.2, 0.4]");
  reconstruct->add_option("--seed", rc.seed, "Seed");
  reconstruct->add_option("--width", rc.width, "Model width");

  TrainConfig tc;
  std::string target_path, save_path;
  fs::path overfit_out = ".";
  auto* overfit = app.add_subcommand("overfit", "Fit the model to one target point cloud");
  overfit->add_option("--target", target_path, "Point cloud (x y z nx ny nz per line)");
  overfit->add_option("--steps", tc.steps, "Optimizer steps");
  overfit->add_option("--lr", tc.lr, "Learning rate");
  overfit->add_option("--width", tc.width, "Model width");
  overfit->add_option("--seed", tc.seed, "Seed");
  overfit->add_option("--out-dir", overfit_out, "Output directory");
  overfit->add_option("--save-checkpoint", save_path, "Write trained parameters to this stem");

  std::size_t gc_width = 16;
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--width", gc_width, "Block width (multiple of 4, at most 32)");
  gradcheck->add_option("--seed", gc_seed, "Seed");

  fs::path fixture_out = fixture_dir();
  std::uint64_t fixture_seed = 0;
  auto* fixtures = app.add_subcommand("fixtures", "Regenerate seeded test data");
  fixtures->add_option("--out-dir", fixture_out, "Output directory");
  fixtures->add_option("--seed", fixture_seed, "Seed");

  auto* trace = app.add_subcommand("unpool-trace", "Vertex counts over three unpool steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (reconstruct->parsed()) {
      if (!camera_path.empty()) rc.camera = camera_path;
      if (!checkpoint_path.empty()) rc.checkpoint = checkpoint_path;
      return run_reconstruct(rc, grid_text, template_path);
    }
    if (overfit->parsed()) {
      std::optional<fs::path> target, save;
      if (!target_path.empty()) target = target_path;
      if (!save_path.empty()) save = save_path;
      return run_overfit(tc, target, overfit_out, save, template_path);
    }
    if (gradcheck->parsed()) return run_gradcheck(gc_width, gc_seed);
    if (fixtures->parsed()) {
      write_fixtures(fixture_out, fixture_seed);
      std::printf("fixtures written to %s\n", fixture_out.string().c_str());
      return 0;
    }
    if (trace->parsed()) return run_unpool_trace(template_path);
  } catch (const Error& e) {
    std::fprintf(stderr, "%s: %s\n", category_name(e.category()), e.what());
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
