#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tp2m/mesh.hpp"
#include "tp2m/perception.hpp"
#include "tp2m/pipeline.hpp"

namespace tp2m {

inline constexpr double kScaleMin = 0.2;
inline constexpr double kScaleMax = 0.4;

struct CropResult {
  Image image;           // 224x224x3
  Mask mask;             // mask pushed through the same resampling
  std::size_t side = 0;    // h: side of the square around the mask bounding box
  std::size_t border = 0;  // p = round(s * h)
  std::size_t padded_side = 0;  // h + 2p
};

// Tight mask bounding box -> centered square of side h -> border of
// p = round(s * h) -> bilinear resize to 224x224. Area outside the bounding
// box takes the image's mean border color.
CropResult crop_and_pad(const Image& image, const Mask& mask, double s);

// Filled projected silhouette at 224x224; a pixel is set when its center
// lies inside a projected face.
Mask rasterize_silhouette(const TriMesh& mesh, const Camera& camera);
Mask rasterize_silhouette(const TriMesh& mesh, const Camera& camera, std::size_t width,
                          std::size_t height);

double mask_iou(const Mask& a, const Mask& b);

// Silhouette IoU between the mesh and a 224x224 mask; 0 for an empty
// silhouette.
double quality_score(const TriMesh& mesh, const Mask& mask, const Camera& camera);

using Scorer = std::function<double(const TriMesh&, const Mask&, const Camera&)>;

struct LssCandidate {
  double s = 0.0;
  std::size_t border = 0;
  std::size_t side = 0;
  double score = 0.0;
  bool ok = false;
  std::string error;
};

struct LssResult {
  std::size_t best = 0;  // index into table
  std::vector<LssCandidate> table;
  TriMesh best_mesh;

  const LssCandidate& chosen() const { return table[best]; }
};

std::vector<double> default_scale_grid();
// Comma-separated list. Values outside [0.2, 0.4] need `allow_wide`.
std::vector<double> parse_scale_grid(const std::string& text, bool allow_wide = false);

// Crops at each s, reconstructs, scores; keeps the best score with ties
// going to the smaller s. Throws when every candidate fails.
LssResult linear_scale_search(const Image& image, const Mask& mask, const Camera& camera,
                              TdmModel& model, std::span<const double> grid, std::uint64_t seed,
                              const Scorer& scorer = quality_score);

struct RunConfig {
  std::filesystem::path image;
  std::filesystem::path mask;
  std::optional<std::filesystem::path> camera;
  std::optional<std::filesystem::path> checkpoint;
  std::filesystem::path out_dir = ".";
  std::vector<double> grid = default_scale_grid();
  bool allow_wide_grid = false;
  std::size_t width = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

void write_lss_report(const LssResult& result, const RunConfig& config,
                      const std::filesystem::path& path);

}  // namespace tp2m
