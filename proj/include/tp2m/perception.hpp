#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "tp2m/autodiff.hpp"
#include "tp2m/mesh.hpp"

namespace tp2m {

inline constexpr std::size_t kInputSize = 224;
inline constexpr std::size_t kPixelFeatureDims = 3840;
inline constexpr std::size_t kVertexFeatureDims = kPixelFeatureDims + 3;
inline constexpr std::size_t kGlobalTokenCount = 49;

// Interleaved row-major image, values nominally in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  static Image filled(std::size_t width, std::size_t height, std::size_t channels, float value);
  float& at(std::size_t x, std::size_t y, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  float at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

// Binary object mask, row-major, 1 = object.
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;

  std::uint8_t at(std::size_t x, std::size_t y) const { return bits[y * width + x]; }
  std::size_t count() const;
};

// `.png` files are decoded as RGB. Anything else is read as raw
// little-endian f32 of shape 224x224x3.
Image read_image(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);
void write_raw_f32(const Image& image, const std::filesystem::path& path);
// PNG; any nonzero RGB channel marks the object.
Mask read_mask(const std::filesystem::path& path);
void write_mask_png(const Mask& mask, const std::filesystem::path& path);

// Pinhole camera. `extrinsic` is the row-major 3x4 [R | t] mapping model
// coordinates into the camera frame.
struct Camera {
  double focal = 248.0;
  double cx = 112.0;
  double cy = 112.0;
  std::array<double, 12> extrinsic{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 2.2};

  Vec3 to_camera(const Vec3& p) const;
  void validate() const;
};

// Parses `key = value` lines: focal, cx, cy and extrinsic (12 numbers).
Camera read_camera(const std::filesystem::path& path);
void write_camera(const Camera& camera, const std::filesystem::path& path);

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
  // False when the point is not strictly in front of the camera.
  bool valid = false;
};

Projection project(const Vec3& vertex, const Camera& camera);

// Square feature map stored as (resolution * resolution, channels), rows
// ordered y-major.
struct FeatureGrid {
  std::size_t resolution = 0;
  std::size_t channels = 0;
  ad::Tensor values;
};

struct FeaturePyramid {
  std::array<FeatureGrid, 4> levels;

  // The coarsest (7x7) map doubles as the global feature tokens.
  const FeatureGrid& global() const { return levels[3]; }
};

// Deterministic stand-in backbone: strided random convolutions with tanh,
// producing 56x56x256, 28x28x512, 14x14x1024 and 7x7x2048 maps.
FeaturePyramid synth_backbone(const Image& image, std::uint64_t seed);

// Bilinear lookup at image-plane pixel coordinates (u, v). Cells outside
// the grid read as zero; points outside the 224x224 frame return zeros.
std::vector<double> sample_bilinear(const FeatureGrid& grid, double u, double v);

// Per vertex: samples from all four maps followed by the 3D coordinate
// (3843 columns). Vertices behind the camera or off-frame pool zeros.
ad::Tensor pool_vertex_features(const TriMesh& mesh, const FeaturePyramid& pyramid,
                                const Camera& camera);

// ---- Taped operations --------------------------------------------------------

// (n, 3) positions -> (n, 3) rows of (u, v, depth).
ad::Var project_points(ad::Var positions, const Camera& camera);

// Samples an (R*R, C) grid at (n, 3) (u, v, depth) rows -> (n, C).
// Differentiable in both the grid and the image coordinates.
ad::Var bilinear_sample(ad::Var grid, ad::Var uvz, std::size_t resolution);

}  // namespace tp2m
