#include "tp2m/perception.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "tp2m/error.hpp"

namespace tp2m {

namespace fs = std::filesystem;

Image Image::filled(std::size_t width, std::size_t height, std::size_t channels, float value) {
  return Image{width, height, channels, std::vector<float>(width * height * channels, value)};
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

// ---- Image IO ----------------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_png_rgb(const fs::path& path, std::size_t& width, std::size_t& height) {
  if (!fs::exists(path)) throw IoError("file not found: " + path.string());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ConfigError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ConfigError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  width = img.width;
  height = img.height;
  return buffer;
}

void write_png_buffer(const fs::path& path, std::size_t width, std::size_t height,
                      std::uint32_t format, const std::vector<std::uint8_t>& buffer) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = format;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

bool has_png_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

}  // namespace

Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("file not found: " + path.string());
  if (has_png_extension(path)) {
    std::size_t w = 0, h = 0;
    const auto bytes = read_png_rgb(path, w, h);
    Image out{w, h, 3, std::vector<float>(bytes.size())};
    for (std::size_t i = 0; i < bytes.size(); ++i) out.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
    return out;
  }
  constexpr std::size_t count = kInputSize * kInputSize * 3;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  Image out{kInputSize, kInputSize, 3, std::vector<float>(count)};
  std::vector<std::uint8_t> raw(count * 4);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()) || in.peek() != EOF) {
    throw ConfigError("raw image " + path.string() + " must hold exactly 224x224x3 little-endian f32");
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) |
                               static_cast<std::uint32_t>(raw[4 * i + 1]) << 8 |
                               static_cast<std::uint32_t>(raw[4 * i + 2]) << 16 |
                               static_cast<std::uint32_t>(raw[4 * i + 3]) << 24;
    out.pixels[i] = std::bit_cast<float>(bits);
  }
  return out;
}

void write_raw_f32(const Image& image, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (float v : image.pixels) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff), static_cast<char>(bits >> 24)};
    out.write(bytes, 4);
  }
}

void write_png(const Image& image, const fs::path& path) {
  if (image.channels != 3) throw ContractViolation("write_png expects an RGB image");
  std::vector<std::uint8_t> buffer(image.pixels.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    buffer[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  write_png_buffer(path, image.width, image.height, PNG_FORMAT_RGB, buffer);
}

Mask read_mask(const fs::path& path) {
  std::size_t w = 0, h = 0;
  const auto bytes = read_png_rgb(path, w, h);
  Mask m{w, h, std::vector<std::uint8_t>(w * h)};
  for (std::size_t i = 0; i < w * h; ++i) {
    m.bits[i] = (bytes[3 * i] | bytes[3 * i + 1] | bytes[3 * i + 2]) != 0 ? 1 : 0;
  }
  return m;
}

void write_mask_png(const Mask& mask, const fs::path& path) {
  std::vector<std::uint8_t> buffer(mask.bits.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = mask.bits[i] ? 255 : 0;
  write_png_buffer(path, mask.width, mask.height, PNG_FORMAT_GRAY, buffer);
}

// ---- Camera ------------------------------------------------------------------

Vec3 Camera::to_camera(const Vec3& p) const {
  const auto& e = extrinsic;
  return {e[0] * p[0] + e[1] * p[1] + e[2] * p[2] + e[3],
          e[4] * p[0] + e[5] * p[1] + e[6] * p[2] + e[7],
          e[8] * p[0] + e[9] * p[1] + e[10] * p[2] + e[11]};
}

void Camera::validate() const {
  if (!(focal > 0.0)) throw ConfigError("camera focal length must be positive");
  const auto size = static_cast<double>(kInputSize);
  if (!(cx >= 0.0 && cx < size && cy >= 0.0 && cy < size)) {
    throw ConfigError("camera principal point must lie inside the 224x224 image");
  }
  for (double v : extrinsic) {
    if (!std::isfinite(v)) throw ConfigError("camera extrinsic has non-finite entries");
  }
}

Camera read_camera(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open camera config " + path.string());
  std::map<std::string, std::string> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    std::istringstream key_stream(line.substr(0, eq));
    std::string key;
    key_stream >> key;
    entries[key] = line.substr(eq + 1);
  }
  Camera cam;
  auto number = [&](const std::string& key) {
    auto it = entries.find(key);
    if (it == entries.end()) throw ConfigError(path.string() + ": missing key '" + key + "'");
    std::istringstream ss(it->second);
    double v = 0.0;
    std::string rest;
    if (!(ss >> v) || (ss >> rest)) throw ConfigError(path.string() + ": bad value for '" + key + "'");
    return v;
  };
  cam.focal = number("focal");
  cam.cx = number("cx");
  cam.cy = number("cy");
  auto it = entries.find("extrinsic");
  if (it == entries.end()) throw ConfigError(path.string() + ": missing key 'extrinsic'");
  std::istringstream ss(it->second);
  for (double& v : cam.extrinsic) {
    if (!(ss >> v)) throw ConfigError(path.string() + ": extrinsic needs 12 numbers");
  }
  std::string rest;
  if (ss >> rest) throw ConfigError(path.string() + ": extrinsic needs 12 numbers");
  for (const auto& [key, value] : entries) {
    if (key != "focal" && key != "cx" && key != "cy" && key != "extrinsic") {
      throw ConfigError(path.string() + ": unknown key '" + key + "'");
    }
  }
  cam.validate();
  return cam;
}

void write_camera(const Camera& camera, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(17);
  out << "focal = " << camera.focal << "\ncx = " << camera.cx << "\ncy = " << camera.cy
      << "\nextrinsic =";
  for (double v : camera.extrinsic) out << ' ' << v;
  out << '\n';
}

Projection project(const Vec3& vertex, const Camera& camera) {
  const Vec3 c = camera.to_camera(vertex);
  Projection p;
  p.depth = c[2];
  p.valid = c[2] > 0.0;
  if (p.valid) {
    p.u = camera.focal * c[0] / c[2] + camera.cx;
    p.v = camera.focal * c[1] / c[2] + camera.cy;
  }
  return p;
}

// ---- Backbone ----------------------------------------------------------------

namespace {

struct ConvSpec {
  std::size_t kernel;  // kernel size == stride
  std::size_t out_channels;
};

// Non-overlapping strided convolution on a (res*res, C) map followed by tanh.
ad::Tensor strided_conv(const ad::Tensor& input, std::size_t in_res, std::size_t in_ch,
                        const ConvSpec& spec, std::mt19937_64& rng) {
  const std::size_t k = spec.kernel, out_res = in_res / k, out_ch = spec.out_channels;
  const std::size_t fan_in = k * k * in_ch;
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in)) * 1.5;
  std::uniform_real_distribution<double> weight_dist(-bound, bound);
  std::vector<double> weights(fan_in * out_ch);
  for (double& w : weights) w = weight_dist(rng);
  std::uniform_real_distribution<double> bias_dist(-0.1, 0.1);
  std::vector<double> bias(out_ch);
  for (double& b : bias) b = bias_dist(rng);

  ad::Tensor out = ad::Tensor::matrix(out_res * out_res, out_ch);
  std::vector<double> patch(fan_in);
  for (std::size_t oy = 0; oy < out_res; ++oy) {
    for (std::size_t ox = 0; ox < out_res; ++ox) {
      std::size_t q = 0;
      for (std::size_t dy = 0; dy < k; ++dy) {
        for (std::size_t dx = 0; dx < k; ++dx) {
          const double* src = input.data() + ((oy * k + dy) * in_res + ox * k + dx) * in_ch;
          std::copy_n(src, in_ch, patch.data() + q);
          q += in_ch;
        }
      }
      double* dst = out.data() + (oy * out_res + ox) * out_ch;
      std::copy(bias.begin(), bias.end(), dst);
      for (std::size_t p = 0; p < fan_in; ++p) {
        const double a = patch[p];
        const double* wrow = weights.data() + p * out_ch;
        for (std::size_t c = 0; c < out_ch; ++c) dst[c] += a * wrow[c];
      }
      for (std::size_t c = 0; c < out_ch; ++c) dst[c] = std::tanh(dst[c]);
    }
  }
  return out;
}

}  // namespace

FeaturePyramid synth_backbone(const Image& image, std::uint64_t seed) {
  if (image.width != kInputSize || image.height != kInputSize || image.channels != 3) {
    throw ContractViolation("synth_backbone expects a 224x224x3 image, got " +
                            std::to_string(image.width) + "x" + std::to_string(image.height) +
                            "x" + std::to_string(image.channels));
  }
  std::mt19937_64 rng(seed);
  ad::Tensor x = ad::Tensor::matrix(kInputSize * kInputSize, 3);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 2.0 * static_cast<double>(image.pixels[i]) - 1.0;

  constexpr std::array<ConvSpec, 4> specs{{{4, 256}, {2, 512}, {2, 1024}, {2, 2048}}};
  FeaturePyramid pyramid;
  std::size_t res = kInputSize, ch = 3;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    x = strided_conv(x, res, ch, specs[l], rng);
    res /= specs[l].kernel;
    ch = specs[l].out_channels;
    pyramid.levels[l] = FeatureGrid{res, ch, x};
  }
  return pyramid;
}

// ---- Bilinear sampling -------------------------------------------------------

namespace {

struct Stencil {
  bool in_frame = false;
  std::array<std::ptrdiff_t, 4> cell{-1, -1, -1, -1};  // -1: outside the grid
  std::array<double, 4> weight{};
  std::array<double, 4> d_du{};
  std::array<double, 4> d_dv{};
};

bool in_frame(double u, double v, double depth) {
  const auto size = static_cast<double>(kInputSize);
  return depth > 0.0 && u >= 0.0 && u < size && v >= 0.0 && v < size;
}

// Cell j covers grid coordinates [j, j+1); its center sits at j + 0.5.
Stencil make_stencil(double u, double v, double depth, std::size_t resolution) {
  Stencil s;
  if (!in_frame(u, v, depth)) return s;
  s.in_frame = true;
  const double scale = static_cast<double>(resolution) / static_cast<double>(kInputSize);
  const double x = u * scale - 0.5, y = v * scale - 0.5;
  const double fx = std::floor(x), fy = std::floor(y);
  const double tx = x - fx, ty = y - fy;
  const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
  const auto res = static_cast<std::ptrdiff_t>(resolution);
  const std::array<std::ptrdiff_t, 4> xs{x0, x0 + 1, x0, x0 + 1};
  const std::array<std::ptrdiff_t, 4> ys{y0, y0, y0 + 1, y0 + 1};
  s.weight = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
  s.d_du = {-(1 - ty) * scale, (1 - ty) * scale, -ty * scale, ty * scale};
  s.d_dv = {-(1 - tx) * scale, -tx * scale, (1 - tx) * scale, tx * scale};
  for (int c = 0; c < 4; ++c) {
    if (xs[c] >= 0 && xs[c] < res && ys[c] >= 0 && ys[c] < res) s.cell[c] = ys[c] * res + xs[c];
  }
  return s;
}

}  // namespace

std::vector<double> sample_bilinear(const FeatureGrid& grid, double u, double v) {
  std::vector<double> out(grid.channels, 0.0);
  const Stencil s = make_stencil(u, v, 1.0, grid.resolution);
  for (int c = 0; c < 4; ++c) {
    if (s.cell[c] < 0) continue;
    const double* row = grid.values.data() + static_cast<std::size_t>(s.cell[c]) * grid.channels;
    for (std::size_t j = 0; j < grid.channels; ++j) out[j] += s.weight[c] * row[j];
  }
  return out;
}

ad::Tensor pool_vertex_features(const TriMesh& mesh, const FeaturePyramid& pyramid,
                                const Camera& camera) {
  if (mesh.vertex_count() == 0) throw ContractViolation("pool_vertex_features: empty mesh");
  std::size_t width = 3;
  for (const auto& g : pyramid.levels) width += g.channels;
  ad::Tensor out = ad::Tensor::matrix(mesh.vertex_count(), width);
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    const Vec3& p = mesh.vertices()[i];
    const Projection proj = project(p, camera);
    std::size_t offset = 0;
    for (const auto& grid : pyramid.levels) {
      if (proj.valid) {
        const auto sample = sample_bilinear(grid, proj.u, proj.v);
        std::copy(sample.begin(), sample.end(), out.data() + i * width + offset);
      }
      offset += grid.channels;
    }
    for (int c = 0; c < 3; ++c) out.at(i, offset + c) = p[c];
  }
  return out;
}

ad::Var project_points(ad::Var positions, const Camera& camera) {
  if (positions.value().rank() != 2 || positions.cols() != 3) {
    throw ContractViolation("project_points: expected (n, 3) positions, got " +
                            ad::shape_string(positions.shape()));
  }
  const std::size_t n = positions.rows();
  ad::Tensor out = ad::Tensor::matrix(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p{positions.value().at(i, 0), positions.value().at(i, 1), positions.value().at(i, 2)};
    const Vec3 c = camera.to_camera(p);
    const Projection proj = project(p, camera);
    out.at(i, 0) = proj.valid ? proj.u : 0.0;
    out.at(i, 1) = proj.valid ? proj.v : 0.0;
    out.at(i, 2) = c[2];
  }
  const std::size_t pid = positions.id();
  return positions.tape().record(std::move(out), {positions}, [pid, camera, n](ad::Tape& t, std::size_t self) {
    if (!t.requires_grad(pid)) return;
    const ad::Tensor& g = t.grad(self);
    const ad::Tensor& pos = t.value(pid);
    ad::Tensor& dp = t.grad_buffer(pid);
    const auto& e = camera.extrinsic;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 c = camera.to_camera({pos.at(i, 0), pos.at(i, 1), pos.at(i, 2)});
      Vec3 dc{0.0, 0.0, g.at(i, 2)};
      if (c[2] > 0.0) {
        const double inv = 1.0 / c[2];
        dc[0] += g.at(i, 0) * camera.focal * inv;
        dc[1] += g.at(i, 1) * camera.focal * inv;
        dc[2] -= (g.at(i, 0) * camera.focal * c[0] + g.at(i, 1) * camera.focal * c[1]) * inv * inv;
      }
      for (int k = 0; k < 3; ++k) dp.at(i, k) += e[k] * dc[0] + e[4 + k] * dc[1] + e[8 + k] * dc[2];
    }
  });
}

ad::Var bilinear_sample(ad::Var grid, ad::Var uvz, std::size_t resolution) {
  if (grid.value().rank() != 2 || grid.rows() != resolution * resolution) {
    throw ContractViolation("bilinear_sample: grid of shape " + ad::shape_string(grid.shape()) +
                            " does not match resolution " + std::to_string(resolution));
  }
  if (uvz.value().rank() != 2 || uvz.cols() != 3) {
    throw ContractViolation("bilinear_sample: expected (n, 3) image coordinates, got " +
                            ad::shape_string(uvz.shape()));
  }
  const std::size_t n = uvz.rows(), channels = grid.cols();
  std::vector<Stencil> stencils(n);
  ad::Tensor out = ad::Tensor::matrix(n, channels);
  for (std::size_t i = 0; i < n; ++i) {
    stencils[i] = make_stencil(uvz.value().at(i, 0), uvz.value().at(i, 1), uvz.value().at(i, 2), resolution);
    const Stencil& s = stencils[i];
    double* dst = out.data() + i * channels;
    for (int c = 0; c < 4; ++c) {
      if (s.cell[c] < 0) continue;
      const double* row = grid.value().data() + static_cast<std::size_t>(s.cell[c]) * channels;
      for (std::size_t j = 0; j < channels; ++j) dst[j] += s.weight[c] * row[j];
    }
  }
  const std::size_t gid = grid.id(), cid = uvz.id();
  return grid.tape().record(
      std::move(out), {grid, uvz},
      [gid, cid, channels, stencils = std::move(stencils)](ad::Tape& t, std::size_t self) {
        const ad::Tensor& g = t.grad(self);
        const bool want_grid = t.requires_grad(gid), want_coords = t.requires_grad(cid);
        const ad::Tensor& gv = t.value(gid);
        for (std::size_t i = 0; i < stencils.size(); ++i) {
          const Stencil& s = stencils[i];
          const double* gi = g.data() + i * channels;
          double du = 0.0, dv = 0.0;
          for (int c = 0; c < 4; ++c) {
            if (s.cell[c] < 0) continue;
            const auto cell = static_cast<std::size_t>(s.cell[c]);
            if (want_grid) {
              double* dst = t.grad_buffer(gid).data() + cell * channels;
              for (std::size_t j = 0; j < channels; ++j) dst[j] += s.weight[c] * gi[j];
            }
            if (want_coords) {
              const double* row = gv.data() + cell * channels;
              double dot = 0.0;
              for (std::size_t j = 0; j < channels; ++j) dot += gi[j] * row[j];
              du += s.d_du[c] * dot;
              dv += s.d_dv[c] * dot;
            }
          }
          if (want_coords && s.in_frame) {
            ad::Tensor& dc = t.grad_buffer(cid);
            dc.at(i, 0) += du;
            dc.at(i, 1) += dv;
          }
        }
      });
}

}  // namespace tp2m
