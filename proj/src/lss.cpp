#include "tp2m/lss.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "tp2m/error.hpp"

namespace tp2m {

namespace {

struct BoundingBox {
  std::size_t x0, y0, x1, y1;  // inclusive
};

BoundingBox mask_bounds(const Mask& mask) {
  BoundingBox box{mask.width, mask.height, 0, 0};
  bool any = false;
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      any = true;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x);
      box.y1 = std::max(box.y1, y);
    }
  }
  if (!any) throw ContractViolation("crop_and_pad: mask is empty");
  return box;
}

// Mean color of the outermost pixel ring. Columns are summed in mirrored
// pairs so a horizontally flipped image yields the identical value.
std::vector<double> border_color(const Image& image) {
  const std::size_t w = image.width, h = image.height, ch = image.channels;
  std::vector<double> total(ch, 0.0);
  std::size_t count = 0;
  auto add_row = [&](std::size_t y) {
    for (std::size_t x = 0; x < w / 2; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        total[c] += static_cast<double>(image.at(x, y, c)) + static_cast<double>(image.at(w - 1 - x, y, c));
      }
      count += 2;
    }
    if (w % 2 == 1) {
      for (std::size_t c = 0; c < ch; ++c) total[c] += image.at(w / 2, y, c);
      ++count;
    }
  };
  add_row(0);
  if (h > 1) add_row(h - 1);
  if (w > 1) {
    for (std::size_t y = 1; y + 1 < h; ++y) {
      for (std::size_t c = 0; c < ch; ++c) {
        total[c] += static_cast<double>(image.at(0, y, c)) + static_cast<double>(image.at(w - 1, y, c));
      }
      count += 2;
    }
  }
  for (double& t : total) t /= static_cast<double>(count);
  return total;
}

// Linear interpolation taps along one axis. Positions are measured from the
// box center so that mirrored inputs produce mirrored taps with identical
// weights.
struct AxisTap {
  long near, far;
  double t;  // weight of `far`
};

AxisTap axis_tap(long twice_center, std::size_t out_index, double padded_side) {
  constexpr auto n = static_cast<long>(kInputSize);
  const long numerator = 2 * static_cast<long>(out_index) + 1 - n;
  const double offset = static_cast<double>(numerator) * padded_side / static_cast<double>(2 * n);
  const long base = twice_center / 2;
  const double g = (twice_center % 2 == 1 ? 0.5 : 0.0) + std::fabs(offset);
  const double fi = std::floor(g);
  const auto i = static_cast<long>(fi);
  const double t = g - fi;
  if (offset >= 0.0) return {base + i, base + i + 1, t};
  return {twice_center - base - i, twice_center - base - i - 1, t};
}

}  // namespace

CropResult crop_and_pad(const Image& image, const Mask& mask, double s) {
  if (mask.width != image.width || mask.height != image.height) {
    throw ContractViolation("crop_and_pad: mask is " + std::to_string(mask.width) + "x" +
                            std::to_string(mask.height) + " but image is " +
                            std::to_string(image.width) + "x" + std::to_string(image.height));
  }
  if (!(s >= 0.0) || !std::isfinite(s)) {
    throw ContractViolation("crop_and_pad: scale coefficient must be finite and non-negative");
  }
  const BoundingBox box = mask_bounds(mask);
  if (box.x0 == 0 && box.y0 == 0 && box.x1 + 1 == mask.width && box.y1 + 1 == mask.height) {
    std::cerr << "warning: mask bounding box touches every image border; the object may be truncated\n";
  }
  CropResult out;
  out.side = std::max(box.x1 - box.x0 + 1, box.y1 - box.y0 + 1);
  out.border = static_cast<std::size_t>(std::lround(s * static_cast<double>(out.side)));
  out.padded_side = out.side + 2 * out.border;

  const std::vector<double> fill = border_color(image);
  const std::size_t ch = image.channels;
  const long cx2 = static_cast<long>(box.x0 + box.x1), cy2 = static_cast<long>(box.y0 + box.y1);
  const auto padded = static_cast<double>(out.padded_side);

  std::vector<AxisTap> xs(kInputSize), ys(kInputSize);
  for (std::size_t j = 0; j < kInputSize; ++j) {
    xs[j] = axis_tap(cx2, j, padded);
    ys[j] = axis_tap(cy2, j, padded);
  }
  auto inside = [&](long x, long y) {
    return x >= static_cast<long>(box.x0) && x <= static_cast<long>(box.x1) &&
           y >= static_cast<long>(box.y0) && y <= static_cast<long>(box.y1);
  };

  out.image = Image::filled(kInputSize, kInputSize, ch, 0.0f);
  out.mask = Mask{kInputSize, kInputSize, std::vector<std::uint8_t>(kInputSize * kInputSize, 0)};
  std::vector<double> corner(4);
  for (std::size_t oy = 0; oy < kInputSize; ++oy) {
    const AxisTap& ty = ys[oy];
    for (std::size_t ox = 0; ox < kInputSize; ++ox) {
      const AxisTap& tx = xs[ox];
      const long cx[4] = {tx.near, tx.far, tx.near, tx.far};
      const long cy[4] = {ty.near, ty.near, ty.far, ty.far};
      bool in[4];
      for (int k = 0; k < 4; ++k) in[k] = inside(cx[k], cy[k]);
      for (std::size_t c = 0; c < ch; ++c) {
        for (int k = 0; k < 4; ++k) {
          corner[k] = in[k] ? static_cast<double>(image.at(static_cast<std::size_t>(cx[k]),
                                                           static_cast<std::size_t>(cy[k]), c))
                            : fill[c];
        }
        const double top = (1.0 - tx.t) * corner[0] + tx.t * corner[1];
        const double bottom = (1.0 - tx.t) * corner[2] + tx.t * corner[3];
        out.image.at(ox, oy, c) = static_cast<float>((1.0 - ty.t) * top + ty.t * bottom);
      }
      for (int k = 0; k < 4; ++k) {
        corner[k] = in[k] && mask.at(static_cast<std::size_t>(cx[k]), static_cast<std::size_t>(cy[k])) ? 1.0 : 0.0;
      }
      const double top = (1.0 - tx.t) * corner[0] + tx.t * corner[1];
      const double bottom = (1.0 - tx.t) * corner[2] + tx.t * corner[3];
      out.mask.bits[oy * kInputSize + ox] = (1.0 - ty.t) * top + ty.t * bottom >= 0.5 ? 1 : 0;
    }
  }
  return out;
}

Mask rasterize_silhouette(const TriMesh& mesh, const Camera& camera) {
  return rasterize_silhouette(mesh, camera, kInputSize, kInputSize);
}

Mask rasterize_silhouette(const TriMesh& mesh, const Camera& camera, std::size_t width,
                          std::size_t height) {
  Mask out{width, height, std::vector<std::uint8_t>(width * height, 0)};
  std::vector<Projection> proj(mesh.vertex_count());
  for (std::size_t i = 0; i < proj.size(); ++i) proj[i] = project(mesh.vertices()[i], camera);
  for (const Face& f : mesh.faces()) {
    const Projection& a = proj[f[0]];
    const Projection& b = proj[f[1]];
    const Projection& c = proj[f[2]];
    if (!a.valid || !b.valid || !c.valid) continue;
    const std::array<std::pair<double, double>, 3> tri{{{a.u, a.v}, {b.u, b.v}, {c.u, c.v}}};
    const double vmin = std::min({a.v, b.v, c.v}), vmax = std::max({a.v, b.v, c.v});
    const long row_begin = std::max(0L, static_cast<long>(std::ceil(vmin - 0.5)));
    const long row_end = std::min(static_cast<long>(height) - 1, static_cast<long>(std::floor(vmax - 0.5)));
    for (long row = row_begin; row <= row_end; ++row) {
      const double yc = static_cast<double>(row) + 0.5;
      double xl = std::numeric_limits<double>::infinity(), xr = -xl;
      for (int e = 0; e < 3; ++e) {
        const auto& [pu, pv] = tri[e];
        const auto& [qu, qv] = tri[(e + 1) % 3];
        if ((pv <= yc && yc <= qv) || (qv <= yc && yc <= pv)) {
          const double x = pv == qv ? pu : pu + (yc - pv) * (qu - pu) / (qv - pv);
          xl = std::min(xl, pv == qv ? std::min(pu, qu) : x);
          xr = std::max(xr, pv == qv ? std::max(pu, qu) : x);
        }
      }
      if (xl > xr) continue;
      const long col_begin = std::max(0L, static_cast<long>(std::ceil(xl - 0.5)));
      const long col_end = std::min(static_cast<long>(width) - 1, static_cast<long>(std::floor(xr - 0.5)));
      for (long col = col_begin; col <= col_end; ++col) {
        out.bits[static_cast<std::size_t>(row) * width + static_cast<std::size_t>(col)] = 1;
      }
    }
  }
  return out;
}

double mask_iou(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) {
    throw ContractViolation("mask_iou: masks differ in size");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double quality_score(const TriMesh& mesh, const Mask& mask, const Camera& camera) {
  if (mesh.vertex_count() == 0) throw ContractViolation("quality_score: empty mesh");
  if (mask.width != kInputSize || mask.height != kInputSize) {
    throw ContractViolation("quality_score: mask must be 224x224");
  }
  const Mask silhouette = rasterize_silhouette(mesh, camera);
  if (silhouette.count() == 0) return 0.0;
  return mask_iou(silhouette, mask);
}

std::vector<double> default_scale_grid() { return {0.20, 0.25, 0.30, 0.35, 0.40}; }

std::vector<double> parse_scale_grid(const std::string& text, bool allow_wide) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad scale value '" + item + "' in grid");
    }
    if (item.find_first_not_of(" \t", used) != std::string::npos) {
      throw ConfigError("bad scale value '" + item + "' in grid");
    }
    grid.push_back(v);
  }
  RunConfig probe;
  probe.grid = grid;
  probe.allow_wide_grid = allow_wide;
  probe.validate();
  return grid;
}

void RunConfig::validate() const {
  if (grid.empty()) throw ConfigError("scale grid is empty");
  for (double s : grid) {
    if (!std::isfinite(s) || s < 0.0) throw ConfigError("scale values must be finite and non-negative");
    if (!allow_wide_grid && (s < kScaleMin || s > kScaleMax)) {
      std::ostringstream msg;
      msg << "scale " << s << " outside [0.2, 0.4]; pass the wide-grid override to allow it";
      throw ConfigError(msg.str());
    }
  }
  if (width == 0 || width % 4 != 0) throw ConfigError("width must be a positive multiple of 4");
}

LssResult linear_scale_search(const Image& image, const Mask& mask, const Camera& camera,
                              TdmModel& model, std::span<const double> grid, std::uint64_t seed,
                              const Scorer& scorer) {
  if (grid.empty()) throw ContractViolation("linear_scale_search: empty grid");
  LssResult result;
  std::optional<std::size_t> best;
  for (double s : grid) {
    LssCandidate cand;
    cand.s = s;
    try {
      const CropResult crop = crop_and_pad(image, mask, s);
      cand.border = crop.border;
      cand.side = crop.side;
      const auto meshes = tdm_forward(crop.image, camera, model, seed);
      cand.score = scorer(meshes.back(), crop.mask, camera);
      cand.ok = true;
      const bool better = !best || cand.score > result.table[*best].score ||
                          (cand.score == result.table[*best].score && s < result.table[*best].s);
      if (better) {
        best = result.table.size();
        result.best_mesh = meshes.back();
      }
    } catch (const Error& e) {
      cand.error = e.what();
    }
    result.table.push_back(cand);
  }
  if (!best) {
    std::ostringstream msg;
    msg << "every scale candidate failed:";
    for (const auto& c : result.table) msg << "\n  s=" << c.s << ": " << c.error;
    throw NumericalError(msg.str());
  }
  result.best = *best;
  return result;
}

void write_lss_report(const LssResult& result, const RunConfig& config, const std::filesystem::path& path) {
  nlohmann::json report;
  report["chosen_s"] = result.chosen().s;
  report["chosen_score"] = result.chosen().score;
  report["seed"] = config.seed;
  report["width"] = config.width;
  report["score"] = "silhouette IoU against the cropped input mask";
  auto& rows = report["candidates"] = nlohmann::json::array();
  for (const auto& c : result.table) {
    nlohmann::json row{{"s", c.s}, {"p", c.border}, {"h", c.side}, {"score", c.score}, {"ok", c.ok}};
    if (!c.ok) row["error"] = c.error;
    rows.push_back(row);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report " + path.string());
  out << report.dump(2) << '\n';
}

}  // namespace tp2m
