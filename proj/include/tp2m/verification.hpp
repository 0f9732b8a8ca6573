#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tp2m/attention.hpp"
#include "tp2m/autodiff.hpp"
#include "tp2m/mesh.hpp"

namespace tp2m {

inline constexpr double kGradcheckTolerance = 1e-4;

// Regular octahedron with vertices at distance `radius` on the axes.
TriMesh make_octahedron(double radius = 0.5);

// Adds uniform noise in [-amplitude, amplitude] to every parameter value so
// that zero-initialized layers carry gradient.
void perturb_parameters(ad::ParameterSet& params, Rng& rng, double amplitude = 0.5);

struct GradcheckEntry {
  std::string block;
  ad::GradcheckResult result;
  double seconds = 0.0;

  bool passed() const { return result.max_rel_error < kGradcheckTolerance; }
};

// Central-difference checks for every block type, the pooling chain and the
// five losses at the given width (a multiple of 4, at most 32).
std::vector<GradcheckEntry> run_gradient_suite(std::size_t width, std::uint64_t seed);

}  // namespace tp2m
