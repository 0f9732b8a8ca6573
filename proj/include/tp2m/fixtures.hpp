#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>

#include "tp2m/mesh.hpp"
#include "tp2m/perception.hpp"
#include "tp2m/pipeline.hpp"

namespace tp2m {

// Smooth seeded 224x224 RGB pattern with values in [0, 1].
Image synthetic_image(std::uint64_t seed);

// Uniform samples on the surface of the axis-aligned cube of side `side`
// centered at the origin, with outward face normals.
PointCloud sample_cube_surface(std::size_t count, std::uint64_t seed, double side = 1.0);

// Area-weighted samples on a triangle mesh with outward face normals.
PointCloud sample_mesh_surface(const TriMesh& mesh, std::size_t count, std::uint64_t seed);

// Input for the scale-search check: a photo-sized image and mask of the
// template ellipsoid, and the camera under which the template silhouette
// spans 224 / (1 + 2 * matching_scale) pixels.
struct LssFixture {
  Image image;
  Mask mask;
  Camera camera;
};

LssFixture make_lss_fixture(const TriMesh& template_mesh, double matching_scale = 0.30);

// Directory holding the bundled template and fixtures.
std::filesystem::path fixture_dir();
std::filesystem::path bundled_template_path();
// Reads the bundled template, checking it has 156 vertices.
TriMesh load_template(const std::filesystem::path& path = bundled_template_path());

// Writes every fixture file into `dir`.
void write_fixtures(const std::filesystem::path& dir, std::uint64_t seed);

}  // namespace tp2m
