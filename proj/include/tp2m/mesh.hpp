#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "tp2m/tensor.hpp"

namespace tp2m {

using Vec3 = std::array<double, 3>;
using Face = std::array<std::uint32_t, 3>;
using Edge = std::pair<std::uint32_t, std::uint32_t>;

// Connectivity shared by every mesh with the same faces.
struct MeshTopology {
  std::size_t vertex_count = 0;
  std::vector<Face> faces;
  // Unique undirected edges (a < b), sorted lexicographically.
  std::vector<Edge> edges;
  // CSR adjacency: neighbors of i are adjacency[offsets[i] .. offsets[i+1]),
  // in increasing index order.
  std::vector<std::size_t> offsets;
  std::vector<std::uint32_t> adjacency;
};

// Triangle mesh with derived edge and adjacency structure. Topology is
// immutable and shared between meshes produced by with_vertices().
class TriMesh {
 public:
  TriMesh() = default;
  TriMesh(std::vector<Vec3> vertices, std::vector<Face> faces);

  // Same connectivity, new positions.
  TriMesh with_vertices(std::vector<Vec3> vertices) const;

  const std::vector<Vec3>& vertices() const noexcept { return vertices_; }
  const std::vector<Face>& faces() const { return topology_->faces; }
  const std::vector<Edge>& edges() const { return topology_->edges; }
  const MeshTopology& topology() const { return *topology_; }
  std::shared_ptr<const MeshTopology> shared_topology() const { return topology_; }

  std::size_t vertex_count() const noexcept { return vertices_.size(); }
  std::size_t face_count() const { return topology_ ? topology_->faces.size() : 0; }
  std::size_t edge_count() const { return topology_ ? topology_->edges.size() : 0; }
  std::span<const std::uint32_t> neighbors(std::size_t vertex) const;

  long euler_characteristic() const;
  // Every edge shared by exactly two faces.
  bool is_closed_manifold() const;

  // Vertices as an (n, 3) tensor.
  ad::Tensor positions() const;

 private:
  std::vector<Vec3> vertices_;
  std::shared_ptr<const MeshTopology> topology_;
};

// Builds connectivity for `faces` over `vertex_count` vertices. Rejects
// out-of-range indices and degenerate faces.
std::shared_ptr<const MeshTopology> build_topology(std::size_t vertex_count,
                                                   std::vector<Face> faces);

struct EllipsoidConfig {
  // Latitude rings strictly between the poles, and longitude segments.
  std::size_t rings = 11;
  std::size_t segments = 14;
  Vec3 radii{0.5, 0.5, 0.25};
};

inline constexpr std::size_t kTemplateVertexCount = 156;

// Closed latitude/longitude ellipsoid with exactly 156 vertices.
TriMesh make_ellipsoid_template(const EllipsoidConfig& config = {});

// Result of one edge-midpoint subdivision step.
struct UnpoolResult {
  TriMesh mesh;
  ad::Tensor features;
  // Endpoints of the edge behind each appended vertex, in append order.
  std::vector<Edge> midpoint_edges;
};

// Adds a vertex at each edge midpoint (appended in sorted-edge order) and
// splits every face into four. New features are endpoint means.
UnpoolResult unpool(const TriMesh& mesh, const ad::Tensor& vertex_features);

// Topology-only variant used by the pipeline.
TriMesh unpool(const TriMesh& mesh);

// k nearest other points per query, self excluded, ties by smaller index.
std::vector<std::vector<std::uint32_t>> knn_indices(std::span<const Vec3> points, std::size_t k);

// Exhaustive O(n^2) reference for knn_indices.
std::vector<std::vector<std::uint32_t>> knn_indices_brute_force(std::span<const Vec3> points,
                                                                std::size_t k);

// Static 3D kd-tree over a fixed point set.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points);

  // k nearest points to `query`, ordered by (squared distance, index).
  // `exclude` skips one index (pass size() to skip nothing).
  std::vector<std::uint32_t> nearest(const Vec3& query, std::size_t k,
                                     std::size_t exclude) const;
  std::uint32_t nearest_one(const Vec3& query) const;
  std::size_t size() const noexcept { return points_.size(); }

 private:
  struct Node {
    std::uint32_t begin, end;
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
    double split = 0.0;
  };
  std::int32_t build(std::uint32_t begin, std::uint32_t end, int depth);

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

double squared_distance(const Vec3& a, const Vec3& b);

// delta_i = p_i - mean of connected neighbors.
std::vector<Vec3> laplacian_coords(const TriMesh& mesh);

// Wavefront OBJ subset: `v x y z` and `f a b c` (1-based).
TriMesh read_obj(const std::filesystem::path& path);
void write_obj(const TriMesh& mesh, const std::filesystem::path& path);

}  // namespace tp2m
