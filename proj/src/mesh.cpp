#include "tp2m/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <queue>
#include <sstream>
#include <string>

#include "tp2m/error.hpp"

namespace tp2m {

std::shared_ptr<const MeshTopology> build_topology(std::size_t vertex_count,
                                                   std::vector<Face> faces) {
  auto topo = std::make_shared<MeshTopology>();
  topo->vertex_count = vertex_count;
  topo->edges.reserve(faces.size() * 3);
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const Face& face = faces[f];
    for (std::uint32_t v : face) {
      if (v >= vertex_count) {
        throw ContractViolation("face " + std::to_string(f) + " references vertex " +
                                std::to_string(v) + " but mesh has " +
                                std::to_string(vertex_count));
      }
    }
    if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]) {
      throw ContractViolation("face " + std::to_string(f) + " is degenerate");
    }
    for (int k = 0; k < 3; ++k) {
      std::uint32_t a = face[k], b = face[(k + 1) % 3];
      topo->edges.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  std::sort(topo->edges.begin(), topo->edges.end());
  topo->edges.erase(std::unique(topo->edges.begin(), topo->edges.end()), topo->edges.end());

  std::vector<std::size_t> degree(vertex_count, 0);
  for (const auto& [a, b] : topo->edges) {
    ++degree[a];
    ++degree[b];
  }
  topo->offsets.assign(vertex_count + 1, 0);
  for (std::size_t i = 0; i < vertex_count; ++i) topo->offsets[i + 1] = topo->offsets[i] + degree[i];
  topo->adjacency.resize(topo->offsets.back());
  std::vector<std::size_t> cursor(topo->offsets.begin(), topo->offsets.end() - 1);
  for (const auto& [a, b] : topo->edges) {
    topo->adjacency[cursor[a]++] = b;
    topo->adjacency[cursor[b]++] = a;
  }
  for (std::size_t i = 0; i < vertex_count; ++i) {
    std::sort(topo->adjacency.begin() + static_cast<std::ptrdiff_t>(topo->offsets[i]),
              topo->adjacency.begin() + static_cast<std::ptrdiff_t>(topo->offsets[i + 1]));
  }
  topo->faces = std::move(faces);
  return topo;
}

TriMesh::TriMesh(std::vector<Vec3> vertices, std::vector<Face> faces)
    : vertices_(std::move(vertices)),
      topology_(build_topology(vertices_.size(), std::move(faces))) {}

TriMesh TriMesh::with_vertices(std::vector<Vec3> vertices) const {
  if (vertices.size() != vertices_.size()) {
    throw ContractViolation("with_vertices: got " + std::to_string(vertices.size()) +
                            " positions for a mesh of " + std::to_string(vertices_.size()));
  }
  TriMesh out;
  out.vertices_ = std::move(vertices);
  out.topology_ = topology_;
  return out;
}

std::span<const std::uint32_t> TriMesh::neighbors(std::size_t vertex) const {
  const auto& t = *topology_;
  return std::span<const std::uint32_t>(t.adjacency.data() + t.offsets[vertex],
                                        t.offsets[vertex + 1] - t.offsets[vertex]);
}

long TriMesh::euler_characteristic() const {
  return static_cast<long>(vertex_count()) - static_cast<long>(edge_count()) +
         static_cast<long>(face_count());
}

bool TriMesh::is_closed_manifold() const {
  std::vector<Edge> directed;
  directed.reserve(face_count() * 3);
  for (const Face& f : faces()) {
    for (int k = 0; k < 3; ++k) {
      const std::uint32_t a = f[k], b = f[(k + 1) % 3];
      directed.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  std::sort(directed.begin(), directed.end());
  for (std::size_t i = 0; i < directed.size();) {
    std::size_t j = i;
    while (j < directed.size() && directed[j] == directed[i]) ++j;
    if (j - i != 2) return false;
    i = j;
  }
  return !directed.empty();
}

ad::Tensor TriMesh::positions() const {
  ad::Tensor t = ad::Tensor::matrix(vertices_.size(), 3);
  for (std::size_t i = 0; i < vertices_.size(); ++i) {
    for (int c = 0; c < 3; ++c) t.at(i, c) = vertices_[i][c];
  }
  return t;
}

TriMesh make_ellipsoid_template(const EllipsoidConfig& config) {
  const std::size_t rings = config.rings, segments = config.segments;
  if (rings < 1 || segments < 3 || rings * segments + 2 != kTemplateVertexCount) {
    throw ConfigError("ellipsoid with " + std::to_string(rings) + " rings and " +
                      std::to_string(segments) + " segments has " +
                      std::to_string(rings * segments + 2) + " vertices, need " +
                      std::to_string(kTemplateVertexCount));
  }
  for (double r : config.radii) {
    if (!(r > 0.0)) throw ConfigError("ellipsoid radii must be positive");
  }
  std::vector<Vec3> v;
  v.reserve(rings * segments + 2);
  const auto& [rx, ry, rz] = config.radii;
  v.push_back({0.0, 0.0, rz});
  for (std::size_t r = 0; r < rings; ++r) {
    const double theta = std::numbers::pi * static_cast<double>(r + 1) / static_cast<double>(rings + 1);
    for (std::size_t s = 0; s < segments; ++s) {
      const double phi = 2.0 * std::numbers::pi * static_cast<double>(s) / static_cast<double>(segments);
      v.push_back({rx * std::sin(theta) * std::cos(phi), ry * std::sin(theta) * std::sin(phi),
                   rz * std::cos(theta)});
    }
  }
  v.push_back({0.0, 0.0, -rz});
  const auto south = static_cast<std::uint32_t>(v.size() - 1);
  auto ring_vertex = [segments](std::size_t r, std::size_t s) {
    return static_cast<std::uint32_t>(1 + r * segments + s % segments);
  };

  // Counter-clockwise seen from outside.
  std::vector<Face> f;
  for (std::size_t s = 0; s < segments; ++s) f.push_back({0, ring_vertex(0, s), ring_vertex(0, s + 1)});
  for (std::size_t r = 0; r + 1 < rings; ++r) {
    for (std::size_t s = 0; s < segments; ++s) {
      const auto a = ring_vertex(r, s), b = ring_vertex(r, s + 1);
      const auto c = ring_vertex(r + 1, s), d = ring_vertex(r + 1, s + 1);
      f.push_back({a, c, d});
      f.push_back({a, d, b});
    }
  }
  for (std::size_t s = 0; s < segments; ++s) {
    f.push_back({south, ring_vertex(rings - 1, s + 1), ring_vertex(rings - 1, s)});
  }
  return TriMesh(std::move(v), std::move(f));
}

TriMesh unpool(const TriMesh& mesh) {
  const auto& edges = mesh.edges();
  const std::size_t n = mesh.vertex_count();
  std::vector<Vec3> v = mesh.vertices();
  v.reserve(n + edges.size());
  for (const auto& [a, b] : edges) {
    const Vec3& p = mesh.vertices()[a];
    const Vec3& q = mesh.vertices()[b];
    v.push_back({0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1]), 0.5 * (p[2] + q[2])});
  }
  auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
    const Edge key{std::min(a, b), std::max(a, b)};
    auto it = std::lower_bound(edges.begin(), edges.end(), key);
    return static_cast<std::uint32_t>(n + static_cast<std::size_t>(it - edges.begin()));
  };
  std::vector<Face> f;
  f.reserve(mesh.face_count() * 4);
  for (const Face& face : mesh.faces()) {
    const auto [a, b, c] = face;
    const auto ab = midpoint(a, b), bc = midpoint(b, c), ca = midpoint(c, a);
    f.push_back({a, ab, ca});
    f.push_back({b, bc, ab});
    f.push_back({c, ca, bc});
    f.push_back({ab, bc, ca});
  }
  return TriMesh(std::move(v), std::move(f));
}

UnpoolResult unpool(const TriMesh& mesh, const ad::Tensor& vertex_features) {
  if (vertex_features.rank() != 2 || vertex_features.rows() != mesh.vertex_count()) {
    throw ContractViolation("unpool: features of shape " +
                            ad::shape_string(vertex_features.shape()) + " for " +
                            std::to_string(mesh.vertex_count()) + " vertices");
  }
  UnpoolResult out{unpool(mesh), {}, mesh.edges()};
  const std::size_t n = mesh.vertex_count(), d = vertex_features.cols();
  out.features = ad::Tensor::matrix(n + mesh.edge_count(), d);
  std::copy_n(vertex_features.data(), n * d, out.features.data());
  for (std::size_t e = 0; e < mesh.edge_count(); ++e) {
    const auto [a, b] = mesh.edges()[e];
    for (std::size_t j = 0; j < d; ++j) {
      out.features.at(n + e, j) = 0.5 * (vertex_features.at(a, j) + vertex_features.at(b, j));
    }
  }
  return out;
}

double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// ---- kd-tree ---------------------------------------------------------------

namespace {
constexpr std::uint32_t kLeafSize = 12;

using Candidate = std::pair<double, std::uint32_t>;  // (squared distance, index)
}  // namespace

KdTree::KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  if (!points_.empty()) build(0, static_cast<std::uint32_t>(points_.size()), 0);
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end, int depth) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= kLeafSize) return id;

  Vec3 lo = points_[order_[begin]], hi = lo;
  for (std::uint32_t i = begin; i < end; ++i) {
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], points_[order_[i]][c]);
      hi[c] = std::max(hi[c], points_[order_[i]][c]);
    }
  }
  std::uint8_t axis = 0;
  for (std::uint8_t c = 1; c < 3; ++c) {
    if (hi[c] - lo[c] > hi[axis] - lo[axis]) axis = c;
  }
  (void)depth;
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     return points_[a][axis] < points_[b][axis] ||
                            (points_[a][axis] == points_[b][axis] && a < b);
                   });
  const double split = points_[order_[mid]][axis];
  const std::int32_t left = build(begin, mid, depth + 1);
  const std::int32_t right = build(mid, end, depth + 1);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

std::vector<std::uint32_t> KdTree::nearest(const Vec3& query, std::size_t k,
                                           std::size_t exclude) const {
  std::priority_queue<Candidate> best;  // max-heap on (distance, index)
  if (k == 0 || nodes_.empty()) return {};

  // Left subtree holds coordinates <= split, right holds >= split.
  auto visit = [&](auto&& self, std::int32_t id) -> void {
    const Node& node = nodes_[id];
    if (node.left < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::uint32_t p = order_[i];
        if (p == exclude) continue;
        const Candidate c{squared_distance(query, points_[p]), p};
        if (best.size() < k) {
          best.push(c);
        } else if (c < best.top()) {
          best.pop();
          best.push(c);
        }
      }
      return;
    }
    const double diff = query[node.axis] - node.split;
    const std::int32_t first = diff <= 0.0 ? node.left : node.right;
    const std::int32_t second = diff <= 0.0 ? node.right : node.left;
    self(self, first);
    // Equal distances must still be visited: a tie may carry a smaller index.
    if (best.size() < k || diff * diff <= best.top().first) self(self, second);
  };
  visit(visit, 0);

  std::vector<std::uint32_t> out(best.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = best.top().second;
    best.pop();
  }
  return out;
}

std::uint32_t KdTree::nearest_one(const Vec3& query) const {
  const auto r = nearest(query, 1, points_.size());
  if (r.empty()) throw ContractViolation("nearest_one on an empty tree");
  return r[0];
}

std::vector<std::vector<std::uint32_t>> knn_indices(std::span<const Vec3> points, std::size_t k) {
  if (k >= points.size()) {
    throw ContractViolation("knn_indices: k=" + std::to_string(k) + " needs more than " +
                            std::to_string(points.size()) + " points");
  }
  const KdTree tree(points);
  std::vector<std::vector<std::uint32_t>> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = tree.nearest(points[i], k, i);
  return out;
}

std::vector<std::vector<std::uint32_t>> knn_indices_brute_force(std::span<const Vec3> points,
                                                                std::size_t k) {
  if (k >= points.size()) {
    throw ContractViolation("knn_indices: k=" + std::to_string(k) + " needs more than " +
                            std::to_string(points.size()) + " points");
  }
  std::vector<std::vector<std::uint32_t>> out(points.size());
  std::vector<Candidate> all;
  for (std::size_t i = 0; i < points.size(); ++i) {
    all.clear();
    for (std::size_t j = 0; j < points.size(); ++j) {
      if (j != i) all.emplace_back(squared_distance(points[i], points[j]), static_cast<std::uint32_t>(j));
    }
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
    for (std::size_t m = 0; m < k; ++m) out[i].push_back(all[m].second);
  }
  return out;
}

std::vector<Vec3> laplacian_coords(const TriMesh& mesh) {
  std::vector<Vec3> delta(mesh.vertex_count());
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    const auto nb = mesh.neighbors(i);
    if (nb.empty()) {
      throw ContractViolation("laplacian_coords: vertex " + std::to_string(i) + " is isolated");
    }
    Vec3 mean{0.0, 0.0, 0.0};
    for (std::uint32_t j : nb) {
      for (int c = 0; c < 3; ++c) mean[c] += mesh.vertices()[j][c];
    }
    for (int c = 0; c < 3; ++c) {
      delta[i][c] = mesh.vertices()[i][c] - mean[c] / static_cast<double>(nb.size());
    }
  }
  return delta;
}

// ---- OBJ -------------------------------------------------------------------

TriMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mesh file " + path.string());
  std::vector<Vec3> v;
  std::vector<Face> f;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ss >> p[0] >> p[1] >> p[2])) {
        throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": malformed vertex");
      }
      v.push_back(p);
    } else if (tag == "f") {
      Face face;
      for (auto& idx : face) {
        std::string token;
        if (!(ss >> token)) {
          throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": face needs 3 indices");
        }
        long value = 0;
        try {
          value = std::stol(token.substr(0, token.find('/')));
        } catch (const std::exception&) {
          throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": bad index '" + token + "'");
        }
        if (value < 1) {
          throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": index must be 1-based");
        }
        idx = static_cast<std::uint32_t>(value - 1);
      }
      std::string extra;
      if (ss >> extra) {
        throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": only triangles are supported");
      }
      f.push_back(face);
    }
  }
  try {
    return TriMesh(std::move(v), std::move(f));
  } catch (const ContractViolation& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_obj(const TriMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write mesh file " + path.string());
  out << std::fixed << std::setprecision(6);
  for (const Vec3& p : mesh.vertices()) out << "v " << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
  for (const Face& f : mesh.faces()) {
    out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace tp2m
