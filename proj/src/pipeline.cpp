#include "tp2m/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "tp2m/error.hpp"
#include "tp2m/fixtures.hpp"

namespace tp2m {

using ad::Tensor;
using ad::Var;

namespace {

std::vector<Vec3> to_points(const Tensor& t) {
  std::vector<Vec3> out(t.rows());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
  return out;
}

Tensor to_tensor(std::span<const Vec3> points) {
  Tensor t = Tensor::matrix(points.size(), 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int c = 0; c < 3; ++c) t.at(i, c) = points[i][c];
  }
  return t;
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

}  // namespace

// ---- Point clouds ---------------------------------------------------------------

PointCloud read_point_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open point cloud " + path.string());
  PointCloud cloud;
  std::string line;
  std::size_t line_no = 0, renormalized = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ss(line);
    Vec3 p, n;
    std::string rest;
    if (!(ss >> p[0] >> p[1] >> p[2] >> n[0] >> n[1] >> n[2]) || (ss >> rest)) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected `x y z nx ny nz`");
    }
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    if (!(len > 0.0)) throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": zero normal");
    if (std::fabs(len - 1.0) > 1e-6) {
      ++renormalized;
      for (double& c : n) c /= len;
    }
    cloud.points.push_back(p);
    cloud.normals.push_back(n);
  }
  if (cloud.points.empty()) throw ConfigError("point cloud " + path.string() + " is empty");
  if (renormalized != 0) {
    std::cerr << "warning: normalized " << renormalized << " non-unit normals in " << path.string() << '\n';
  }
  return cloud;
}

void write_point_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(9);
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Vec3& p = cloud.points[i];
    const Vec3& n = cloud.normals[i];
    out << p[0] << ' ' << p[1] << ' ' << p[2] << ' ' << n[0] << ' ' << n[1] << ' ' << n[2] << '\n';
  }
}

// ---- Model --------------------------------------------------------------------

std::vector<TriMesh> TdmTrace::output_meshes() const {
  std::vector<TriMesh> out;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    out.push_back(meshes[s].with_vertices(to_points(outputs[s].value())));
  }
  return out;
}

Var unpool_rows(Var x, const std::vector<Edge>& edges) {
  std::vector<std::size_t> a, b;
  a.reserve(edges.size());
  b.reserve(edges.size());
  for (const auto& [i, j] : edges) {
    a.push_back(i);
    b.push_back(j);
  }
  const Var mid = ad::scale(ad::add(ad::gather_rows(x, std::move(a)), ad::gather_rows(x, std::move(b))), 0.5);
  return ad::concat({x, mid}, 0);
}

TdmModel::TdmModel(const ModelConfig& config, const TriMesh& template_mesh)
    : config_(config),
      global_block_("stage1.global", config.width, config.heads),
      local_block2_("stage2.local", config.width),
      local_block3_("stage3.local", config.width),
      head1_("stage1.head", config.width, config.width),
      head2_("stage2.head", config.width, config.width),
      head3_("stage3.head", config.width, config.width),
      final_head_("final.head", 2 * config.width, config.width) {
  if (template_mesh.vertex_count() != kTemplateVertexCount) {
    throw ContractViolation("template must have " + std::to_string(kTemplateVertexCount) +
                            " vertices, got " + std::to_string(template_mesh.vertex_count()));
  }
  meshes_[0] = template_mesh;
  for (std::size_t s = 1; s < kStageCount; ++s) meshes_[s] = unpool(meshes_[s - 1]);

  Rng rng(config.init_seed);
  constexpr std::array<std::size_t, 4> channels{256, 512, 1024, 2048};
  for (std::size_t l = 0; l < channels.size(); ++l) {
    params_.add("pixel.level" + std::to_string(l),
                uniform_init(channels[l], config.width, kVertexFeatureDims, rng));
  }
  params_.add("pixel.coord", uniform_init(3, config.width, kVertexFeatureDims, rng));
  params_.add("pixel.bias", uniform_init(1, config.width, kVertexFeatureDims, rng));
  params_.add("global.weight", uniform_init(channels[3], config.width, channels[3], rng));
  params_.add("global.bias", uniform_init(1, config.width, channels[3], rng));
  global_block_.init(params_, rng);
  head1_.init(params_, rng);
  local_block2_.init(params_, rng);
  head2_.init(params_, rng);
  local_block3_.init(params_, rng);
  head3_.init(params_, rng);
  final_head_.init(params_, rng);
}

Var TdmModel::pool_tokens(ad::Tape& tape, Var positions, std::span<const Var> projected_grids,
                          const FeaturePyramid& pyramid, const Camera& camera) {
  const Var uvz = project_points(positions, camera);
  Var tokens = ad::linear(positions, tape.parameter(params_.at("pixel.coord")),
                          tape.parameter(params_.at("pixel.bias")));
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    tokens = ad::add(tokens, bilinear_sample(projected_grids[l], uvz, pyramid.levels[l].resolution));
  }
  return tokens;
}

TdmTrace TdmModel::forward(ad::Tape& tape, const FeaturePyramid& pyramid, const Camera& camera) {
  constexpr std::array<std::size_t, 4> channels{256, 512, 1024, 2048};
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const auto& g = pyramid.levels[l];
    if (g.channels != channels[l] || g.values.rows() != g.resolution * g.resolution) {
      throw ContractViolation("feature pyramid level " + std::to_string(l) + " has unexpected shape " +
                              ad::shape_string(g.values.shape()));
    }
  }
  std::array<Var, 4> grids;
  for (std::size_t l = 0; l < grids.size(); ++l) {
    grids[l] = ad::matmul(tape.constant(pyramid.levels[l].values),
                          tape.parameter(params_.at("pixel.level" + std::to_string(l))));
  }

  TdmTrace trace;
  trace.meshes = meshes_;

  // Stage 1: global attention over 156 vertex tokens + 49 global tokens.
  const std::size_t n0 = meshes_[0].vertex_count();
  trace.inputs[0] = tape.constant(meshes_[0].positions());
  const Var vertex_tokens = pool_tokens(tape, trace.inputs[0], grids, pyramid, camera);
  const Var global_tokens = ad::linear(tape.constant(pyramid.global().values),
                                       tape.parameter(params_.at("global.weight")),
                                       tape.parameter(params_.at("global.bias")));
  const Var mixed = global_block_.forward(tape, params_, ad::concat({vertex_tokens, global_tokens}, 0),
                                          meshes_[0].topology());
  Var tokens = ad::gather_rows(mixed, iota_rows(n0));
  trace.outputs[0] = head1_.forward(tape, params_, tokens, trace.inputs[0]);
  check_degenerate(trace.outputs[0].value(), 1);

  // Stages 2 and 3: unpool, re-pool pixel features, local attention.
  const std::array<const LocalTransformerBlock*, 2> blocks{&local_block2_, &local_block3_};
  const std::array<const CoordinateHead*, 2> heads{&head2_, &head3_};
  const std::array<std::size_t, 2> ks{config_.k_stage2, config_.k_stage3};
  for (std::size_t s = 1; s < 3; ++s) {
    const auto& edges = meshes_[s - 1].edges();
    trace.inputs[s] = unpool_rows(trace.outputs[s - 1], edges);
    tokens = ad::add(unpool_rows(tokens, edges), pool_tokens(tape, trace.inputs[s], grids, pyramid, camera));
    const auto points = to_points(trace.inputs[s].value());
    const auto neighbors = knn_indices(points, ks[s - 1]);
    tokens = blocks[s - 1]->forward(tape, params_, tokens, trace.inputs[s], neighbors);
    trace.outputs[s] = heads[s - 1]->forward(tape, params_, tokens, trace.inputs[s]);
    check_degenerate(trace.outputs[s].value(), s + 1);
  }

  // Final upsampling: unpool, then an MLP over last-block tokens and fresh
  // pixel-aligned features.
  const auto& edges = meshes_[2].edges();
  trace.inputs[3] = unpool_rows(trace.outputs[2], edges);
  const Var features = ad::concat(
      {unpool_rows(tokens, edges), pool_tokens(tape, trace.inputs[3], grids, pyramid, camera)}, 1);
  trace.outputs[3] = final_head_.forward(tape, params_, features, trace.inputs[3]);
  check_degenerate(trace.outputs[3].value(), 4);
  return trace;
}

std::vector<TriMesh> tdm_forward(const FeaturePyramid& pyramid, const Camera& camera, TdmModel& model) {
  ad::Tape tape;
  return model.forward(tape, pyramid, camera).output_meshes();
}

std::vector<TriMesh> tdm_forward(const Image& image, const Camera& camera, TdmModel& model,
                                 std::uint64_t seed) {
  return tdm_forward(synth_backbone(image, seed), camera, model);
}

void check_degenerate(const Tensor& positions, std::size_t stage) {
  if (positions.rows() == 0) return;
  double extent = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < positions.rows(); ++i) {
      lo = std::min(lo, positions.at(i, c));
      hi = std::max(hi, positions.at(i, c));
    }
    extent = std::max(extent, hi - lo);
  }
  if (!(extent >= 1e-6)) {
    std::ostringstream msg;
    msg << "stage " << stage << " output collapsed: bounding box extent " << extent << " < 1e-6";
    throw NumericalError(msg.str());
  }
}

// ---- Losses -------------------------------------------------------------------

double LossReport::recompute_total() const {
  return weights.chamfer * chamfer + weights.smooth * smooth + weights.laplacian * laplacian +
         weights.point_move * point_move + weights.edge * edge;
}

LossReport LossVars::report(const LossWeights& weights) const {
  LossReport r;
  r.chamfer = chamfer.value().item();
  r.smooth = smooth.value().item();
  r.laplacian = laplacian.value().item();
  r.point_move = point_move.value().item();
  r.edge = edge.value().item();
  r.weights = weights;
  r.total = total.value().item();
  return r;
}

TargetIndex::TargetIndex(PointCloud cloud) : cloud_(std::move(cloud)), tree_(cloud_.points) {
  if (cloud_.points.empty()) throw ContractViolation("target point cloud is empty");
  if (cloud_.normals.size() != cloud_.points.size()) {
    throw ContractViolation("target needs one normal per point");
  }
  std::size_t fixed = 0;
  for (Vec3& n : cloud_.normals) {
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    if (!(len > 0.0)) throw ContractViolation("target has a zero normal");
    if (std::fabs(len - 1.0) > 1e-6) {
      for (double& c : n) c /= len;
      ++fixed;
    }
  }
  if (fixed != 0) std::cerr << "warning: normalized " << fixed << " non-unit target normals\n";
}

Var chamfer_l1(Var pred, const TargetIndex& target) {
  if (pred.rows() == 0) throw ContractViolation("chamfer_l1: empty prediction");
  ad::Tape& tape = pred.tape();
  const auto& gt = target.cloud().points;
  const auto pts = to_points(pred.value());

  std::vector<Vec3> nearest_gt(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) nearest_gt[i] = gt[target.tree().nearest_one(pts[i])];
  const Var forward = ad::row_norm(ad::sub(pred, tape.constant(to_tensor(nearest_gt))));

  const KdTree pred_tree(pts);
  std::vector<std::size_t> nearest_pred(gt.size());
  for (std::size_t j = 0; j < gt.size(); ++j) nearest_pred[j] = pred_tree.nearest_one(gt[j]);
  const Var reverse = ad::row_norm(ad::sub(ad::gather_rows(pred, std::move(nearest_pred)), tape.constant(to_tensor(gt))));

  return ad::add(ad::scale(ad::sum(forward), 1.0 / static_cast<double>(pts.size())),
                 ad::scale(ad::sum(reverse), 1.0 / static_cast<double>(gt.size())));
}

Var smooth_loss(Var positions, const MeshTopology& topology, const TargetIndex& target) {
  ad::Tape& tape = positions.tape();
  const auto pts = to_points(positions.value());
  std::vector<std::size_t> src, dst;
  Tensor normals = Tensor::matrix(topology.edges.size(), 3);
  for (std::size_t e = 0; e < topology.edges.size(); ++e) {
    const auto [a, b] = topology.edges[e];
    src.push_back(a);
    dst.push_back(b);
    const Vec3& n = target.cloud().normals[target.tree().nearest_one(pts[a])];
    for (int c = 0; c < 3; ++c) normals.at(e, c) = n[c];
  }
  const Var edge_vectors = ad::sub(ad::gather_rows(positions, std::move(dst)), ad::gather_rows(positions, std::move(src)));
  return ad::sum(ad::abs(ad::row_sum(ad::mul(edge_vectors, tape.constant(std::move(normals))))));
}

namespace {

Var laplacian_coords(Var positions, const MeshTopology& topology) {
  const std::size_t n = topology.vertex_count;
  std::vector<std::size_t> source, target;
  Tensor inv_degree = Tensor::matrix(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t deg = topology.offsets[i + 1] - topology.offsets[i];
    if (deg == 0) throw ContractViolation("laplacian: vertex " + std::to_string(i) + " is isolated");
    for (std::size_t e = topology.offsets[i]; e < topology.offsets[i + 1]; ++e) {
      source.push_back(topology.adjacency[e]);
      target.push_back(i);
    }
    for (int c = 0; c < 3; ++c) inv_degree.at(i, c) = 1.0 / static_cast<double>(deg);
  }
  const Var sums = ad::scatter_add_rows(ad::gather_rows(positions, std::move(source)), std::move(target), n);
  return ad::sub(positions, ad::mul(sums, positions.tape().constant(std::move(inv_degree))));
}

void require_pair(const Var& before, const Var& after, const char* what) {
  if (before.shape() != after.shape()) {
    throw ContractViolation(std::string(what) + ": vertex count mismatch " +
                            ad::shape_string(before.shape()) + " vs " + ad::shape_string(after.shape()));
  }
}

}  // namespace

Var laplacian_loss(Var before, Var after, const MeshTopology& topology) {
  require_pair(before, after, "laplacian_loss");
  if (after.rows() != topology.vertex_count) {
    throw ContractViolation("laplacian_loss: positions do not match mesh");
  }
  return ad::sum(ad::row_norm(ad::sub(laplacian_coords(after, topology), laplacian_coords(before, topology))));
}

Var point_move_loss(Var before, Var after) {
  require_pair(before, after, "point_move_loss");
  return ad::sum(ad::row_norm(ad::sub(after, before)));
}

Var edge_loss(Var positions, const MeshTopology& topology) {
  std::vector<std::size_t> a, b;
  for (const auto& [i, j] : topology.edges) {
    a.push_back(i);
    b.push_back(j);
  }
  return ad::sum(ad::row_norm(ad::sub(ad::gather_rows(positions, std::move(b)), ad::gather_rows(positions, std::move(a)))));
}

double chamfer_l1(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  if (pred.empty() || gt.empty()) throw ContractViolation("chamfer_l1: empty point set");
  PointCloud cloud{{gt.begin(), gt.end()}, std::vector<Vec3>(gt.size(), Vec3{0, 0, 1})};
  const TargetIndex target(std::move(cloud));
  ad::Tape tape;
  return chamfer_l1(tape.constant(to_tensor(pred)), target).value().item();
}

double smooth_loss(const TriMesh& mesh, const PointCloud& target) {
  const TargetIndex index(target);
  ad::Tape tape;
  return smooth_loss(tape.constant(mesh.positions()), mesh.topology(), index).value().item();
}

double laplacian_loss(const TriMesh& before, const TriMesh& after) {
  if (before.vertex_count() != after.vertex_count()) {
    throw ContractViolation("laplacian_loss: vertex count mismatch");
  }
  ad::Tape tape;
  return laplacian_loss(tape.constant(before.positions()), tape.constant(after.positions()), after.topology())
      .value()
      .item();
}

double point_move_loss(const TriMesh& before, const TriMesh& after) {
  if (before.vertex_count() != after.vertex_count()) {
    throw ContractViolation("point_move_loss: vertex count mismatch");
  }
  ad::Tape tape;
  return point_move_loss(tape.constant(before.positions()), tape.constant(after.positions())).value().item();
}

double edge_loss(const TriMesh& mesh) {
  ad::Tape tape;
  return edge_loss(tape.constant(mesh.positions()), mesh.topology()).value().item();
}

LossVars tdm_losses(const TdmTrace& trace, const TargetIndex& target, const LossWeights& weights) {
  LossVars out;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const MeshTopology& topo = trace.meshes[s].topology();
    const Var c = chamfer_l1(trace.outputs[s], target);
    const Var sm = smooth_loss(trace.outputs[s], topo, target);
    const Var lap = laplacian_loss(trace.inputs[s], trace.outputs[s], topo);
    const Var mv = point_move_loss(trace.inputs[s], trace.outputs[s]);
    const Var e = edge_loss(trace.outputs[s], topo);
    if (s == 0) {
      out.chamfer = c;
      out.smooth = sm;
      out.laplacian = lap;
      out.point_move = mv;
      out.edge = e;
    } else {
      out.chamfer = ad::add(out.chamfer, c);
      out.smooth = ad::add(out.smooth, sm);
      out.laplacian = ad::add(out.laplacian, lap);
      out.point_move = ad::add(out.point_move, mv);
      out.edge = ad::add(out.edge, e);
    }
  }
  Var total = ad::add(ad::scale(out.chamfer, weights.chamfer), ad::scale(out.smooth, weights.smooth));
  total = ad::add(total, ad::scale(out.laplacian, weights.laplacian));
  total = ad::add(total, ad::scale(out.point_move, weights.point_move));
  out.total = ad::add(total, ad::scale(out.edge, weights.edge));
  return out;
}

// ---- Training -----------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps, double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void Adam::step(ad::ParameterSet& params) {
  if (m_.empty()) {
    for (const ad::Parameter& p : params) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }
  if (m_.size() != params.size()) throw ContractViolation("Adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t k = 0;
  for (ad::Parameter& p : params) {
    auto m = m_[k].values(), v = v_[k].values();
    auto x = p.value.values();
    const auto g = p.grad.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g[i] + weight_decay_ * x[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      x[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    ++k;
  }
}

TrainResult overfit_train(const PointCloud& target, const TrainConfig& config, TdmModel& model,
                          const FeaturePyramid& pyramid, const Camera& camera, const StepCallback& on_step) {
  if (target.points.empty()) throw ContractViolation("overfit_train: empty target");
  const TargetIndex index(target);
  Adam adam(config.lr, 0.9, 0.999, 1e-8, config.weight_decay);
  TrainResult result;
  result.curve.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    if (config.late_lr_after != 0 && step == config.late_lr_after) adam.set_learning_rate(config.late_lr);
    model.params().zero_grad();
    ad::Tape tape;
    const TdmTrace trace = model.forward(tape, pyramid, camera);
    const LossVars losses = tdm_losses(trace, index, config.weights);
    const LossReport report = losses.report(config.weights);
    if (!std::isfinite(report.total)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step));
    }
    result.curve.push_back(report);
    if (on_step) on_step(step, report);
    tape.backward(losses.total);
    adam.step(model.params());
  }
  result.final_meshes = tdm_forward(pyramid, camera, model);
  return result;
}

TrainResult overfit_train(const PointCloud& target, const TrainConfig& config,
                          const TriMesh& template_mesh, const StepCallback& on_step) {
  ModelConfig mc;
  mc.width = config.width;
  mc.heads = config.heads;
  mc.init_seed = config.seed;
  TdmModel model(mc, template_mesh);
  const Image image = synthetic_image(config.seed);
  const FeaturePyramid pyramid = synth_backbone(image, config.seed);
  return overfit_train(target, config, model, pyramid, Camera{}, on_step);
}

void write_loss_csv(const std::vector<LossReport>& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,chamfer,smooth,laplacian,point_move,edge,total\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const LossReport& r = curve[i];
    out << i << ',' << r.chamfer << ',' << r.smooth << ',' << r.laplacian << ',' << r.point_move << ','
        << r.edge << ',' << r.total << '\n';
  }
}

}  // namespace tp2m
