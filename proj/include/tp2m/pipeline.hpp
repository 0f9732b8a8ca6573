#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "tp2m/attention.hpp"
#include "tp2m/autodiff.hpp"
#include "tp2m/mesh.hpp"
#include "tp2m/perception.hpp"

namespace tp2m {

inline constexpr std::size_t kStageCount = 4;

struct ModelConfig {
  std::size_t width = 192;
  std::size_t heads = 4;
  std::size_t k_stage2 = 16;
  std::size_t k_stage3 = 64;
  std::uint64_t init_seed = 0;
};

// Target surface samples with unit normals.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
};

// One text line per point: `x y z nx ny nz`. Non-unit normals are
// normalized with a warning on stderr.
PointCloud read_point_cloud(const std::filesystem::path& path);
void write_point_cloud(const PointCloud& cloud, const std::filesystem::path& path);

// Per-stage record of one forward pass. Stage s deforms `inputs[s]` into
// `outputs[s]` over `meshes[s]` connectivity (156, 618, 2466, 9858 vertices).
struct TdmTrace {
  std::array<ad::Var, kStageCount> inputs;
  std::array<ad::Var, kStageCount> outputs;
  std::array<TriMesh, kStageCount> meshes;

  // Output meshes with learned coordinates.
  std::vector<TriMesh> output_meshes() const;
};

// Transformer-based deformation module: global block on the template,
// two local blocks after edge-midpoint unpooling, then an unpool + MLP head.
class TdmModel {
 public:
  TdmModel(const ModelConfig& config, const TriMesh& template_mesh);

  ad::ParameterSet& params() { return params_; }
  const ad::ParameterSet& params() const { return params_; }
  const ModelConfig& config() const { return config_; }
  const TriMesh& template_mesh() const { return meshes_[0]; }
  // Reference connectivity per stage (template positions unpooled).
  const std::array<TriMesh, kStageCount>& stage_meshes() const { return meshes_; }

  TdmTrace forward(ad::Tape& tape, const FeaturePyramid& pyramid, const Camera& camera);

 private:
  ad::Var pool_tokens(ad::Tape& tape, ad::Var positions, std::span<const ad::Var> projected_grids,
                      const FeaturePyramid& pyramid, const Camera& camera);

  ModelConfig config_;
  std::array<TriMesh, kStageCount> meshes_;
  ad::ParameterSet params_;
  GlobalTransformerBlock global_block_;
  LocalTransformerBlock local_block2_, local_block3_;
  CoordinateHead head1_, head2_, head3_, final_head_;
};

// Midpoint rows for every edge appended after the original rows.
ad::Var unpool_rows(ad::Var x, const std::vector<Edge>& edges);

// Deterministic inference: backbone (seeded) plus one forward pass.
// Returns the four stage meshes.
std::vector<TriMesh> tdm_forward(const Image& image, const Camera& camera, TdmModel& model,
                                 std::uint64_t seed);
std::vector<TriMesh> tdm_forward(const FeaturePyramid& pyramid, const Camera& camera,
                                 TdmModel& model);

// Throws NumericalError when the bounding box of `positions` is below
// 1e-6 along every axis.
void check_degenerate(const ad::Tensor& positions, std::size_t stage);

// ---- Losses -------------------------------------------------------------------

struct LossWeights {
  double chamfer = 1.0;
  double smooth = 1.6e-4;
  double laplacian = 0.3;
  double point_move = 0.1;
  double edge = 0.1;
};

struct LossReport {
  double chamfer = 0.0;
  double smooth = 0.0;
  double laplacian = 0.0;
  double point_move = 0.0;
  double edge = 0.0;
  LossWeights weights;
  double total = 0.0;

  // Weighted sum evaluated in the same order as the taped total.
  double recompute_total() const;
};

struct LossVars {
  ad::Var chamfer, smooth, laplacian, point_move, edge, total;
  LossReport report(const LossWeights& weights) const;
};

// Nearest-neighbor lookups against a fixed target.
class TargetIndex {
 public:
  explicit TargetIndex(PointCloud cloud);
  const PointCloud& cloud() const { return cloud_; }
  const KdTree& tree() const { return tree_; }

 private:
  PointCloud cloud_;
  KdTree tree_;
};

// mean_p min_q |p - q| + mean_q min_p |p - q|
ad::Var chamfer_l1(ad::Var pred, const TargetIndex& target);
// sum over edges (a < b) of |<p_b - p_a, n_q>|, q nearest target point to p_a
ad::Var smooth_loss(ad::Var positions, const MeshTopology& topology, const TargetIndex& target);
// sum_i |delta_i(after) - delta_i(before)|
ad::Var laplacian_loss(ad::Var before, ad::Var after, const MeshTopology& topology);
// sum_i |after_i - before_i|
ad::Var point_move_loss(ad::Var before, ad::Var after);
// sum over edges of |p_b - p_a|
ad::Var edge_loss(ad::Var positions, const MeshTopology& topology);

// Value-only forms.
double chamfer_l1(std::span<const Vec3> pred, std::span<const Vec3> gt);
double smooth_loss(const TriMesh& mesh, const PointCloud& target);
double laplacian_loss(const TriMesh& before, const TriMesh& after);
double point_move_loss(const TriMesh& before, const TriMesh& after);
double edge_loss(const TriMesh& mesh);

// All five terms summed over the four stages, and the weighted total.
LossVars tdm_losses(const TdmTrace& trace, const TargetIndex& target, const LossWeights& weights);

// ---- Training -----------------------------------------------------------------

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double weight_decay = 0.0);
  void step(ad::ParameterSet& params);
  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<ad::Tensor> m_, v_;
};

struct TrainConfig {
  std::size_t steps = 300;
  // Optimizer defaults from the full-scale recipe (batch 48 there; batch 1 here).
  double lr = 5e-4;
  double late_lr = 1.5e-5;
  std::size_t late_lr_after = 0;  // step at which late_lr applies; 0 = never
  double weight_decay = 1e-6;
  std::size_t width = 16;
  std::size_t heads = 4;
  std::uint64_t seed = 0;
  LossWeights weights;
};

struct TrainResult {
  std::vector<LossReport> curve;  // one entry per step, before the update
  std::vector<TriMesh> final_meshes;
};

using StepCallback = std::function<void(std::size_t step, const LossReport&)>;

// Fits every parameter to a single target (Adam, batch 1). The image is the
// seeded synthetic test image seen through the default camera.
TrainResult overfit_train(const PointCloud& target, const TrainConfig& config,
                          const TriMesh& template_mesh, const StepCallback& on_step = {});
TrainResult overfit_train(const PointCloud& target, const TrainConfig& config,
                          TdmModel& model, const FeaturePyramid& pyramid, const Camera& camera,
                          const StepCallback& on_step = {});

void write_loss_csv(const std::vector<LossReport>& curve, const std::filesystem::path& path);

}  // namespace tp2m
