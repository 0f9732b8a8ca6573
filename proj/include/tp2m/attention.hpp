#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tp2m/autodiff.hpp"
#include "tp2m/mesh.hpp"

namespace tp2m {

using Rng = std::mt19937_64;
using NeighborLists = std::vector<std::vector<std::uint32_t>>;

// Per-token features plus, for tokens that are mesh vertices, coordinates.
struct TokenSequence {
  ad::Tensor features;      // (n, d)
  std::vector<Vec3> coords;  // empty or one per leading vertex token
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
ad::Tensor uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng);

// Each layer below only describes structure; values live in a ParameterSet
// under names prefixed by the layer name.

class Linear {
 public:
  Linear(std::string name, std::size_t in, std::size_t out, bool zero_init = false);
  void init(ad::ParameterSet& params, Rng& rng) const;
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x) const;
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::size_t in_, out_;
  bool zero_init_;
};

class LayerNorm {
 public:
  LayerNorm(std::string name, std::size_t width);
  void init(ad::ParameterSet& params) const;
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x) const;

 private:
  std::string name_;
  std::size_t width_;
};

// Linear -> SiLU -> Linear.
class Mlp {
 public:
  Mlp(std::string name, std::size_t in, std::size_t hidden, std::size_t out, bool zero_last);
  void init(ad::ParameterSet& params, Rng& rng) const;
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x) const;
  const Linear& last() const { return fc2_; }

 private:
  Linear fc1_, fc2_;
};

// Scalar multi-head self-attention, pre-norm, with residual:
//   x + W_o concat_h softmax(Q_h K_h^T / sqrt(d_h)) V_h
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention(std::string name, std::size_t width, std::size_t heads);
  void init(ad::ParameterSet& params, Rng& rng) const;
  // `attention` receives one (n, n) weight matrix per head when non-null.
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x,
                  std::vector<ad::Tensor>* attention = nullptr) const;

  std::size_t heads() const { return heads_; }
  std::string query_name(std::size_t h) const;
  std::string key_name(std::size_t h) const;
  std::string value_name(std::size_t h) const;

 private:
  std::string name_;
  std::size_t width_, heads_, head_dim_;
  LayerNorm norm_;
  Linear out_;
};

// x_i' = x_i W0 + sum_{j in N(i)} x_j W1
class GraphConv {
 public:
  GraphConv(std::string name, std::size_t in, std::size_t out, bool zero_init = false);
  void init(ad::ParameterSet& params, Rng& rng) const;
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x,
                  const MeshTopology& topology) const;

 private:
  std::string name_;
  std::size_t in_, out_;
  bool zero_init_;
};

ad::Var graph_conv(ad::Var x, ad::Var w0, ad::Var w1, const MeshTopology& topology);

// x + conv2(relu(conv1(x))); conv2 starts at zero.
class GraphResidualBlock {
 public:
  GraphResidualBlock(std::string name, std::size_t width);
  void init(ad::ParameterSet& params, Rng& rng) const;
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x,
                  const MeshTopology& topology) const;

 private:
  GraphConv conv1_, conv2_;
};

// MHSA over vertex + global tokens, graph residual block on the vertex
// tokens only, then a residual pre-norm MLP over all tokens.
class GlobalTransformerBlock {
 public:
  GlobalTransformerBlock(std::string name, std::size_t width, std::size_t heads,
                         std::size_t global_tokens = 49);
  void init(ad::ParameterSet& params, Rng& rng) const;
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x,
                  const MeshTopology& topology,
                  std::vector<ad::Tensor>* attention = nullptr) const;

 private:
  std::size_t global_tokens_;
  MultiHeadSelfAttention attention_;
  GraphResidualBlock grb_;
  LayerNorm norm_;
  Mlp mlp_;
};

// Vector attention over k nearest neighbors with relative positional
// embedding delta = theta(c_i - c_j):
//   z_i = sum_j softmax_j(gamma(phi(x_i) - psi(x_j) + delta)) * (alpha(x_j) + delta)
// The softmax runs per channel across the neighbors; output is x + W_o z.
class VectorAttention {
 public:
  VectorAttention(std::string name, std::size_t width);
  void init(ad::ParameterSet& params, Rng& rng) const;
  // `weights` receives the (n*k, d) attention weights, rows i*k + m.
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x, ad::Var coords,
                  const NeighborLists& neighbors, ad::Tensor* weights = nullptr) const;

  const Linear& output() const { return out_; }

 private:
  std::size_t width_;
  LayerNorm norm_;
  Linear phi_, psi_, alpha_;
  Mlp theta_, gamma_;
  Linear out_;
};

// Vector attention followed by a residual pre-norm MLP.
class LocalTransformerBlock {
 public:
  LocalTransformerBlock(std::string name, std::size_t width);
  void init(ad::ParameterSet& params, Rng& rng) const;
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var x, ad::Var coords,
                  const NeighborLists& neighbors, ad::Tensor* weights = nullptr) const;

 private:
  VectorAttention attention_;
  LayerNorm norm_;
  Mlp mlp_;
};

// Small MLP from tokens to 3D coordinates. With a base, predicts an offset
// added to it; the last layer starts at zero.
class CoordinateHead {
 public:
  CoordinateHead(std::string name, std::size_t in, std::size_t hidden);
  void init(ad::ParameterSet& params, Rng& rng) const;
  ad::Var forward(ad::Tape& tape, ad::ParameterSet& params, ad::Var tokens,
                  ad::Var base = {}) const;

 private:
  Mlp mlp_;
};

// Checkpoints: `<stem>.bin` holds every value as little-endian f64 in set
// order; `<stem>.manifest` lists `name rank dims... offset` per parameter.
void save_parameters(const ad::ParameterSet& params, const std::filesystem::path& stem);
// Loads into an existing set; names and shapes must match exactly.
void load_parameters(ad::ParameterSet& params, const std::filesystem::path& stem);

}  // namespace tp2m
