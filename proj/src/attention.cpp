#include "tp2m/attention.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tp2m/error.hpp"

namespace tp2m {

using ad::Tensor;
using ad::Var;

Tensor uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// ---- Linear / LayerNorm / Mlp ------------------------------------------------

Linear::Linear(std::string name, std::size_t in, std::size_t out, bool zero_init)
    : name_(std::move(name)), in_(in), out_(out), zero_init_(zero_init) {}

void Linear::init(ad::ParameterSet& params, Rng& rng) const {
  if (zero_init_) {
    params.add(name_ + ".weight", Tensor::matrix(in_, out_));
    params.add(name_ + ".bias", Tensor::matrix(1, out_));
  } else {
    params.add(name_ + ".weight", uniform_init(in_, out_, in_, rng));
    params.add(name_ + ".bias", uniform_init(1, out_, in_, rng));
  }
}

Var Linear::forward(ad::Tape& tape, ad::ParameterSet& params, Var x) const {
  return ad::linear(x, tape.parameter(params.at(name_ + ".weight")),
                    tape.parameter(params.at(name_ + ".bias")));
}

LayerNorm::LayerNorm(std::string name, std::size_t width) : name_(std::move(name)), width_(width) {}

void LayerNorm::init(ad::ParameterSet& params) const {
  params.add(name_ + ".gain", Tensor::matrix(1, width_, 1.0));
  params.add(name_ + ".bias", Tensor::matrix(1, width_));
}

Var LayerNorm::forward(ad::Tape& tape, ad::ParameterSet& params, Var x) const {
  return ad::layer_norm(x, tape.parameter(params.at(name_ + ".gain")),
                        tape.parameter(params.at(name_ + ".bias")));
}

Mlp::Mlp(std::string name, std::size_t in, std::size_t hidden, std::size_t out, bool zero_last)
    : fc1_(name + ".fc1", in, hidden), fc2_(name + ".fc2", hidden, out, zero_last) {}

void Mlp::init(ad::ParameterSet& params, Rng& rng) const {
  fc1_.init(params, rng);
  fc2_.init(params, rng);
}

Var Mlp::forward(ad::Tape& tape, ad::ParameterSet& params, Var x) const {
  return fc2_.forward(tape, params, ad::silu(fc1_.forward(tape, params, x)));
}

// ---- Multi-head self-attention -----------------------------------------------

MultiHeadSelfAttention::MultiHeadSelfAttention(std::string name, std::size_t width, std::size_t heads)
    : name_(std::move(name)),
      width_(width),
      heads_(heads),
      head_dim_(heads == 0 ? 0 : width / heads),
      norm_(name_ + ".norm", width),
      out_(name_ + ".out", width, width, /*zero_init=*/true) {
  if (heads == 0 || width % heads != 0) {
    throw ContractViolation("attention width " + std::to_string(width) +
                            " is not divisible by head count " + std::to_string(heads));
  }
}

std::string MultiHeadSelfAttention::query_name(std::size_t h) const {
  return name_ + ".wq." + std::to_string(h);
}
std::string MultiHeadSelfAttention::key_name(std::size_t h) const {
  return name_ + ".wk." + std::to_string(h);
}
std::string MultiHeadSelfAttention::value_name(std::size_t h) const {
  return name_ + ".wv." + std::to_string(h);
}

void MultiHeadSelfAttention::init(ad::ParameterSet& params, Rng& rng) const {
  norm_.init(params);
  for (std::size_t h = 0; h < heads_; ++h) {
    params.add(query_name(h), uniform_init(width_, head_dim_, width_, rng));
    params.add(key_name(h), uniform_init(width_, head_dim_, width_, rng));
    params.add(value_name(h), uniform_init(width_, head_dim_, width_, rng));
  }
  out_.init(params, rng);
}

Var MultiHeadSelfAttention::forward(ad::Tape& tape, ad::ParameterSet& params, Var x,
                                    std::vector<Tensor>* attention) const {
  if (x.value().rank() != 2 || x.cols() != width_) {
    throw ContractViolation("attention expects tokens of width " + std::to_string(width_) +
                            ", got " + ad::shape_string(x.shape()));
  }
  const Var xn = norm_.forward(tape, params, x);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim_));
  std::vector<Var> heads;
  heads.reserve(heads_);
  if (attention != nullptr) attention->clear();
  for (std::size_t h = 0; h < heads_; ++h) {
    const Var q = ad::matmul(xn, tape.parameter(params.at(query_name(h))));
    const Var k = ad::matmul(xn, tape.parameter(params.at(key_name(h))));
    const Var v = ad::matmul(xn, tape.parameter(params.at(value_name(h))));
    const Var weights = ad::softmax_lastdim(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
    if (attention != nullptr) attention->push_back(weights.value());
    heads.push_back(ad::matmul(weights, v));
  }
  return ad::add(x, out_.forward(tape, params, ad::concat(heads, 1)));
}

// ---- Graph convolution -------------------------------------------------------

Var graph_conv(Var x, Var w0, Var w1, const MeshTopology& topology) {
  if (x.value().rank() != 2 || x.rows() != topology.vertex_count) {
    throw ContractViolation("graph_conv: " + ad::shape_string(x.shape()) + " tokens for a mesh of " +
                            std::to_string(topology.vertex_count) + " vertices");
  }
  std::vector<std::size_t> source, target;
  source.reserve(topology.adjacency.size());
  target.reserve(topology.adjacency.size());
  for (std::size_t i = 0; i < topology.vertex_count; ++i) {
    for (std::size_t e = topology.offsets[i]; e < topology.offsets[i + 1]; ++e) {
      source.push_back(topology.adjacency[e]);
      target.push_back(i);
    }
  }
  const Var neighborhood =
      ad::scatter_add_rows(ad::gather_rows(x, std::move(source)), std::move(target), x.rows());
  return ad::add(ad::matmul(x, w0), ad::matmul(neighborhood, w1));
}

GraphConv::GraphConv(std::string name, std::size_t in, std::size_t out, bool zero_init)
    : name_(std::move(name)), in_(in), out_(out), zero_init_(zero_init) {}

void GraphConv::init(ad::ParameterSet& params, Rng& rng) const {
  if (zero_init_) {
    params.add(name_ + ".w0", Tensor::matrix(in_, out_));
    params.add(name_ + ".w1", Tensor::matrix(in_, out_));
  } else {
    params.add(name_ + ".w0", uniform_init(in_, out_, in_, rng));
    params.add(name_ + ".w1", uniform_init(in_, out_, in_, rng));
  }
}

Var GraphConv::forward(ad::Tape& tape, ad::ParameterSet& params, Var x,
                       const MeshTopology& topology) const {
  return graph_conv(x, tape.parameter(params.at(name_ + ".w0")),
                    tape.parameter(params.at(name_ + ".w1")), topology);
}

GraphResidualBlock::GraphResidualBlock(std::string name, std::size_t width)
    : conv1_(name + ".conv1", width, width), conv2_(name + ".conv2", width, width, true) {}

void GraphResidualBlock::init(ad::ParameterSet& params, Rng& rng) const {
  conv1_.init(params, rng);
  conv2_.init(params, rng);
}

Var GraphResidualBlock::forward(ad::Tape& tape, ad::ParameterSet& params, Var x,
                                const MeshTopology& topology) const {
  const Var hidden = ad::relu(conv1_.forward(tape, params, x, topology));
  return ad::add(x, conv2_.forward(tape, params, hidden, topology));
}

// ---- Global block ------------------------------------------------------------

GlobalTransformerBlock::GlobalTransformerBlock(std::string name, std::size_t width,
                                               std::size_t heads, std::size_t global_tokens)
    : global_tokens_(global_tokens),
      attention_(name + ".attn", width, heads),
      grb_(name + ".grb", width),
      norm_(name + ".norm", width),
      mlp_(name + ".mlp", width, 2 * width, width, /*zero_last=*/true) {}

void GlobalTransformerBlock::init(ad::ParameterSet& params, Rng& rng) const {
  attention_.init(params, rng);
  grb_.init(params, rng);
  norm_.init(params);
  mlp_.init(params, rng);
}

Var GlobalTransformerBlock::forward(ad::Tape& tape, ad::ParameterSet& params, Var x,
                                    const MeshTopology& topology,
                                    std::vector<Tensor>* attention) const {
  const std::size_t vertices = topology.vertex_count;
  if (x.rows() != vertices + global_tokens_) {
    throw ContractViolation("global block expects " + std::to_string(vertices) + " vertex + " +
                            std::to_string(global_tokens_) + " global tokens, got " +
                            std::to_string(x.rows()));
  }
  const Var mixed = attention_.forward(tape, params, x, attention);
  std::vector<std::size_t> vertex_rows(vertices), global_rows(global_tokens_);
  std::iota(vertex_rows.begin(), vertex_rows.end(), std::size_t{0});
  std::iota(global_rows.begin(), global_rows.end(), vertices);
  const Var local = grb_.forward(tape, params, ad::gather_rows(mixed, std::move(vertex_rows)), topology);
  const Var merged = ad::concat({local, ad::gather_rows(mixed, std::move(global_rows))}, 0);
  return ad::add(merged, mlp_.forward(tape, params, norm_.forward(tape, params, merged)));
}

// ---- Vector attention ----------------------------------------------------------

VectorAttention::VectorAttention(std::string name, std::size_t width)
    : width_(width),
      norm_(name + ".norm", width),
      phi_(name + ".phi", width, width),
      psi_(name + ".psi", width, width),
      alpha_(name + ".alpha", width, width),
      theta_(name + ".theta", 3, width, width, false),
      gamma_(name + ".gamma", width, width, width, false),
      out_(name + ".out", width, width, /*zero_init=*/true) {}

void VectorAttention::init(ad::ParameterSet& params, Rng& rng) const {
  norm_.init(params);
  phi_.init(params, rng);
  psi_.init(params, rng);
  alpha_.init(params, rng);
  theta_.init(params, rng);
  gamma_.init(params, rng);
  out_.init(params, rng);
}

Var VectorAttention::forward(ad::Tape& tape, ad::ParameterSet& params, Var x, Var coords,
                             const NeighborLists& neighbors, Tensor* weights) const {
  const std::size_t n = x.rows();
  if (x.value().rank() != 2 || x.cols() != width_) {
    throw ContractViolation("vector attention expects tokens of width " + std::to_string(width_) +
                            ", got " + ad::shape_string(x.shape()));
  }
  if (coords.rows() != n || coords.cols() != 3) {
    throw ContractViolation("vector attention needs one coordinate per token, got " +
                            ad::shape_string(coords.shape()));
  }
  if (neighbors.size() != n || n == 0) {
    throw ContractViolation("vector attention needs one neighbor list per token");
  }
  const std::size_t k = neighbors[0].size();
  if (k == 0) throw ContractViolation("vector attention needs at least one neighbor");
  std::vector<std::size_t> centers, others;
  centers.reserve(n * k);
  others.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    if (neighbors[i].size() != k) {
      throw ContractViolation("ragged neighbor lists: token " + std::to_string(i) + " has " +
                              std::to_string(neighbors[i].size()) + " neighbors, expected " +
                              std::to_string(k));
    }
    for (std::uint32_t j : neighbors[i]) {
      if (j >= n) throw ContractViolation("neighbor index " + std::to_string(j) + " out of range");
      centers.push_back(i);
      others.push_back(j);
    }
  }

  const Var xn = norm_.forward(tape, params, x);
  const Var query = phi_.forward(tape, params, xn);
  const Var key = psi_.forward(tape, params, xn);
  const Var value = alpha_.forward(tape, params, xn);

  const Var relative = ad::sub(ad::gather_rows(coords, centers), ad::gather_rows(coords, others));
  const Var delta = theta_.forward(tape, params, relative);
  const Var logits = gamma_.forward(
      tape, params, ad::add(ad::sub(ad::gather_rows(query, centers), ad::gather_rows(key, others)), delta));

  // (n*k, d) -> (d*n, k): each row is one channel of one token across its
  // neighbors.
  const Var by_channel = ad::reshape(ad::transpose(logits), {width_ * n, k});
  const Var attn = ad::transpose(ad::reshape(ad::softmax_lastdim(by_channel), {width_, n * k}));
  if (weights != nullptr) *weights = attn.value();

  const Var messages = ad::mul(attn, ad::add(ad::gather_rows(value, others), delta));
  const Var z = ad::scatter_add_rows(messages, std::move(centers), n);
  return ad::add(x, out_.forward(tape, params, z));
}

LocalTransformerBlock::LocalTransformerBlock(std::string name, std::size_t width)
    : attention_(name + ".attn", width),
      norm_(name + ".norm", width),
      mlp_(name + ".mlp", width, 2 * width, width, /*zero_last=*/true) {}

void LocalTransformerBlock::init(ad::ParameterSet& params, Rng& rng) const {
  attention_.init(params, rng);
  norm_.init(params);
  mlp_.init(params, rng);
}

Var LocalTransformerBlock::forward(ad::Tape& tape, ad::ParameterSet& params, Var x, Var coords,
                                   const NeighborLists& neighbors, Tensor* weights) const {
  const Var mixed = attention_.forward(tape, params, x, coords, neighbors, weights);
  return ad::add(mixed, mlp_.forward(tape, params, norm_.forward(tape, params, mixed)));
}

// ---- Coordinate head -----------------------------------------------------------

CoordinateHead::CoordinateHead(std::string name, std::size_t in, std::size_t hidden)
    : mlp_(std::move(name), in, hidden, 3, /*zero_last=*/true) {}

void CoordinateHead::init(ad::ParameterSet& params, Rng& rng) const { mlp_.init(params, rng); }

Var CoordinateHead::forward(ad::Tape& tape, ad::ParameterSet& params, Var tokens, Var base) const {
  const Var offset = mlp_.forward(tape, params, tokens);
  if (!base.valid()) return offset;
  return ad::add(base, offset);
}

// ---- Serialization -------------------------------------------------------------

namespace {
std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}
}  // namespace

void save_parameters(const ad::ParameterSet& params, const std::filesystem::path& stem) {
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  std::ofstream manifest(with_suffix(stem, ".manifest"));
  if (!bin || !manifest) throw IoError("cannot write checkpoint " + stem.string());
  std::size_t offset = 0;
  for (const ad::Parameter& p : params) {
    manifest << p.name << ' ' << p.value.rank();
    for (std::size_t d : p.value.shape()) manifest << ' ' << d;
    manifest << ' ' << offset << '\n';
    for (double v : p.value.values()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      char bytes[8];
      for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      bin.write(bytes, 8);
    }
    offset += p.value.size();
  }
  if (!bin || !manifest) throw IoError("failed writing checkpoint " + stem.string());
}

void load_parameters(ad::ParameterSet& params, const std::filesystem::path& stem) {
  const auto bin_path = with_suffix(stem, ".bin"), manifest_path = with_suffix(stem, ".manifest");
  std::ifstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot open checkpoint manifest " + manifest_path.string());
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open checkpoint data " + bin_path.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (raw.size() % 8 != 0) throw ConfigError("checkpoint data " + bin_path.string() + " is truncated");

  std::size_t seen = 0;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string name;
    std::size_t rank = 0, offset = 0;
    if (!(ss >> name >> rank)) throw ConfigError("malformed manifest line: " + line);
    ad::Shape shape(rank);
    for (auto& d : shape) {
      if (!(ss >> d)) throw ConfigError("malformed manifest line: " + line);
    }
    if (!(ss >> offset)) throw ConfigError("malformed manifest line: " + line);
    if (!params.contains(name)) throw ConfigError("checkpoint has unexpected parameter '" + name + "'");
    ad::Parameter& p = params.at(name);
    if (p.value.shape() != shape) {
      throw ConfigError("checkpoint shape " + ad::shape_string(shape) + " for '" + name +
                        "' does not match model shape " + ad::shape_string(p.value.shape()));
    }
    if ((offset + p.value.size()) * 8 > raw.size()) {
      throw ConfigError("checkpoint data too short for '" + name + "'");
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(raw[(offset + i) * 8 + b]) << (8 * b);
      p.value[i] = std::bit_cast<double>(bits);
    }
    ++seen;
  }
  if (seen != params.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(seen) + " parameters, model has " +
                      std::to_string(params.size()));
  }
}

}  // namespace tp2m
