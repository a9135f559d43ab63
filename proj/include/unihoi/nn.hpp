#pragma once

// Building blocks shared by every decoder: parameter registry, linear and
// normalization layers, multi-head attention, post-norm transformer layers,
// 2-D sinusoidal position embeddings and a decoupled-weight-decay Adam.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "unihoi/autograd.hpp"
#include "unihoi/common.hpp"

namespace unihoi::nn {

using ag::Matrix;
using ag::Tensor;

enum class Init { kXavier, kZeros, kOnes, kNormal };

// Owns every learnable tensor of a model under a dotted name. Initial values
// depend only on (seed, name), so adding a layer never perturbs the others.
template <typename T>
class ParamRegistry {
 public:
  explicit ParamRegistry(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor<T> add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init = Init::kXavier) {
    for (const auto& [n, _] : params_) {
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    }
    Matrix<T> m(rows, cols);
    SplitMix rng(seed_ ^ fnv1a(name));
    switch (init) {
      case Init::kZeros:
        m.setZero();
        break;
      case Init::kOnes:
        m.setOnes();
        break;
      case Init::kNormal:
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal());
        break;
      case Init::kXavier: {
        const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
    }
    Tensor<T> t(std::move(m), true);
    params_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor<T>>>& params() { return params_; }

  Tensor<T> find(const std::string& name) const {
    for (const auto& [n, t] : params_) {
      if (n == name) return t;
    }
    throw ConfigError("no parameter named " + name);
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += static_cast<std::size_t>(t.value().size());
    return n;
  }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamRegistry<T>& reg, const std::string& name, Eigen::Index in, Eigen::Index out)
      : weight_(reg.add(name + ".weight", in, out)), bias_(reg.add(name + ".bias", 1, out, Init::kZeros)) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.cols() != weight_.rows()) {
      throw ShapeError("linear: input width " + std::to_string(x.cols()) + " != " +
                       std::to_string(weight_.rows()));
    }
    return ag::add_row(ag::matmul(x, weight_), bias_);
  }

  Eigen::Index in_features() const { return weight_.rows(); }
  Eigen::Index out_features() const { return weight_.cols(); }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamRegistry<T>& reg, const std::string& name, Eigen::Index dim)
      : gamma_(reg.add(name + ".gamma", 1, dim, Init::kOnes)), beta_(reg.add(name + ".beta", 1, dim, Init::kZeros)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return ag::layer_norm_rows(x, gamma_, beta_); }

 private:
  Tensor<T> gamma_;
  Tensor<T> beta_;
};

// Stack of linear layers with ReLU between them (none after the last).
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamRegistry<T>& reg, const std::string& name, const std::vector<Eigen::Index>& dims) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      layers_.emplace_back(reg, name + ".layers." + std::to_string(i), dims[i], dims[i + 1]);
    }
  }

  Tensor<T> operator()(Tensor<T> x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i](x);
      if (i + 1 < layers_.size()) x = ag::relu(x);
    }
    return x;
  }

 private:
  std::vector<Linear<T>> layers_;
};

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry<T>& reg, const std::string& name, Eigen::Index dim, int heads)
      : q_(reg, name + ".q_proj", dim, dim),
        k_(reg, name + ".k_proj", dim, dim),
        v_(reg, name + ".v_proj", dim, dim),
        out_(reg, name + ".out_proj", dim, dim),
        heads_(heads) {
    if (heads <= 0 || dim % heads != 0) throw ConfigError("attention width must be divisible by head count");
  }

  // Attends from query rows onto key/value rows (keys and values share row count).
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value) const {
    if (key.rows() != value.rows()) throw ShapeError("attention: key/value row mismatch");
    if (key.rows() == 0) throw InvalidInput("attention over zero keys");
    Tensor<T> q = q_(query);
    Tensor<T> k = k_(key);
    Tensor<T> v = v_(value);
    const Eigen::Index dh = q.cols() / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads_));
    for (int h = 0; h < heads_; ++h) {
      const Eigen::Index off = h * dh;
      Tensor<T> qh = heads_ == 1 ? q : ag::slice_cols(q, off, dh);
      Tensor<T> kh = heads_ == 1 ? k : ag::slice_cols(k, off, dh);
      Tensor<T> vh = heads_ == 1 ? v : ag::slice_cols(v, off, dh);
      Tensor<T> attn = ag::softmax_rows(ag::matmul_nt(qh, kh) * scale);
      outs.push_back(ag::matmul(attn, vh));
    }
    Tensor<T> merged = heads_ == 1 ? outs.front() : ag::concat_cols(outs);
    return out_(merged);
  }

 private:
  Linear<T> q_, k_, v_, out_;
  int heads_ = 1;
};

template <typename T>
Tensor<T> add_optional(const Tensor<T>& x, const Tensor<T>& pos) {
  return pos.defined() ? x + pos : x;
}

// Post-norm self-attention encoder layer.
template <typename T>
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParamRegistry<T>& reg, const std::string& name, Eigen::Index dim, int heads, Eigen::Index ffn_dim)
      : attn_(reg, name + ".self_attn", dim, heads),
        norm1_(reg, name + ".norm1", dim),
        ffn_(reg, name + ".ffn", {dim, ffn_dim, dim}),
        norm2_(reg, name + ".norm2", dim) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> h = norm1_(x + attn_(x, x, x));
    return norm2_(h + ffn_(h));
  }

 private:
  MultiHeadAttention<T> attn_;
  LayerNorm<T> norm1_;
  Mlp<T> ffn_;
  LayerNorm<T> norm2_;
};

// Post-norm decoder layer: self-attention, optional cross-attention, feed-forward.
// query_pos is added to queries and keys of self-attention and to queries of
// cross-attention; memory_pos (if defined) is added to cross-attention keys only.
template <typename T>
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParamRegistry<T>& reg, const std::string& name, Eigen::Index dim, int heads, Eigen::Index ffn_dim,
               bool with_cross_attention)
      : self_attn_(reg, name + ".self_attn", dim, heads),
        norm1_(reg, name + ".norm1", dim),
        ffn_(reg, name + ".ffn", {dim, ffn_dim, dim}),
        norm3_(reg, name + ".norm3", dim) {
    if (with_cross_attention) {
      cross_attn_.emplace(reg, name + ".cross_attn", dim, heads);
      norm2_.emplace(reg, name + ".norm2", dim);
    }
  }

  bool has_cross_attention() const { return cross_attn_.has_value(); }

  Tensor<T> operator()(const Tensor<T>& tgt, const Tensor<T>& query_pos, const Tensor<T>& memory,
                       const Tensor<T>& memory_pos) const {
    Tensor<T> qk = add_optional(tgt, query_pos);
    Tensor<T> x = norm1_(tgt + self_attn_(qk, qk, tgt));
    if (cross_attn_) {
      x = (*norm2_)(x + (*cross_attn_)(add_optional(x, query_pos), add_optional(memory, memory_pos), memory));
    }
    return norm3_(x + ffn_(x));
  }

 private:
  MultiHeadAttention<T> self_attn_;
  LayerNorm<T> norm1_;
  std::optional<MultiHeadAttention<T>> cross_attn_;
  std::optional<LayerNorm<T>> norm2_;
  Mlp<T> ffn_;
  LayerNorm<T> norm3_;
};

// Fixed 2-D sinusoidal embedding for a rows x cols grid, (rows*cols) x dim,
// row-major over the grid. The first half of the channels encodes y, the second x.
template <typename T>
Matrix<T> sinusoidal_position_2d(int rows, int cols, Eigen::Index dim, double temperature = 10000.0) {
  if (dim % 4 != 0) throw ConfigError("position embedding width must be divisible by 4");
  const Eigen::Index half = dim / 2;
  constexpr double kTwoPi = 6.283185307179586;
  Matrix<T> pos(static_cast<Eigen::Index>(rows) * cols, dim);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Eigen::Index row = static_cast<Eigen::Index>(r) * cols + c;
      const double y = (r + 1.0) / rows * kTwoPi;
      const double x = (c + 1.0) / cols * kTwoPi;
      for (Eigen::Index i = 0; i < half; ++i) {
        const double freq = std::pow(temperature, 2.0 * static_cast<double>(i / 2) / static_cast<double>(half));
        const double ay = y / freq;
        const double ax = x / freq;
        pos(row, i) = static_cast<T>(i % 2 == 0 ? std::sin(ay) : std::cos(ay));
        pos(row, half + i) = static_cast<T>(i % 2 == 0 ? std::sin(ax) : std::cos(ax));
      }
    }
  }
  return pos;
}

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 0.1;  // <= 0 disables clipping
};

// Adam with decoupled weight decay. Per-parameter learning-rate multipliers
// are resolved by name prefix.
template <typename T>
class AdamW {
 public:
  AdamW(ParamRegistry<T>& reg, AdamWOptions opts, std::map<std::string, double> lr_multipliers = {})
      : reg_(&reg), opts_(opts), multipliers_(std::move(lr_multipliers)) {
    for (const auto& [name, p] : reg.params()) {
      m_.push_back(Matrix<T>::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix<T>::Zero(p.rows(), p.cols()));
    }
  }

  // Returns the pre-clip global gradient norm.
  double step() {
    ++step_;
    auto& params = reg_->params();
    double sq = 0;
    for (auto& [_, p] : params) {
      if (p.grad().size() != 0) sq += static_cast<double>(p.grad().squaredNorm());
    }
    const double norm = std::sqrt(sq);
    const double clip = (opts_.clip_norm > 0 && norm > opts_.clip_norm) ? opts_.clip_norm / (norm + 1e-6) : 1.0;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, p] = params[i];
      if (p.grad().size() == 0) continue;
      const double lr = opts_.lr * multiplier(name);
      const Matrix<T> g = p.grad() * static_cast<T>(clip);
      m_[i] = static_cast<T>(opts_.beta1) * m_[i] + static_cast<T>(1 - opts_.beta1) * g;
      v_[i] = static_cast<T>(opts_.beta2) * v_[i] + static_cast<T>(1 - opts_.beta2) * g.cwiseProduct(g);
      Matrix<T>& w = p.mutable_value();
      w *= static_cast<T>(1.0 - lr * opts_.weight_decay);
      const auto mhat = m_[i].array() / static_cast<T>(bc1);
      const auto vhat = v_[i].array() / static_cast<T>(bc2);
      w.array() -= static_cast<T>(lr) * mhat / (vhat.sqrt() + static_cast<T>(opts_.eps));
    }
    return norm;
  }

  double multiplier(const std::string& name) const {
    for (const auto& [prefix, mult] : multipliers_) {
      if (name.rfind(prefix, 0) == 0) return mult;
    }
    return 1.0;
  }

  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }
  std::vector<Matrix<T>>& first_moments() { return m_; }
  std::vector<Matrix<T>>& second_moments() { return v_; }
  const AdamWOptions& options() const { return opts_; }

 private:
  ParamRegistry<T>* reg_;
  AdamWOptions opts_;
  std::map<std::string, double> multipliers_;
  std::vector<Matrix<T>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace unihoi::nn
