#pragma once

// Frozen foundation-feature providers and the HO Prompt-guided Decoder.
//
// Providers return raw Q-Former-space tokens (N^f x D^f). They are never
// differentiated: tokens enter the detector graph as constants, so no gradient
// can reach provider state.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "unihoi/autograd.hpp"
#include "unihoi/common.hpp"
#include "unihoi/detector_core.hpp"
#include "unihoi/image_io.hpp"
#include "unihoi/model_config.hpp"
#include "unihoi/nn.hpp"

namespace unihoi {

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FloatRow = Eigen::Matrix<float, 1, Eigen::Dynamic>;

struct FoundationTokens {
  FloatMatrix tokens;  // X^q, N^f x D^f
  FloatRow global;     // image-level embedding, target of the mimic loss
  std::string provider_id;

  friend bool operator==(const FoundationTokens& a, const FoundationTokens& b) {
    return a.provider_id == b.provider_id && a.tokens.rows() == b.tokens.rows() &&
           a.tokens.cols() == b.tokens.cols() && a.tokens == b.tokens && a.global.size() == b.global.size() &&
           a.global == b.global;
  }
};

// Mimic target: mean of the raw provider tokens.
inline FloatRow global_embedding(const FloatMatrix& tokens) {
  if (tokens.rows() == 0) return FloatRow::Zero(tokens.cols());
  return tokens.colwise().mean();
}

class FoundationProvider {
 public:
  virtual ~FoundationProvider() = default;
  virtual std::string id() const = 0;
  virtual int num_tokens() const = 0;  // N^f
  virtual int dim() const = 0;         // D^f
  // Side length the image is resampled to before encoding.
  virtual int input_size() const { return 224; }
  // Encodes an image already resampled to input_size() x input_size().
  virtual FoundationTokens encode(const Image& resized, const std::string& image_id) const = 0;
  // Digest of all provider state; constant for a frozen provider.
  virtual std::uint64_t state_checksum() const { return 0; }
};

inline FoundationTokens provide_features(const Image& image, const FoundationProvider& provider,
                                         const std::string& image_id = {}) {
  if (image.empty()) throw InvalidInput("provide_features: empty image");
  const int s = provider.input_size();
  FoundationTokens out = provider.encode(resize_bilinear(image, s, s), image_id);
  if (out.tokens.rows() != provider.num_tokens() || out.tokens.cols() != provider.dim()) {
    throw ProviderError("provider " + provider.id() + " returned " + std::to_string(out.tokens.rows()) + "x" +
                        std::to_string(out.tokens.cols()) + " tokens");
  }
  if (!out.tokens.allFinite() || !out.global.allFinite()) throw ProviderError("provider returned non-finite tokens");
  return out;
}

// Deterministic stand-in for the BLIP2 image path. A 224x224 image is cut
// into 14x14 patches; per-patch channel means and deviations are lifted to
// 257 x 1408 "image tokens" (one global token first) through fixed
// hash-seeded weights, then 32 hash-seeded queries attention-pool them and a
// hashed map brings the result to 32 x 768.
class MockFoundationProvider final : public FoundationProvider {
 public:
  static constexpr int kInputSize = 224;
  static constexpr int kPatch = 14;
  static constexpr int kImageTokens = 257;
  static constexpr int kImageDim = 1408;
  static constexpr int kStats = 7;  // 3 means, 3 deviations, 1 bias

  explicit MockFoundationProvider(std::uint64_t seed = 0x5eed, int num_tokens = 32, int dim = 768)
      : seed_(seed), num_tokens_(num_tokens), dim_(dim) {
    lift_ = hashed(kStats, kImageDim, 1, 1.0f / std::sqrt(static_cast<float>(kStats)) * 2.0f);
    position_ = hashed(kImageTokens, kImageDim, 2, 0.2f);
    queries_ = hashed(num_tokens_, kImageDim, 3, 1.0f);
    out_ = hashed(kImageDim, dim_, 4, 1.0f / std::sqrt(static_cast<float>(kImageDim)) * 1.5f);
  }

  std::string id() const override { return "mock-blip2-" + hex64(seed_).substr(8); }
  int num_tokens() const override { return num_tokens_; }
  int dim() const override { return dim_; }
  int input_size() const override { return kInputSize; }

  // Per-patch statistics, 257 x 7 (row 0 summarizes the whole image).
  static FloatMatrix patch_statistics(const Image& img) {
    if (img.height != kInputSize || img.width != kInputSize) {
      throw ShapeError("mock provider expects a 224x224 image");
    }
    const int grid = kInputSize / kPatch;
    FloatMatrix stats = FloatMatrix::Zero(kImageTokens, kStats);
    auto fill = [&](int row, int y0, int x0, int extent) {
      const int ch = std::min(img.channels, 3);
      const double n = static_cast<double>(extent) * extent;
      for (int c = 0; c < ch; ++c) {
        double s = 0, s2 = 0;
        for (int y = y0; y < y0 + extent; ++y) {
          for (int x = x0; x < x0 + extent; ++x) {
            const double v = img.at(y, x, c);
            s += v;
            s2 += v * v;
          }
        }
        const double m = s / n;
        stats(row, c) = static_cast<float>(m);
        stats(row, 3 + c) = static_cast<float>(std::sqrt(std::max(0.0, s2 / n - m * m)));
      }
      stats(row, 6) = 1.0f;
    };
    fill(0, 0, 0, kInputSize);
    for (int r = 0; r < grid; ++r) {
      for (int c = 0; c < grid; ++c) fill(1 + r * grid + c, r * kPatch, c * kPatch, kPatch);
    }
    return stats;
  }

  // X^f: 257 x 1408 image tokens.
  FloatMatrix image_tokens(const Image& resized) const {
    FloatMatrix x = patch_statistics(resized) * lift_;
    x = x.array().tanh().matrix() + position_;
    return x;
  }

  FoundationTokens encode(const Image& resized, const std::string&) const override {
    const FloatMatrix x = image_tokens(resized);
    FloatMatrix scores = (queries_ * x.transpose()) / std::sqrt(static_cast<float>(kImageDim));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      const float m = scores.row(i).maxCoeff();
      scores.row(i) = (scores.row(i).array() - m).exp();
      scores.row(i) /= scores.row(i).sum();
    }
    FoundationTokens out;
    out.tokens = ((scores * x) * out_).array().tanh().matrix();
    out.global = global_embedding(out.tokens);
    out.provider_id = id();
    return out;
  }

  std::uint64_t state_checksum() const override {
    std::uint64_t h = fnv1a(&seed_, sizeof(seed_));
    for (const FloatMatrix* m : {&lift_, &position_, &queries_, &out_}) {
      h = fnv1a(m->data(), static_cast<std::size_t>(m->size()) * sizeof(float), h);
    }
    return h;
  }

 private:
  FloatMatrix hashed(int rows, int cols, std::uint64_t stream, float scale) const {
    FloatMatrix m(rows, cols);
    const std::uint64_t base = splitmix64(seed_ ^ splitmix64(stream));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const std::uint64_t bits = splitmix64(base + static_cast<std::uint64_t>(i));
      m.data()[i] = static_cast<float>((2.0 * unit_from_bits(bits) - 1.0) * scale);
    }
    return m;
  }

  std::uint64_t seed_;
  int num_tokens_;
  int dim_;
  FloatMatrix lift_, position_, queries_, out_;
};

// Binary archive of precomputed tokens keyed by image id.
//
// Layout (little-endian): "UHFC", u32 version, u32 len + provider id, u32 N^f,
// u32 D^f, u64 entry count, u64 FNV-1a checksum of the payload, then per entry
// u32 len + image id, N^f*D^f float32 tokens, D^f float32 global.
class TokenCache {
 public:
  static constexpr std::uint32_t kVersion = 1;

  TokenCache() = default;
  TokenCache(std::string provider_id, int num_tokens, int dim)
      : provider_id_(std::move(provider_id)), num_tokens_(num_tokens), dim_(dim) {}

  static TokenCache load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open token cache " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r{bytes, 0, path};
    if (r.raw(4) != "UHFC") throw DataError(path + ": not a token cache");
    if (r.u32() != kVersion) throw DataError(path + ": unsupported token cache version");
    TokenCache cache;
    cache.provider_id_ = r.raw(r.u32());
    cache.num_tokens_ = static_cast<int>(r.u32());
    cache.dim_ = static_cast<int>(r.u32());
    const std::uint64_t count = r.u64();
    const std::uint64_t checksum = r.u64();
    if (fnv1a(std::string_view(bytes).substr(r.pos)) != checksum) {
      throw ChecksumError(path + ": token cache checksum mismatch");
    }
    for (std::uint64_t i = 0; i < count; ++i) {
      std::string id = r.raw(r.u32());
      FoundationTokens t;
      t.provider_id = cache.provider_id_;
      t.tokens.resize(cache.num_tokens_, cache.dim_);
      r.floats(t.tokens.data(), static_cast<std::size_t>(t.tokens.size()));
      t.global.resize(cache.dim_);
      r.floats(t.global.data(), static_cast<std::size_t>(cache.dim_));
      cache.entries_.emplace(std::move(id), std::move(t));
    }
    return cache;
  }

  void save(const std::string& path) const {
    std::string payload;
    for (const auto& [id, t] : entries_) {
      put_u32(payload, static_cast<std::uint32_t>(id.size()));
      payload += id;
      payload.append(reinterpret_cast<const char*>(t.tokens.data()), static_cast<std::size_t>(t.tokens.size()) * 4);
      payload.append(reinterpret_cast<const char*>(t.global.data()), static_cast<std::size_t>(t.global.size()) * 4);
    }
    std::string out = "UHFC";
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(provider_id_.size()));
    out += provider_id_;
    put_u32(out, static_cast<std::uint32_t>(num_tokens_));
    put_u32(out, static_cast<std::uint32_t>(dim_));
    put_u64(out, entries_.size());
    put_u64(out, fnv1a(payload));
    out += payload;
    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) throw DataError("cannot write token cache " + path);
      f.write(out.data(), static_cast<std::streamsize>(out.size()));
    }
    std::filesystem::rename(tmp, path);
  }

  void put(const std::string& image_id, FoundationTokens tokens) {
    if (tokens.tokens.rows() != num_tokens_ || tokens.tokens.cols() != dim_ || tokens.global.size() != dim_) {
      throw ShapeError("token cache entry has the wrong shape");
    }
    entries_[image_id] = std::move(tokens);
  }

  const FoundationTokens* find(const std::string& image_id) const {
    auto it = entries_.find(image_id);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::string& provider_id() const { return provider_id_; }
  int num_tokens() const { return num_tokens_; }
  int dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Reader {
    const std::string& bytes;
    std::size_t pos;
    const std::string& path;
    std::string raw(std::size_t n) {
      if (pos + n > bytes.size()) throw DataError(path + ": truncated token cache");
      std::string s = bytes.substr(pos, n);
      pos += n;
      return s;
    }
    std::uint32_t u32() {
      std::uint32_t v = 0;
      std::memcpy(&v, raw(4).data(), 4);
      return v;
    }
    std::uint64_t u64() {
      std::uint64_t v = 0;
      std::memcpy(&v, raw(8).data(), 8);
      return v;
    }
    void floats(float* dst, std::size_t n) {
      const std::string s = raw(n * 4);
      std::memcpy(dst, s.data(), n * 4);
    }
  };
  static void put_u32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
  static void put_u64(std::string& s, std::uint64_t v) { s.append(reinterpret_cast<const char*>(&v), 8); }

  std::string provider_id_;
  int num_tokens_ = 0;
  int dim_ = 0;
  std::map<std::string, FoundationTokens> entries_;
};

// Serves tokens from a TokenCache; misses go to an optional fallback provider
// and are remembered. Many concurrent readers, one writer at a time.
class CachedFoundationProvider final : public FoundationProvider {
 public:
  explicit CachedFoundationProvider(TokenCache cache, std::shared_ptr<const FoundationProvider> fallback = nullptr)
      : cache_(std::move(cache)), fallback_(std::move(fallback)) {
    if (fallback_ && (fallback_->num_tokens() != cache_.num_tokens() || fallback_->dim() != cache_.dim())) {
      throw ConfigError("fallback provider shape differs from the token cache");
    }
  }

  std::string id() const override { return cache_.provider_id(); }
  int num_tokens() const override { return cache_.num_tokens(); }
  int dim() const override { return cache_.dim(); }
  int input_size() const override { return fallback_ ? fallback_->input_size() : 224; }

  FoundationTokens encode(const Image& resized, const std::string& image_id) const override {
    {
      std::shared_lock lock(mutex_);
      if (const FoundationTokens* hit = cache_.find(image_id)) return *hit;
    }
    if (!fallback_) throw ProviderError("image '" + image_id + "' is not in the token cache");
    FoundationTokens fresh = fallback_->encode(resized, image_id);
    fresh.provider_id = cache_.provider_id();
    std::unique_lock lock(mutex_);
    cache_.put(image_id, fresh);
    return fresh;
  }

  void save(const std::string& path) const {
    std::shared_lock lock(mutex_);
    cache_.save(path);
  }
  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return cache_.size();
  }

 private:
  mutable TokenCache cache_;
  std::shared_ptr<const FoundationProvider> fallback_;
  mutable std::shared_mutex mutex_;
};

// ---------------------------------------------------------------------------
// Trainable side

template <typename T>
struct ProjectedFoundationTokens {
  Tensor<T> tokens;  // N^f x D^v
};

template <typename T>
struct RelationTokens {
  Tensor<T> tokens;  // N^q x D^v
};

template <typename T>
Tensor<T> constant_tensor(const FloatMatrix& m) {
  return Tensor<T>(m.cast<T>());
}

// Single affine map from the provider width to the detector width.
template <typename T>
class FoundationProjection {
 public:
  FoundationProjection() = default;
  FoundationProjection(nn::ParamRegistry<T>& reg, const std::string& name, int in_dim, int out_dim)
      : fc_(reg, name, in_dim, out_dim) {}

  ProjectedFoundationTokens<T> operator()(const FoundationTokens& tokens) const {
    if (tokens.tokens.cols() != fc_.in_features()) {
      throw ShapeError("foundation tokens are " + std::to_string(tokens.tokens.cols()) + " wide, projection expects " +
                       std::to_string(fc_.in_features()));
    }
    return {fc_(constant_tensor<T>(tokens.tokens))};
  }

  const nn::Linear<T>& linear() const { return fc_; }

 private:
  nn::Linear<T> fc_;
};

// HOPD: queries are (P^h + P^o)/2, self-attention in every layer, cross
// attention onto the projected foundation tokens in every other layer
// (layers 0, 2, 4, ...). Foundation keys carry no positional term.
template <typename T>
class HoPromptDecoder {
 public:
  HoPromptDecoder() = default;
  HoPromptDecoder(nn::ParamRegistry<T>& reg, const std::string& name, const ModelConfig& cfg) {
    for (int i = 0; i < cfg.hopd_layers; ++i) {
      layers_.emplace_back(reg, name + ".layers." + std::to_string(i), cfg.d_v, cfg.heads, cfg.ffn_dim, i % 2 == 0);
    }
  }

  // Output of every layer, last one is V^f.
  std::vector<RelationTokens<T>> decode_all(const HOSpatialTokens<T>& prompts,
                                            const ProjectedFoundationTokens<T>& foundation) const {
    if (foundation.tokens.rows() == 0) throw InvalidInput("HOPD needs at least one foundation token");
    if (foundation.tokens.cols() != prompts.human.cols()) throw ShapeError("HOPD width mismatch");
    Tensor<T> x = prompts.pair_prompts();
    std::vector<RelationTokens<T>> outs;
    for (const auto& layer : layers_) {
      x = layer(x, Tensor<T>(), foundation.tokens, Tensor<T>());
      outs.push_back({x});
    }
    if (outs.empty()) outs.push_back({x});
    return outs;
  }

  RelationTokens<T> operator()(const HOSpatialTokens<T>& prompts, const ProjectedFoundationTokens<T>& foundation) const {
    return decode_all(prompts, foundation).back();
  }

  std::size_t depth() const { return layers_.size(); }
  bool layer_has_cross_attention(std::size_t i) const { return layers_.at(i).has_cross_attention(); }

 private:
  std::vector<nn::DecoderLayer<T>> layers_;
};

}  // namespace unihoi
