#pragma once

// Tiers one and two: patch embedding, transformer encoder, paired instance
// decoder and the instance detection heads.

#include <string>
#include <vector>

#include "unihoi/autograd.hpp"
#include "unihoi/model_config.hpp"
#include "unihoi/nn.hpp"

namespace unihoi {

using ag::Matrix;
using ag::Tensor;

template <typename T>
struct PatchSequence {
  Tensor<T> tokens;  // N^v x D^v, projection plus position embedding
  int rows = 0;
  int cols = 0;
};

template <typename T>
struct EncoderMemory {
  Tensor<T> tokens;  // N^v x D^v
  Tensor<T> pos;     // fixed position embedding of the grid, re-added to decoder keys
};

template <typename T>
struct QueryBank {
  Tensor<T> human;             // Q^h
  Tensor<T> object;            // Q^o
  Tensor<T> position_guided;   // Q^g, shared by the two streams
};

template <typename T>
struct HOSpatialTokens {
  Tensor<T> human;   // P^h
  Tensor<T> object;  // P^o

  // P^ho, the 2N^q x D^v stack of both streams.
  Tensor<T> stacked() const { return ag::concat_rows<T>({human, object}); }
  // (P^h + P^o) / 2, the query input of both relation decoders.
  Tensor<T> pair_prompts() const { return (human + object) * T(0.5); }
};

template <typename T>
struct InstancePredictions {
  Tensor<T> human_boxes;    // N^q x 4, cxcywh in [0,1]
  Tensor<T> object_boxes;   // N^q x 4
  Tensor<T> object_logits;  // N^q x (N^c + 1); last column is no-object
};

// Strided patchify followed by a shared linear projection. Stands in for the
// CNN + 1x1 projection; anything producing an N^v x D^v grid fits here.
template <typename T>
class PatchEmbedding {
 public:
  PatchEmbedding() = default;
  PatchEmbedding(nn::ParamRegistry<T>& reg, const std::string& name, int stride, int channels, int dim)
      : proj_(reg, name + ".proj", static_cast<Eigen::Index>(stride) * stride * channels, dim),
        stride_(stride),
        channels_(channels),
        dim_(dim) {}

  // Raw patch matrix, (H/s * W/s) x (s*s*C), patches row-major over the grid.
  Matrix<T> patchify(const Image& image) const {
    if (image.channels != channels_) {
      throw ShapeError("image has " + std::to_string(image.channels) + " channels, expected " +
                       std::to_string(channels_));
    }
    if (image.height % stride_ != 0 || image.width % stride_ != 0 || image.height == 0 || image.width == 0) {
      throw ShapeError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                       " is not divisible by the patch stride " + std::to_string(stride_));
    }
    const int rows = image.height / stride_;
    const int cols = image.width / stride_;
    Matrix<T> patches(static_cast<Eigen::Index>(rows) * cols, static_cast<Eigen::Index>(stride_) * stride_ * channels_);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const Eigen::Index p = static_cast<Eigen::Index>(r) * cols + c;
        Eigen::Index k = 0;
        for (int dy = 0; dy < stride_; ++dy) {
          for (int dx = 0; dx < stride_; ++dx) {
            for (int ch = 0; ch < channels_; ++ch) {
              patches(p, k++) = static_cast<T>(image.at(r * stride_ + dy, c * stride_ + dx, ch));
            }
          }
        }
      }
    }
    return patches;
  }

  PatchSequence<T> operator()(const Image& image) const {
    PatchSequence<T> seq;
    seq.rows = image.height / stride_;
    seq.cols = image.width / stride_;
    Tensor<T> patches(patchify(image));
    Tensor<T> pos(nn::sinusoidal_position_2d<T>(seq.rows, seq.cols, dim_));
    seq.tokens = proj_(patches) + pos;
    return seq;
  }

  const nn::Linear<T>& projection() const { return proj_; }
  int stride() const { return stride_; }

 private:
  nn::Linear<T> proj_;
  int stride_ = 16;
  int channels_ = 3;
  int dim_ = 0;
};

template <typename T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(nn::ParamRegistry<T>& reg, const std::string& name, const ModelConfig& cfg) {
    for (int i = 0; i < cfg.encoder_layers; ++i) {
      layers_.emplace_back(reg, name + ".layers." + std::to_string(i), cfg.d_v, cfg.heads, cfg.ffn_dim);
    }
  }

  EncoderMemory<T> operator()(const PatchSequence<T>& patches) const {
    if (!patches.tokens.value().allFinite()) throw NumericError("encoder input contains non-finite values");
    EncoderMemory<T> mem;
    mem.pos = Tensor<T>(nn::sinusoidal_position_2d<T>(patches.rows, patches.cols, patches.tokens.cols()));
    Tensor<T> x = patches.tokens;
    for (const auto& layer : layers_) x = layer(x);
    mem.tokens = x;
    return mem;
  }

  std::size_t depth() const { return layers_.size(); }

 private:
  std::vector<nn::EncoderLayer<T>> layers_;
};

// Decodes the human and object streams jointly (one self-attention over all
// 2N^q slots). Q^g is added to both streams at every layer, which ties row i of
// P^h to row i of P^o.
template <typename T>
class InstanceDecoder {
 public:
  InstanceDecoder() = default;
  InstanceDecoder(nn::ParamRegistry<T>& reg, const std::string& name, const ModelConfig& cfg) {
    for (int i = 0; i < cfg.instance_decoder_layers; ++i) {
      layers_.emplace_back(reg, name + ".layers." + std::to_string(i), cfg.d_v, cfg.heads, cfg.ffn_dim, true);
    }
  }

  HOSpatialTokens<T> operator()(const EncoderMemory<T>& memory, const QueryBank<T>& queries) const {
    return decode_all(memory, queries).back();
  }

  // Output of every layer; the last entry is the decoder output.
  std::vector<HOSpatialTokens<T>> decode_all(const EncoderMemory<T>& memory, const QueryBank<T>& queries) const {
    const Eigen::Index nq = queries.human.rows();
    if (nq == 0) throw ConfigError("instance decoder needs at least one query (n_q = 0)");
    if (queries.object.rows() != nq || queries.position_guided.rows() != nq) {
      throw ShapeError("query banks disagree on n_q");
    }
    if (queries.human.cols() != memory.tokens.cols()) throw ShapeError("query width differs from memory width");
    Tensor<T> query_pos =
        ag::concat_rows<T>({queries.human + queries.position_guided, queries.object + queries.position_guided});
    Tensor<T> tgt = Tensor<T>::zeros(2 * nq, memory.tokens.cols());
    std::vector<HOSpatialTokens<T>> outs;
    for (const auto& layer : layers_) {
      tgt = layer(tgt, query_pos, memory.tokens, memory.pos);
      outs.push_back({ag::slice_rows(tgt, 0, nq), ag::slice_rows(tgt, nq, nq)});
    }
    if (outs.empty()) outs.push_back({ag::slice_rows(query_pos, 0, nq), ag::slice_rows(query_pos, nq, nq)});
    return outs;
  }

 private:
  std::vector<nn::DecoderLayer<T>> layers_;
};

template <typename T>
class InstanceHeads {
 public:
  InstanceHeads() = default;
  InstanceHeads(nn::ParamRegistry<T>& reg, const std::string& name, const ModelConfig& cfg)
      : human_box_(reg, name + ".human_box", {cfg.d_v, cfg.d_v, cfg.d_v, 4}),
        object_box_(reg, name + ".object_box", {cfg.d_v, cfg.d_v, cfg.d_v, 4}),
        object_class_(reg, name + ".object_class", cfg.d_v, cfg.num_objects + 1) {}

  InstancePredictions<T> operator()(const HOSpatialTokens<T>& tokens) const {
    return {ag::sigmoid(human_box_(tokens.human)), ag::sigmoid(object_box_(tokens.object)),
            object_class_(tokens.object)};
  }

 private:
  nn::Mlp<T> human_box_;
  nn::Mlp<T> object_box_;
  nn::Linear<T> object_class_;
};

// Tiers one and two bundled: image -> memory -> HO spatial tokens -> instances.
template <typename T>
class DetectorCore {
 public:
  DetectorCore() = default;
  DetectorCore(nn::ParamRegistry<T>& reg, const ModelConfig& cfg)
      : embed_(reg, "backbone", cfg.patch_stride, cfg.channels, cfg.d_v),
        encoder_(reg, "encoder", cfg),
        queries_{reg.add("queries.human", cfg.n_q, cfg.d_v, nn::Init::kNormal),
                 reg.add("queries.object", cfg.n_q, cfg.d_v, nn::Init::kNormal),
                 reg.add("queries.position_guided", cfg.n_q, cfg.d_v, nn::Init::kNormal)},
        instance_decoder_(reg, "instance_decoder", cfg),
        heads_(reg, "instance_heads", cfg) {}

  PatchSequence<T> embed_patches(const Image& image) const { return embed_(image); }
  EncoderMemory<T> encode(const PatchSequence<T>& patches) const { return encoder_(patches); }
  HOSpatialTokens<T> decode_instances(const EncoderMemory<T>& memory) const {
    return instance_decoder_(memory, queries_);
  }
  HOSpatialTokens<T> decode_instances(const EncoderMemory<T>& memory, const QueryBank<T>& queries) const {
    return instance_decoder_(memory, queries);
  }
  std::vector<HOSpatialTokens<T>> decode_instances_all(const EncoderMemory<T>& memory) const {
    return instance_decoder_.decode_all(memory, queries_);
  }
  InstancePredictions<T> predict_instances(const HOSpatialTokens<T>& tokens) const { return heads_(tokens); }

  const QueryBank<T>& queries() const { return queries_; }
  const PatchEmbedding<T>& embedding() const { return embed_; }

 private:
  PatchEmbedding<T> embed_;
  TransformerEncoder<T> encoder_;
  QueryBank<T> queries_;
  InstanceDecoder<T> instance_decoder_;
  InstanceHeads<T> heads_;
};

}  // namespace unihoi
