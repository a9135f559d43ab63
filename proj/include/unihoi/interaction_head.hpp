#pragma once

// Interaction decoder over the encoder memory, V^i / V^f fusion, closed-set
// verb classification, open-category cosine logits and detection scoring.

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "unihoi/autograd.hpp"
#include "unihoi/data_model.hpp"
#include "unihoi/detector_core.hpp"
#include "unihoi/foundation_bridge.hpp"
#include "unihoi/nn.hpp"

namespace unihoi {

template <typename T>
class InteractionDecoder {
 public:
  InteractionDecoder() = default;
  InteractionDecoder(nn::ParamRegistry<T>& reg, const std::string& name, const ModelConfig& cfg) {
    for (int i = 0; i < cfg.interaction_decoder_layers; ++i) {
      layers_.emplace_back(reg, name + ".layers." + std::to_string(i), cfg.d_v, cfg.heads, cfg.ffn_dim, true);
    }
  }

  std::vector<RelationTokens<T>> decode_all(const HOSpatialTokens<T>& prompts, const EncoderMemory<T>& memory) const {
    if (prompts.human.cols() != memory.tokens.cols()) {
      throw ShapeError("interaction decoder: prompt width " + std::to_string(prompts.human.cols()) +
                       " != memory width " + std::to_string(memory.tokens.cols()));
    }
    if (prompts.human.rows() != prompts.object.rows()) throw ShapeError("human/object prompt rows differ");
    Tensor<T> x = prompts.pair_prompts();
    std::vector<RelationTokens<T>> outs;
    for (const auto& layer : layers_) {
      x = layer(x, Tensor<T>(), memory.tokens, memory.pos);
      outs.push_back({x});
    }
    if (outs.empty()) outs.push_back({x});
    return outs;
  }

  // V^i
  RelationTokens<T> operator()(const HOSpatialTokens<T>& prompts, const EncoderMemory<T>& memory) const {
    return decode_all(prompts, memory).back();
  }

 private:
  std::vector<nn::DecoderLayer<T>> layers_;
};

// Concat(V^i, V^f) row-wise: N^q x 2D^v.
template <typename T>
Tensor<T> fuse_relations(const RelationTokens<T>& v_i, const RelationTokens<T>& v_f) {
  if (v_i.tokens.rows() != v_f.tokens.rows()) throw ShapeError("V^i and V^f have different pair counts");
  return ag::concat_cols<T>({v_i.tokens, v_f.tokens});
}

// Feed-forward verb head over the fused relation; raw multi-label logits.
template <typename T>
class VerbClassifier {
 public:
  VerbClassifier() = default;
  VerbClassifier(nn::ParamRegistry<T>& reg, const std::string& name, const ModelConfig& cfg)
      : mlp_(reg, name, {2 * cfg.d_v, cfg.d_v, cfg.num_verbs}) {}

  Tensor<T> operator()(const Tensor<T>& fused) const { return mlp_(fused); }
  Tensor<T> operator()(const RelationTokens<T>& v_i, const RelationTokens<T>& v_f) const {
    return mlp_(fuse_relations(v_i, v_f));
  }

 private:
  nn::Mlp<T> mlp_;
};

// The FC of the open-category logits: fused relation (2D^v) -> text width D^t.
// The same map projects pooled relations onto the foundation embedding for the
// mimic loss, which is what aligns it with the text side.
template <typename T>
class RelationProjection {
 public:
  RelationProjection() = default;
  RelationProjection(nn::ParamRegistry<T>& reg, const std::string& name, const ModelConfig& cfg)
      : fc_(reg, name, 2 * cfg.d_v, cfg.text_dim) {}

  Tensor<T> operator()(const Tensor<T>& fused) const { return fc_(fused); }

  // N^q x T cosine similarities against one text embedding per row of texts.
  Tensor<T> open_logits(const Tensor<T>& fused, const Matrix<T>& texts) const {
    if (texts.cols() != fc_.out_features()) {
      throw ShapeError("text embeddings are " + std::to_string(texts.cols()) + " wide, expected " +
                       std::to_string(fc_.out_features()));
    }
    return ag::cosine_rows(fc_(fused), Tensor<T>(texts));
  }

  Tensor<T> open_logits(const RelationTokens<T>& v_i, const RelationTokens<T>& v_f, const Matrix<T>& texts) const {
    return open_logits(fuse_relations(v_i, v_f), texts);
  }

  Eigen::Index text_dim() const { return fc_.out_features(); }

 private:
  nn::Linear<T> fc_;
};

// Everything one image produces in a forward pass.
template <typename T>
struct DetectorOutputs {
  InstancePredictions<T> instances;
  RelationTokens<T> v_i;
  RelationTokens<T> v_f;
  Tensor<T> fused;        // N^q x 2D^v
  Tensor<T> verb_logits;  // N^q x N^a
  // Per-layer predictions of the earlier decoder layers (only when requested).
  std::vector<InstancePredictions<T>> aux_instances;
  std::vector<Tensor<T>> aux_verb_logits;
};

// ---------------------------------------------------------------------------
// Scoring

struct HoiDetection {
  int query = 0;
  BoxCxcywh human_box{};
  BoxCxcywh object_box{};
  int object_class = 0;
  int verb_class = -1;  // -1 for free-form open texts
  int hoi_class = -1;   // -1 for free-form open texts
  int text_index = -1;  // column of the open logits, -1 in closed mode
  double score = 0;
};

struct ScoringOptions {
  std::size_t top_k = 100;  // 0 keeps everything
  double min_score = 0.0;   // detections must score strictly above this
};

namespace detail {

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline BoxCxcywh row_box(const Eigen::MatrixXd& m, Eigen::Index i) { return {m(i, 0), m(i, 1), m(i, 2), m(i, 3)}; }

inline std::vector<HoiDetection> rank(std::vector<HoiDetection> dets, const ScoringOptions& opts) {
  std::stable_sort(dets.begin(), dets.end(), [](const HoiDetection& a, const HoiDetection& b) { return a.score > b.score; });
  std::erase_if(dets, [&](const HoiDetection& d) { return !(d.score > opts.min_score); });
  if (opts.top_k > 0 && dets.size() > opts.top_k) dets.resize(opts.top_k);
  return dets;
}

}  // namespace detail

// Object probability (softmax, no-object column excluded) times verb
// probability (sigmoid); only registered (verb, object) pairs are emitted.
inline std::vector<HoiDetection> score_closed(const Eigen::MatrixXd& human_boxes, const Eigen::MatrixXd& object_boxes,
                                              const Eigen::MatrixXd& object_logits, const Eigen::MatrixXd& verb_logits,
                                              const CategoryRegistry& reg, const ScoringOptions& opts = {}) {
  const Eigen::MatrixXd obj = detail::softmax_rows(object_logits);
  std::vector<HoiDetection> dets;
  for (Eigen::Index q = 0; q < obj.rows(); ++q) {
    for (int h = 0; h < reg.num_hoi(); ++h) {
      const auto& p = reg.pair(h);
      if (p.object >= obj.cols() - 1 || p.verb >= verb_logits.cols()) continue;
      HoiDetection d;
      d.query = static_cast<int>(q);
      d.human_box = detail::row_box(human_boxes, q);
      d.object_box = detail::row_box(object_boxes, q);
      d.object_class = p.object;
      d.verb_class = p.verb;
      d.hoi_class = h;
      d.score = obj(q, p.object) * sigmoid(verb_logits(q, p.verb));
      dets.push_back(d);
    }
  }
  return detail::rank(std::move(dets), opts);
}

// Open-category scoring. Each text column either names a registered hoi id
// (its object fixes the object probability) or is free-form (-1; the most
// likely real object is used). Cosines are mapped to [0, 1] as (1 + cos) / 2.
inline std::vector<HoiDetection> score_open(const Eigen::MatrixXd& human_boxes, const Eigen::MatrixXd& object_boxes,
                                            const Eigen::MatrixXd& object_logits, const Eigen::MatrixXd& open_logits,
                                            const std::vector<int>& text_hoi, const CategoryRegistry& reg,
                                            const ScoringOptions& opts = {}) {
  if (static_cast<Eigen::Index>(text_hoi.size()) != open_logits.cols()) {
    throw ShapeError("score_open: one hoi id (or -1) per text column is required");
  }
  const Eigen::MatrixXd obj = detail::softmax_rows(object_logits);
  const Eigen::Index real = obj.cols() - 1;
  std::vector<HoiDetection> dets;
  for (Eigen::Index q = 0; q < obj.rows(); ++q) {
    Eigen::Index best = 0;
    obj.row(q).head(real).maxCoeff(&best);
    for (Eigen::Index t = 0; t < open_logits.cols(); ++t) {
      HoiDetection d;
      d.query = static_cast<int>(q);
      d.human_box = detail::row_box(human_boxes, q);
      d.object_box = detail::row_box(object_boxes, q);
      d.text_index = static_cast<int>(t);
      const int h = text_hoi[static_cast<std::size_t>(t)];
      if (h >= 0) {
        const auto& p = reg.pair(h);
        if (p.object >= real) continue;
        d.object_class = p.object;
        d.verb_class = p.verb;
        d.hoi_class = h;
      } else {
        d.object_class = static_cast<int>(best);
      }
      d.score = obj(q, d.object_class) * 0.5 * (1.0 + open_logits(q, t));
      dets.push_back(d);
    }
  }
  return detail::rank(std::move(dets), opts);
}

}  // namespace unihoi
