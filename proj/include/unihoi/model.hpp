#pragma once

// The assembled network: detector core, foundation projection, HOPD,
// interaction decoder, verb head and the relation projection, all sharing one
// parameter registry.

#include <cstdint>
#include <string>
#include <vector>

#include "unihoi/detector_core.hpp"
#include "unihoi/foundation_bridge.hpp"
#include "unihoi/interaction_head.hpp"
#include "unihoi/model_config.hpp"
#include "unihoi/nn.hpp"

namespace unihoi {

template <typename T>
class UniHoiModel {
 public:
  UniHoiModel(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_((cfg.validate(), cfg)),
        reg_(seed),
        detector_(reg_, cfg_),
        projection_(reg_, "foundation_projection", cfg_.foundation_dim, cfg_.d_v),
        hopd_(reg_, "hopd", cfg_),
        interaction_(reg_, "interaction_decoder", cfg_),
        verbs_(reg_, "verb_classifier", cfg_),
        relation_(reg_, "relation_projection", cfg_) {}

  // Parameter tensors are shared handles; a copy would alias the original.
  UniHoiModel(const UniHoiModel&) = delete;
  UniHoiModel& operator=(const UniHoiModel&) = delete;

  DetectorOutputs<T> forward(const Image& image, const FoundationTokens& foundation, bool with_aux = false) const {
    const EncoderMemory<T> memory = detector_.encode(detector_.embed_patches(image));
    const std::vector<HOSpatialTokens<T>> inst_layers = detector_.decode_instances_all(memory);
    const HOSpatialTokens<T>& spatial = inst_layers.back();
    const ProjectedFoundationTokens<T> projected = projection_(foundation);

    DetectorOutputs<T> out;
    out.instances = detector_.predict_instances(spatial);
    if (!with_aux) {
      out.v_f = hopd_(spatial, projected);
      out.v_i = interaction_(spatial, memory);
    } else {
      const auto f_layers = hopd_.decode_all(spatial, projected);
      const auto i_layers = interaction_.decode_all(spatial, memory);
      out.v_f = f_layers.back();
      out.v_i = i_layers.back();
      const std::size_t depth = std::min({inst_layers.size(), f_layers.size(), i_layers.size()});
      for (std::size_t l = 0; l + 1 < depth; ++l) {
        out.aux_instances.push_back(detector_.predict_instances(inst_layers[l]));
        out.aux_verb_logits.push_back(verbs_(fuse_relations(i_layers[l], f_layers[l])));
      }
    }
    out.fused = fuse_relations(out.v_i, out.v_f);
    out.verb_logits = verbs_(out.fused);
    return out;
  }

  Tensor<T> open_logits(const DetectorOutputs<T>& out, const Matrix<T>& texts) const {
    return relation_.open_logits(out.fused, texts);
  }

  std::vector<HoiDetection> detect_closed(const DetectorOutputs<T>& out, const CategoryRegistry& reg,
                                          const ScoringOptions& opts = {}) const {
    const PredictionParts p = parts(out);
    return score_closed(p.human, p.object, p.logits, out.verb_logits.value().template cast<double>(), reg, opts);
  }

  std::vector<HoiDetection> detect_open(const DetectorOutputs<T>& out, const Matrix<T>& texts,
                                        const std::vector<int>& text_hoi, const CategoryRegistry& reg,
                                        const ScoringOptions& opts = {}) const {
    const PredictionParts p = parts(out);
    return score_open(p.human, p.object, p.logits, open_logits(out, texts).value().template cast<double>(), text_hoi,
                      reg, opts);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamRegistry<T>& params() { return reg_; }
  const nn::ParamRegistry<T>& params() const { return reg_; }
  const DetectorCore<T>& detector() const { return detector_; }
  const FoundationProjection<T>& projection() const { return projection_; }
  const HoPromptDecoder<T>& hopd() const { return hopd_; }
  const InteractionDecoder<T>& interaction() const { return interaction_; }
  const VerbClassifier<T>& verb_classifier() const { return verbs_; }
  const RelationProjection<T>& relation_projection() const { return relation_; }

 private:
  struct PredictionParts {
    Eigen::MatrixXd human, object, logits;
  };
  static PredictionParts parts(const DetectorOutputs<T>& out) {
    return {out.instances.human_boxes.value().template cast<double>(),
            out.instances.object_boxes.value().template cast<double>(),
            out.instances.object_logits.value().template cast<double>()};
  }

  ModelConfig cfg_;
  nn::ParamRegistry<T> reg_;
  DetectorCore<T> detector_;
  FoundationProjection<T> projection_;
  HoPromptDecoder<T> hopd_;
  InteractionDecoder<T> interaction_;
  VerbClassifier<T> verbs_;
  RelationProjection<T> relation_;
};

}  // namespace unihoi
