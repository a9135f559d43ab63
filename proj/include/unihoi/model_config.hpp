#pragma once

#include <string>

#include "unihoi/common.hpp"

namespace unihoi {

// Shape of the whole network. Defaults are the full-size contract; desk-scale
// runs shrink d_v, n_q and the image size from the run configuration.
struct ModelConfig {
  int d_v = 256;                  // detector width
  int n_q = 64;                   // paired query slots
  int heads = 8;
  int ffn_dim = 1024;
  int encoder_layers = 6;
  int instance_decoder_layers = 3;
  int interaction_decoder_layers = 3;
  int hopd_layers = 3;            // mirrors the interaction decoder unless set explicitly
  int patch_stride = 16;
  int channels = 3;
  int num_objects = 80;           // N^c, excluding the no-object slot
  int num_verbs = 117;            // N^a
  int foundation_tokens = 32;     // N^f
  int foundation_dim = 768;       // D^f
  int text_dim = 768;             // D^t
  std::string variant = "s";      // s, m or l; l implies 6-layer decoders

  void validate() const {
    auto positive = [](int v, const char* what) {
      if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(d_v, "model.d_v");
    positive(n_q, "model.n_q");
    positive(heads, "model.heads");
    positive(ffn_dim, "model.ffn_dim");
    positive(patch_stride, "model.patch_stride");
    positive(channels, "model.channels");
    positive(num_objects, "model.num_objects");
    positive(num_verbs, "model.num_verbs");
    positive(foundation_tokens, "model.foundation_tokens");
    positive(foundation_dim, "model.foundation_dim");
    positive(text_dim, "model.text_dim");
    if (d_v % heads != 0) throw ConfigError("model.d_v must be divisible by model.heads");
    if (d_v % 4 != 0) throw ConfigError("model.d_v must be divisible by 4 for 2-D position embeddings");
    if (encoder_layers < 0 || instance_decoder_layers < 0 || interaction_decoder_layers < 0 || hopd_layers < 0) {
      throw ConfigError("layer counts must be non-negative");
    }
    if (variant != "s" && variant != "m" && variant != "l") throw ConfigError("model.variant must be s, m or l");
    if (variant == "l" && (instance_decoder_layers != 6 || interaction_decoder_layers != 6 || hopd_layers != 6)) {
      throw ConfigError("variant l requires 6 layers in every decoder");
    }
  }

  // Applies the decoder depth of a named variant.
  void apply_variant(const std::string& v) {
    variant = v;
    const int depth = v == "l" ? 6 : 3;
    instance_decoder_layers = interaction_decoder_layers = hopd_layers = depth;
  }
};

}  // namespace unihoi
