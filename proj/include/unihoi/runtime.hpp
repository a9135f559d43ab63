#pragma once

// Run configuration, checkpoints and the train / infer / eval drivers.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "unihoi/data_model.hpp"
#include "unihoi/evaluation.hpp"
#include "unihoi/foundation_bridge.hpp"
#include "unihoi/image_io.hpp"
#include "unihoi/knowledge_client.hpp"
#include "unihoi/matching_loss.hpp"
#include "unihoi/model.hpp"
#include "unihoi/nn.hpp"
#include "unihoi/remote.hpp"

namespace unihoi {

namespace fs = std::filesystem;

struct TrainConfig {
  double lr = 1e-4;
  double backbone_lr_multiplier = 0.1;
  double weight_decay = 1e-4;
  double clip_norm = 0.1;
  int epochs = 0;         // when > 0, overrides max_steps
  int max_steps = 2000;
  int batch_size = 4;
  std::uint64_t seed = 0;
  LossWeights weights;
  LossOptions loss;
  bool aux_loss = false;
  int log_every = 1;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  std::string output_dir = "runs/default";
};

struct ProviderConfig {
  std::string kind = "mock";  // mock, remote or cache
  std::string endpoint;
  std::string cache_path;
  std::uint64_t seed = 0x5eed;
  int timeout_ms = 10000;
  int retries = 2;
  std::string api_key_env = "UNIHOI_PROVIDER_KEY";
};

struct DataConfig {
  std::string train;
  std::string test;
  std::string registry;
  std::string split;
  std::optional<SynthSpec> synth;
  std::uint64_t synth_seed = 7;
};

struct EvalConfig {
  std::string setting = "default";
  int scenario = 1;
  std::size_t top_k = 100;
  double min_score = 0.0;
};

struct KnowledgeConfig {
  std::string backend = "fixture";  // fixture or http
  std::string fixture_dir;
  std::string cache_path;
  std::string endpoint;
  std::string api_key_env = "UNIHOI_LLM_KEY";
  int word_limit = 50;
  int timeout_ms = 10000;
  int retries = 2;
  std::string encoder = "mock";  // mock or http
  std::uint64_t encoder_seed = 0;
  std::string encoder_endpoint;
  std::string text_mode = "phrase";
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  ProviderConfig provider;
  DataConfig data;
  EvalConfig eval;
  KnowledgeConfig knowledge;
};

// ---------------------------------------------------------------------------
// Config parsing (YAML is read into JSON, then one strict JSON reader)

namespace detail {

inline nlohmann::json yaml_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& e : n) a.push_back(yaml_to_json(e));
      return a;
    }
    case YAML::NodeType::Map: {
      nlohmann::json o = nlohmann::json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return o;
    }
    case YAML::NodeType::Scalar: {
      const std::string s = n.Scalar();
      if (n.Tag() == "!") return s;  // quoted
      if (s == "true" || s == "True") return true;
      if (s == "false" || s == "False") return false;
      if (s == "null" || s == "~") return nullptr;
      try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used == s.size()) return v;
      } catch (...) {
      }
      try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
      } catch (...) {
      }
      return s;
    }
  }
  return nullptr;
}

inline void check_keys(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(section + " must be a mapping");
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError("unknown key '" + (section.empty() ? k : section + "." + k) + "'");
    }
  }
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key) || j[key].is_null()) return;
  try {
    out = j[key].get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid value for " + section + "." + key);
  }
}

inline std::string resolve(const std::string& p, const fs::path& base) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& root, const fs::path& base_dir = {}) {
  using detail::read;
  RunConfig c;
  if (root.is_null()) return c;
  detail::check_keys(root, "", {"model", "train", "provider", "data", "eval", "knowledge"});
  if (root.contains("model")) {
    const auto& j = root["model"];
    detail::check_keys(j, "model",
                       {"d_v", "n_q", "heads", "ffn_dim", "encoder_layers", "decoder_layers", "instance_decoder_layers",
                        "interaction_decoder_layers", "hopd_layers", "patch_stride", "channels", "num_objects",
                        "num_verbs", "foundation_tokens", "foundation_dim", "text_dim", "variant"});
    auto& m = c.model;
    std::string variant = m.variant;
    read(j, "variant", variant, "model");
    m.apply_variant(variant);
    int dl = -1;
    read(j, "decoder_layers", dl, "model");
    if (dl >= 0) m.instance_decoder_layers = m.interaction_decoder_layers = m.hopd_layers = dl;
    read(j, "d_v", m.d_v, "model");
    read(j, "n_q", m.n_q, "model");
    read(j, "heads", m.heads, "model");
    read(j, "ffn_dim", m.ffn_dim, "model");
    read(j, "encoder_layers", m.encoder_layers, "model");
    read(j, "instance_decoder_layers", m.instance_decoder_layers, "model");
    read(j, "interaction_decoder_layers", m.interaction_decoder_layers, "model");
    read(j, "hopd_layers", m.hopd_layers, "model");
    read(j, "patch_stride", m.patch_stride, "model");
    read(j, "channels", m.channels, "model");
    read(j, "num_objects", m.num_objects, "model");
    read(j, "num_verbs", m.num_verbs, "model");
    read(j, "foundation_tokens", m.foundation_tokens, "model");
    read(j, "foundation_dim", m.foundation_dim, "model");
    read(j, "text_dim", m.text_dim, "model");
  }
  if (root.contains("train")) {
    const auto& j = root["train"];
    detail::check_keys(j, "train",
                       {"lr", "backbone_lr_multiplier", "weight_decay", "clip_norm", "epochs", "max_steps",
                        "batch_size", "seed", "loss_weights", "focal_alpha", "focal_gamma", "no_object_weight",
                        "aux_loss", "log_every", "checkpoint_every", "output_dir"});
    auto& t = c.train;
    read(j, "lr", t.lr, "train");
    read(j, "backbone_lr_multiplier", t.backbone_lr_multiplier, "train");
    read(j, "weight_decay", t.weight_decay, "train");
    read(j, "clip_norm", t.clip_norm, "train");
    read(j, "epochs", t.epochs, "train");
    read(j, "max_steps", t.max_steps, "train");
    read(j, "batch_size", t.batch_size, "train");
    read(j, "seed", t.seed, "train");
    if (j.contains("loss_weights")) {
      std::vector<double> w;
      read(j, "loss_weights", w, "train");
      if (w.size() != 4) throw ConfigError("train.loss_weights needs four values (box, giou, class, mimic)");
      t.weights = {w[0], w[1], w[2], w[3]};
    }
    read(j, "focal_alpha", t.loss.focal_alpha, "train");
    read(j, "focal_gamma", t.loss.focal_gamma, "train");
    read(j, "no_object_weight", t.loss.no_object_weight, "train");
    read(j, "aux_loss", t.aux_loss, "train");
    read(j, "log_every", t.log_every, "train");
    read(j, "checkpoint_every", t.checkpoint_every, "train");
    read(j, "output_dir", t.output_dir, "train");
    t.output_dir = detail::resolve(t.output_dir, base_dir);
  }
  if (root.contains("provider")) {
    const auto& j = root["provider"];
    detail::check_keys(j, "provider", {"kind", "endpoint", "cache_path", "seed", "timeout_ms", "retries", "api_key_env"});
    auto& p = c.provider;
    read(j, "kind", p.kind, "provider");
    read(j, "endpoint", p.endpoint, "provider");
    read(j, "cache_path", p.cache_path, "provider");
    read(j, "seed", p.seed, "provider");
    read(j, "timeout_ms", p.timeout_ms, "provider");
    read(j, "retries", p.retries, "provider");
    read(j, "api_key_env", p.api_key_env, "provider");
    p.cache_path = detail::resolve(p.cache_path, base_dir);
  }
  if (root.contains("data")) {
    const auto& j = root["data"];
    detail::check_keys(j, "data", {"train", "test", "registry", "split", "synth", "synth_seed"});
    auto& d = c.data;
    read(j, "train", d.train, "data");
    read(j, "test", d.test, "data");
    read(j, "registry", d.registry, "data");
    read(j, "split", d.split, "data");
    read(j, "synth_seed", d.synth_seed, "data");
    if (j.contains("synth") && !j["synth"].is_null()) {
      try {
        d.synth = SynthSpec::from_json(j["synth"]);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid data.synth: ") + e.what());
      }
    }
    d.train = detail::resolve(d.train, base_dir);
    d.test = detail::resolve(d.test, base_dir);
    d.registry = detail::resolve(d.registry, base_dir);
    d.split = detail::resolve(d.split, base_dir);
  }
  if (root.contains("eval")) {
    const auto& j = root["eval"];
    detail::check_keys(j, "eval", {"setting", "scenario", "top_k", "min_score"});
    read(j, "setting", c.eval.setting, "eval");
    read(j, "scenario", c.eval.scenario, "eval");
    read(j, "top_k", c.eval.top_k, "eval");
    read(j, "min_score", c.eval.min_score, "eval");
  }
  if (root.contains("knowledge")) {
    const auto& j = root["knowledge"];
    detail::check_keys(j, "knowledge",
                       {"backend", "fixture_dir", "cache_path", "endpoint", "api_key_env", "word_limit", "timeout_ms",
                        "retries", "encoder", "encoder_seed", "encoder_endpoint", "text_mode"});
    auto& k = c.knowledge;
    read(j, "backend", k.backend, "knowledge");
    read(j, "fixture_dir", k.fixture_dir, "knowledge");
    read(j, "cache_path", k.cache_path, "knowledge");
    read(j, "endpoint", k.endpoint, "knowledge");
    read(j, "api_key_env", k.api_key_env, "knowledge");
    read(j, "word_limit", k.word_limit, "knowledge");
    read(j, "timeout_ms", k.timeout_ms, "knowledge");
    read(j, "retries", k.retries, "knowledge");
    read(j, "encoder", k.encoder, "knowledge");
    read(j, "encoder_seed", k.encoder_seed, "knowledge");
    read(j, "encoder_endpoint", k.encoder_endpoint, "knowledge");
    read(j, "text_mode", k.text_mode, "knowledge");
    k.fixture_dir = detail::resolve(k.fixture_dir, base_dir);
    k.cache_path = detail::resolve(k.cache_path, base_dir);
  }
  if (c.train.batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (c.train.lr <= 0) throw ConfigError("train.lr must be positive");
  if (c.train.epochs <= 0 && c.train.max_steps <= 0) throw ConfigError("train needs epochs or max_steps");
  if (c.train.log_every <= 0) throw ConfigError("train.log_every must be positive");
  if (c.eval.scenario != 1 && c.eval.scenario != 2) throw ConfigError("eval.scenario must be 1 or 2");
  parse_hico_setting(c.eval.setting);
  if (c.provider.kind != "mock" && c.provider.kind != "remote" && c.provider.kind != "cache") {
    throw ConfigError("provider.kind must be mock, remote or cache");
  }
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  nlohmann::json j;
  j["model"] = {{"d_v", m.d_v},
                {"n_q", m.n_q},
                {"heads", m.heads},
                {"ffn_dim", m.ffn_dim},
                {"encoder_layers", m.encoder_layers},
                {"instance_decoder_layers", m.instance_decoder_layers},
                {"interaction_decoder_layers", m.interaction_decoder_layers},
                {"hopd_layers", m.hopd_layers},
                {"patch_stride", m.patch_stride},
                {"channels", m.channels},
                {"num_objects", m.num_objects},
                {"num_verbs", m.num_verbs},
                {"foundation_tokens", m.foundation_tokens},
                {"foundation_dim", m.foundation_dim},
                {"text_dim", m.text_dim},
                {"variant", m.variant}};
  j["train"] = {{"lr", t.lr},
                {"backbone_lr_multiplier", t.backbone_lr_multiplier},
                {"weight_decay", t.weight_decay},
                {"clip_norm", t.clip_norm},
                {"epochs", t.epochs},
                {"max_steps", t.max_steps},
                {"batch_size", t.batch_size},
                {"seed", t.seed},
                {"loss_weights", {t.weights.box, t.weights.giou, t.weights.cls, t.weights.mimic}},
                {"focal_alpha", t.loss.focal_alpha},
                {"focal_gamma", t.loss.focal_gamma},
                {"no_object_weight", t.loss.no_object_weight},
                {"aux_loss", t.aux_loss},
                {"log_every", t.log_every},
                {"checkpoint_every", t.checkpoint_every},
                {"output_dir", t.output_dir}};
  const auto& p = c.provider;
  j["provider"] = {{"kind", p.kind},           {"endpoint", p.endpoint}, {"cache_path", p.cache_path},
                   {"seed", p.seed},           {"timeout_ms", p.timeout_ms}, {"retries", p.retries},
                   {"api_key_env", p.api_key_env}};
  const auto& d = c.data;
  j["data"] = {{"train", d.train}, {"test", d.test}, {"registry", d.registry}, {"split", d.split},
               {"synth_seed", d.synth_seed}};
  if (d.synth) {
    j["data"]["synth"] = {{"image_size", d.synth->image_size},
                          {"num_objects", d.synth->num_objects},
                          {"num_verbs", d.synth->num_verbs},
                          {"num_samples", d.synth->num_samples},
                          {"max_triplets", d.synth->max_triplets},
                          {"hoi_weights", d.synth->hoi_weights}};
  }
  j["eval"] = {{"setting", c.eval.setting}, {"scenario", c.eval.scenario}, {"top_k", c.eval.top_k},
               {"min_score", c.eval.min_score}};
  const auto& k = c.knowledge;
  j["knowledge"] = {{"backend", k.backend},       {"fixture_dir", k.fixture_dir},   {"cache_path", k.cache_path},
                    {"endpoint", k.endpoint},     {"api_key_env", k.api_key_env},   {"word_limit", k.word_limit},
                    {"timeout_ms", k.timeout_ms}, {"retries", k.retries},           {"encoder", k.encoder},
                    {"encoder_seed", k.encoder_seed}, {"encoder_endpoint", k.encoder_endpoint},
                    {"text_mode", k.text_mode}};
  return j;
}

inline RunConfig load_run_config(const std::string& path) {
  YAML::Node node;
  try {
    node = YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw ConfigError("cannot read config file " + path);
  } catch (const YAML::Exception& e) {
    throw ConfigError("config " + path + " is not valid YAML: " + e.what());
  }
  return run_config_from_json(detail::yaml_to_json(node), fs::path(path).parent_path());
}

// ---------------------------------------------------------------------------
// Data and services from a config

struct TrainingData {
  std::vector<HoiSample> samples;
  CategoryRegistry registry;
};

inline TrainingData load_training_data(const DataConfig& d) {
  if (d.synth) {
    auto [samples, reg] = generate_synthetic(*d.synth, d.synth_seed);
    return {std::move(samples), std::move(reg)};
  }
  if (d.train.empty() || d.registry.empty()) throw ConfigError("data needs train and registry paths, or synth");
  CategoryRegistry reg = load_registry(d.registry);
  return {load_dataset(d.train, reg), reg};
}

inline std::vector<HoiSample> load_test_data(const DataConfig& d, const CategoryRegistry& reg) {
  if (!d.test.empty()) return load_dataset(d.test, reg);
  if (d.synth) return generate_synthetic(*d.synth, d.synth_seed).first;
  return load_dataset(d.train, reg);
}

inline std::shared_ptr<const FoundationProvider> make_provider(const ProviderConfig& p, const ModelConfig& m) {
  std::shared_ptr<const FoundationProvider> base;
  if (p.kind == "mock" || (p.kind == "cache" && p.endpoint.empty())) {
    base = std::make_shared<MockFoundationProvider>(p.seed, m.foundation_tokens, m.foundation_dim);
  }
  if (p.kind == "remote" || (p.kind == "cache" && !p.endpoint.empty())) {
    if (p.endpoint.empty()) throw ConfigError("provider.endpoint is required for a remote provider");
    base = std::make_shared<RemoteFoundationProvider>(HttpOptions{p.endpoint, p.timeout_ms, p.retries, 50, p.api_key_env},
                                                      m.foundation_tokens, m.foundation_dim);
  }
  if (p.kind != "cache") return base;
  if (p.cache_path.empty()) throw ConfigError("provider.cache_path is required for a cached provider");
  TokenCache cache = fs::exists(p.cache_path) ? TokenCache::load(p.cache_path)
                                              : TokenCache(base->id(), base->num_tokens(), base->dim());
  return std::make_shared<CachedFoundationProvider>(std::move(cache), base);
}

inline std::shared_ptr<TextEncoder> make_text_encoder(const KnowledgeConfig& k, int dim) {
  if (k.encoder == "mock") return std::make_shared<MockTextEncoder>(k.encoder_seed, dim);
  if (k.encoder == "http") {
    if (k.encoder_endpoint.empty()) throw ConfigError("knowledge.encoder_endpoint is required for the http encoder");
    return std::make_shared<HttpTextEncoder>(HttpOptions{k.encoder_endpoint, k.timeout_ms, k.retries, 50, k.api_key_env},
                                             dim);
  }
  throw ConfigError("knowledge.encoder must be mock or http");
}

inline std::shared_ptr<LLMBackend> make_llm_backend(const KnowledgeConfig& k) {
  if (k.backend == "fixture") {
    if (k.fixture_dir.empty()) throw ConfigError("knowledge.fixture_dir is required for the fixture backend");
    return std::make_shared<FixtureBackend>(k.fixture_dir);
  }
  if (k.backend == "http") {
    if (k.endpoint.empty()) throw ConfigError("knowledge.endpoint is required for the http backend");
    return std::make_shared<HttpLlmBackend>(HttpOptions{k.endpoint, k.timeout_ms, 0, 50, k.api_key_env});
  }
  throw ConfigError("knowledge.backend must be fixture or http");
}

// Zero-pads the bottom and right edges up to a multiple of the patch stride.
inline Image pad_to_stride(const Image& img, int stride) {
  const int h = (img.height + stride - 1) / stride * stride;
  const int w = (img.width + stride - 1) / stride * stride;
  if (h == img.height && w == img.width) return img;
  Image out(h, w, img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, x, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct ParamBlob {
  std::string name;
  Eigen::Index rows = 0, cols = 0;
  std::vector<float> value, m, v;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  nlohmann::json config;     // full run configuration
  std::string config_digest;
  nlohmann::json registry;
  std::string split_digest;  // empty when trained on every category
  std::int64_t step = 0;
  std::int64_t optimizer_steps = 0;
  std::vector<ParamBlob> params;
};

// Digest of everything that fixes the meaning of the parameters and the
// optimization problem: architecture, categories and loss settings.
inline std::string config_digest(const RunConfig& c, const CategoryRegistry& reg) {
  const nlohmann::json j = run_config_to_json(c);
  nlohmann::json core = {{"model", j["model"]}, {"registry", reg.to_json()}, {"loss", {j["train"]["loss_weights"],
                          j["train"]["focal_alpha"], j["train"]["focal_gamma"], j["train"]["no_object_weight"],
                          j["train"]["aux_loss"]}}};
  return hex64(fnv1a(core.dump()));
}

namespace detail {

struct ByteWriter {
  std::string bytes;
  void u32(std::uint32_t v) { bytes.append(reinterpret_cast<const char*>(&v), 4); }
  void u64(std::uint64_t v) { bytes.append(reinterpret_cast<const char*>(&v), 8); }
  void str(const std::string& s) {
    u64(s.size());
    bytes += s;
  }
  void floats(const std::vector<float>& f) {
    u64(f.size());
    bytes.append(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
  }
};

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string raw(std::size_t n) {
    if (pos + n > bytes.size()) throw ChecksumError("checkpoint is truncated");
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, raw(4).data(), 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    std::memcpy(&v, raw(8).data(), 8);
    return v;
  }
  std::string str() { return raw(u64()); }
  std::vector<float> floats() {
    const std::uint64_t n = u64();
    const std::string s = raw(n * sizeof(float));
    std::vector<float> f(n);
    std::memcpy(f.data(), s.data(), s.size());
    return f;
  }
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.bytes = "UHCK";
  w.u32(Checkpoint::kVersion);
  w.str(c.config.dump());
  w.str(c.config_digest);
  w.str(c.registry.dump());
  w.str(c.split_digest);
  w.u64(static_cast<std::uint64_t>(c.step));
  w.u64(static_cast<std::uint64_t>(c.optimizer_steps));
  w.u64(c.params.size());
  for (const auto& p : c.params) {
    w.str(p.name);
    w.u64(static_cast<std::uint64_t>(p.rows));
    w.u64(static_cast<std::uint64_t>(p.cols));
    w.floats(p.value);
    w.floats(p.m);
    w.floats(p.v);
  }
  w.u64(fnv1a(w.bytes));
  return w.bytes;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << encode_checkpoint(c);
    if (!out) throw DataError("cannot write checkpoint " + path);
  }
  fs::rename(tmp, path);
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "UHCK") != 0) throw ChecksumError("not a checkpoint file");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != fnv1a(std::string_view(bytes.data(), bytes.size() - 8))) {
    throw ChecksumError("checkpoint checksum mismatch");
  }
  detail::ByteReader r{bytes, 4};
  Checkpoint c;
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  c.config = nlohmann::json::parse(r.str());
  c.config_digest = r.str();
  c.registry = nlohmann::json::parse(r.str());
  c.split_digest = r.str();
  c.step = static_cast<std::int64_t>(r.u64());
  c.optimizer_steps = static_cast<std::int64_t>(r.u64());
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    ParamBlob p;
    p.name = r.str();
    p.rows = static_cast<Eigen::Index>(r.u64());
    p.cols = static_cast<Eigen::Index>(r.u64());
    p.value = r.floats();
    p.m = r.floats();
    p.v = r.floats();
    c.params.push_back(std::move(p));
  }
  return c;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline std::vector<float> to_floats(const ag::Matrix<float>& m) { return {m.data(), m.data() + m.size()}; }

inline Checkpoint capture(const UniHoiModel<float>& model, const nn::AdamW<float>* opt, const RunConfig& cfg,
                          const CategoryRegistry& reg, const std::string& split_digest, std::int64_t step) {
  Checkpoint c;
  c.config = run_config_to_json(cfg);
  c.config_digest = config_digest(cfg, reg);
  c.registry = reg.to_json();
  c.split_digest = split_digest;
  c.step = step;
  const auto& params = model.params().params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ParamBlob b;
    b.name = params[i].first;
    b.rows = params[i].second.rows();
    b.cols = params[i].second.cols();
    b.value = to_floats(params[i].second.value());
    if (opt != nullptr) {
      b.m = to_floats(const_cast<nn::AdamW<float>*>(opt)->first_moments()[i]);
      b.v = to_floats(const_cast<nn::AdamW<float>*>(opt)->second_moments()[i]);
    }
    c.params.push_back(std::move(b));
  }
  if (opt != nullptr) c.optimizer_steps = opt->steps();
  return c;
}

inline void restore(const Checkpoint& c, UniHoiModel<float>& model, nn::AdamW<float>* opt = nullptr) {
  auto& params = model.params().params();
  if (params.size() != c.params.size()) throw DataError("checkpoint has a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamBlob& b = c.params[i];
    auto& [name, t] = params[i];
    if (b.name != name || b.rows != t.rows() || b.cols != t.cols()) {
      throw DataError("checkpoint parameter " + b.name + " does not fit " + name);
    }
    std::copy(b.value.begin(), b.value.end(), t.mutable_value().data());
    if (opt != nullptr && !b.m.empty()) {
      std::copy(b.m.begin(), b.m.end(), opt->first_moments()[i].data());
      std::copy(b.v.begin(), b.v.end(), opt->second_moments()[i].data());
    }
  }
  if (opt != nullptr) opt->set_steps(c.optimizer_steps);
}

// Model, registry and configuration rebuilt from a checkpoint.
struct LoadedModel {
  RunConfig config;
  CategoryRegistry registry;
  std::unique_ptr<UniHoiModel<float>> model;
  Checkpoint checkpoint;
};

inline LoadedModel load_model(const std::string& path) {
  LoadedModel out;
  out.checkpoint = load_checkpoint(path);
  out.config = run_config_from_json(out.checkpoint.config);
  out.registry = CategoryRegistry::from_json(out.checkpoint.registry);
  out.model = std::make_unique<UniHoiModel<float>>(out.config.model, out.config.train.seed);
  restore(out.checkpoint, *out.model);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  std::vector<LossReport> log;
  std::string checkpoint_path;
  std::string log_path;
  std::int64_t steps = 0;
  std::uint64_t provider_checksum_before = 0;
  std::uint64_t provider_checksum_after = 0;
};

struct TrainHooks {
  std::function<void(std::int64_t, const LossReport&)> on_step;
  std::optional<std::string> resume;  // checkpoint to continue from
  const FoundationProvider* provider = nullptr;  // overrides the configured provider
};

// Index of the i-th sample of the global sample stream; each epoch is a fresh
// seeded permutation so a resumed run sees the same order.
inline std::size_t sample_at(std::uint64_t seed, std::size_t n, std::uint64_t position) {
  const std::uint64_t epoch = position / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  SplitMix rng(splitmix64(seed ^ 0x9e3779b97f4a7c15ULL) + epoch);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm[position % n];
}

inline std::map<std::string, double> lr_multipliers(const TrainConfig& t) {
  return {{"backbone", t.backbone_lr_multiplier}};
}

inline std::int64_t total_steps(const TrainConfig& t, std::size_t num_samples) {
  if (t.epochs > 0) {
    const auto per_epoch = (num_samples + static_cast<std::size_t>(t.batch_size) - 1) / static_cast<std::size_t>(t.batch_size);
    return static_cast<std::int64_t>(per_epoch) * t.epochs;
  }
  return t.max_steps;
}

inline TrainResult train(RunConfig cfg, const TrainHooks& hooks = {}) {
  TrainingData data = load_training_data(cfg.data);
  std::string split_digest;
  if (!cfg.data.split.empty()) {
    const ZeroShotSplit split = load_split(cfg.data.split);
    split_digest = split.digest();
    data.samples = exclude_unseen(data.samples, split);
  }
  if (data.samples.empty()) throw DataError("training set is empty");
  cfg.model.num_objects = data.registry.num_objects();
  cfg.model.num_verbs = data.registry.num_verbs();
  cfg.model.validate();

  std::shared_ptr<const FoundationProvider> owned;
  const FoundationProvider* provider = hooks.provider;
  if (provider == nullptr) {
    owned = make_provider(cfg.provider, cfg.model);
    provider = owned.get();
  }
  TrainResult result;
  result.provider_checksum_before = provider->state_checksum();

  // The provider is frozen, so its features are computed once per image.
  std::vector<Image> images;
  std::vector<FoundationTokens> features;
  std::vector<std::vector<PairTarget>> targets;
  for (const auto& s : data.samples) {
    images.push_back(pad_to_stride(s.image, cfg.model.patch_stride));
    features.push_back(provide_features(s.image, *provider, s.image_id));
    targets.push_back(merge_targets(s.triplets));
  }

  UniHoiModel<float> model(cfg.model, cfg.train.seed);
  nn::AdamWOptions ao;
  ao.lr = cfg.train.lr;
  ao.weight_decay = cfg.train.weight_decay;
  ao.clip_norm = cfg.train.clip_norm;
  nn::AdamW<float> opt(model.params(), ao, lr_multipliers(cfg.train));

  std::int64_t start = 0;
  if (hooks.resume) {
    const Checkpoint ck = load_checkpoint(*hooks.resume);
    if (ck.config_digest != config_digest(cfg, data.registry)) {
      throw ConfigError("refusing to resume: checkpoint " + *hooks.resume + " was trained with a different configuration");
    }
    if (ck.split_digest != split_digest) throw ConfigError("refusing to resume: checkpoint split differs");
    restore(ck, model, &opt);
    start = ck.step;
  }

  fs::create_directories(cfg.train.output_dir);
  result.log_path = (fs::path(cfg.train.output_dir) / "loss.jsonl").string();
  std::ofstream log(result.log_path, start > 0 ? std::ios::app : std::ios::trunc);
  const std::int64_t steps = total_steps(cfg.train, data.samples.size());
  const std::size_t batch = static_cast<std::size_t>(cfg.train.batch_size);
  auto ckpt_path = [&](const std::string& name) { return (fs::path(cfg.train.output_dir) / name).string(); };

  auto diverged = [&](std::int64_t step, const std::string& why) {
    const std::string last = ckpt_path("checkpoint-last-finite.bin");
    save_checkpoint(last, capture(model, &opt, cfg, data.registry, split_digest, step - 1));
    return DivergenceError(why + " at step " + std::to_string(step) + "; last finite state saved to " + last);
  };

  for (std::int64_t step = start + 1; step <= steps; ++step) {
    std::vector<DetectorOutputs<float>> outs;
    std::vector<std::vector<PairTarget>> tg;
    std::vector<MatchAssignment> assign;
    std::vector<const FoundationTokens*> fts;
    std::vector<std::vector<MatchAssignment>> aux_assign;
    std::optional<LossTerms<float>> terms;
    // Saturated activations surface as NaN checks or degenerate boxes before
    // the loss itself turns non-finite; both mean the run has diverged.
    try {
      for (std::size_t b = 0; b < batch; ++b) {
        const std::uint64_t pos = static_cast<std::uint64_t>(step - 1) * batch + b;
        const std::size_t i = sample_at(cfg.train.seed, data.samples.size(), pos);
        outs.push_back(model.forward(images[i], features[i], cfg.train.aux_loss));
        const auto& o = outs.back();
        assign.push_back(match(view_of(o.instances, o.verb_logits), targets[i], cfg.train.weights, cfg.train.loss));
        if (cfg.train.aux_loss) {
          aux_assign.resize(o.aux_instances.size());
          for (std::size_t l = 0; l < o.aux_instances.size(); ++l) {
            aux_assign[l].push_back(match(view_of(o.aux_instances[l], o.aux_verb_logits[l]), targets[i],
                                          cfg.train.weights, cfg.train.loss));
          }
        }
        tg.push_back(targets[i]);
        fts.push_back(&features[i]);
      }
      model.params().zero_grad();
      terms.emplace(
          compute_loss(outs, tg, assign, fts, model.relation_projection(), cfg.train.weights, cfg.train.loss, aux_assign));
    } catch (const NumericError& e) {
      throw diverged(step, e.what());
    } catch (const DomainError& e) {
      throw diverged(step, e.what());
    }
    const LossReport rep = terms->report();
    if (!std::isfinite(rep.total)) throw diverged(step, "non-finite loss");
    terms->total.backward();
    opt.step();
    if (step % cfg.train.log_every == 0 || step == steps) {
      log << rep.to_json(step).dump() << "\n";
      log.flush();
    }
    result.log.push_back(rep);
    if (hooks.on_step) hooks.on_step(step, rep);
    if (cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0) {
      save_checkpoint(ckpt_path("checkpoint-" + std::to_string(step) + ".bin"),
                      capture(model, &opt, cfg, data.registry, split_digest, step));
    }
  }
  result.steps = steps;
  result.checkpoint_path = ckpt_path("checkpoint.bin");
  save_checkpoint(result.checkpoint_path, capture(model, &opt, cfg, data.registry, split_digest, steps));
  result.provider_checksum_after = provider->state_checksum();
  if (result.provider_checksum_after != result.provider_checksum_before) {
    throw ProviderError("foundation provider state changed during training");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Inference

struct InferOptions {
  std::string image_path;
  std::vector<std::string> texts;
  bool open = false;
  std::string out_dir = ".";
  std::optional<ScoringOptions> scoring;
  std::size_t draw_top = 5;
};

struct InferResult {
  std::vector<HoiDetection> detections;
  nlohmann::json json;
  std::string json_path;
  std::string image_path;
};

inline nlohmann::json detection_json(const HoiDetection& d, const CategoryRegistry& reg, int width, int height,
                                     const std::vector<std::string>& texts) {
  nlohmann::json j = {{"query", d.query},
                      {"h_box", pixel_corners(d.human_box, width, height)},
                      {"o_box", pixel_corners(d.object_box, width, height)},
                      {"object", reg.object_name(d.object_class)},
                      {"hoi", d.hoi_class},
                      {"score", d.score}};
  j["verb"] = d.verb_class >= 0 ? nlohmann::json(reg.verb_name(d.verb_class)) : nlohmann::json(nullptr);
  if (d.text_index >= 0) j["text"] = texts.at(static_cast<std::size_t>(d.text_index));
  return j;
}

inline InferResult infer(const LoadedModel& lm, const InferOptions& opts, const FoundationProvider* provider = nullptr,
                         const TextEncoder* encoder = nullptr) {
  const Image raw = read_ppm(opts.image_path);
  const Image image = pad_to_stride(raw, lm.config.model.patch_stride);
  std::shared_ptr<const FoundationProvider> owned;
  if (provider == nullptr) {
    owned = make_provider(lm.config.provider, lm.config.model);
    provider = owned.get();
  }
  const std::string image_id = fs::path(opts.image_path).stem().string();
  const FoundationTokens ft = provide_features(raw, *provider, image_id);
  const DetectorOutputs<float> out = lm.model->forward(image, ft);
  const ScoringOptions scoring = opts.scoring.value_or(ScoringOptions{lm.config.eval.top_k, lm.config.eval.min_score});

  InferResult res;
  if (opts.open) {
    if (opts.texts.empty()) throw InvalidInput("open-category inference needs at least one text");
    std::shared_ptr<TextEncoder> own_enc;
    if (encoder == nullptr) {
      own_enc = make_text_encoder(lm.config.knowledge, lm.config.model.text_dim);
      encoder = own_enc.get();
    }
    ag::Matrix<float> texts(static_cast<Eigen::Index>(opts.texts.size()), lm.config.model.text_dim);
    std::vector<int> text_hoi;
    for (std::size_t t = 0; t < opts.texts.size(); ++t) {
      const TextEmbedding e = embed_text(opts.texts[t], *encoder);
      if (e.vector.size() != texts.cols()) throw EncodingError("text embedding width differs from the model text width");
      texts.row(static_cast<Eigen::Index>(t)) = e.vector.cast<float>();
      int hoi = -1;
      for (int h = 0; h < lm.registry.num_hoi(); ++h) {
        if (lm.registry.phrase(h) == opts.texts[t]) hoi = h;
      }
      text_hoi.push_back(hoi);
    }
    res.detections = lm.model->detect_open(out, texts, text_hoi, lm.registry, scoring);
  } else {
    res.detections = lm.model->detect_closed(out, lm.registry, scoring);
  }

  res.json = {{"image", fs::path(opts.image_path).filename().string()},
              {"width", raw.width},
              {"height", raw.height},
              {"mode", opts.open ? "open" : "closed"},
              {"detections", nlohmann::json::array()}};
  for (const auto& d : res.detections) {
    res.json["detections"].push_back(detection_json(d, lm.registry, image.width, image.height, opts.texts));
  }
  fs::create_directories(opts.out_dir);
  res.json_path = (fs::path(opts.out_dir) / (image_id + ".detections.json")).string();
  res.image_path = (fs::path(opts.out_dir) / (image_id + ".annotated.ppm")).string();
  std::ofstream(res.json_path) << res.json.dump(2) << "\n";

  Image annotated = raw;
  const std::size_t n = std::min(opts.draw_top, res.detections.size());
  for (std::size_t i = n; i-- > 0;) {
    const auto& d = res.detections[i];
    draw_box(annotated, pixel_corners(d.human_box, image.width, image.height), {1.0f, 0.2f, 0.2f});
    draw_box(annotated, pixel_corners(d.object_box, image.width, image.height), {0.2f, 0.4f, 1.0f});
  }
  write_ppm(res.image_path, annotated);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::map<std::string, APReport> columns;  // Full, Seen, Unseen; absent partitions are skipped
  APReport default_setting;
  APReport known_objects;
  VcocoReport vcoco;
  nlohmann::json json;
};

inline std::vector<Detection> detect_dataset(const LoadedModel& lm, const std::vector<HoiSample>& samples,
                                             const FoundationProvider& provider, const ScoringOptions& scoring) {
  std::vector<Detection> dets;
  for (const auto& s : samples) {
    const Image img = pad_to_stride(s.image, lm.config.model.patch_stride);
    const FoundationTokens ft = provide_features(s.image, provider, s.image_id);
    const auto out = lm.model->forward(img, ft);
    for (const auto& d : lm.model->detect_closed(out, lm.registry, scoring)) {
      dets.push_back({s.image_id, pixel_corners(d.human_box, img.width, img.height),
                      pixel_corners(d.object_box, img.width, img.height), d.hoi_class, d.score});
    }
  }
  return dets;
}

// Ground truths are scored against the stride-padded frame the model sees;
// padding only extends the bottom and right edges, so pixel corners coincide.
inline EvalResult run_eval(const LoadedModel& lm, const std::optional<std::string>& split_path,
                           const std::string& out_dir, const RunConfig* overrides = nullptr,
                           const FoundationProvider* provider = nullptr) {
  const RunConfig& cfg = overrides != nullptr ? *overrides : lm.config;
  std::optional<ZeroShotSplit> split;
  if (split_path) {
    split = load_split(*split_path);
    if (split->digest() != lm.checkpoint.split_digest) {
      throw ContaminationError("split " + *split_path + " (digest " + split->digest() +
                               ") does not match the split the checkpoint was trained with (" +
                               (lm.checkpoint.split_digest.empty() ? std::string("none") : lm.checkpoint.split_digest) +
                               "); unseen categories may have been seen in training");
    }
  }
  std::shared_ptr<const FoundationProvider> owned;
  if (provider == nullptr) {
    owned = make_provider(lm.config.provider, lm.config.model);
    provider = owned.get();
  }
  TrainingData train = load_training_data(cfg.data);
  if (split) train.samples = exclude_unseen(train.samples, *split);
  const std::map<int, int> counts = count_hoi(train.samples);
  const std::vector<HoiSample> test = load_test_data(cfg.data, lm.registry);

  // Ranking all pairs avoids truncating recall; top_k applies per image.
  const ScoringOptions scoring{cfg.eval.top_k, cfg.eval.min_score};
  const std::vector<Detection> dets = detect_dataset(lm, test, *provider, scoring);
  std::vector<GroundTruth> gts;
  for (const auto& s : test) {
    auto g = ground_truths(s);
    gts.insert(gts.end(), g.begin(), g.end());
  }

  EvalResult r;
  const HicoSetting setting = parse_hico_setting(cfg.eval.setting);
  r.default_setting = evaluate_hico(dets, gts, lm.registry, counts, HicoSetting::kDefault);
  r.known_objects = evaluate_hico(dets, gts, lm.registry, counts, HicoSetting::kKnownObjects);
  r.vcoco = evaluate_vcoco(dets, gts, cfg.eval.scenario);
  r.columns["Full"] = setting == HicoSetting::kDefault ? r.default_setting : r.known_objects;
  if (split) {
    const std::vector<int> seen(split->seen_hoi_ids.begin(), split->seen_hoi_ids.end());
    const std::vector<int> unseen(split->unseen_hoi_ids.begin(), split->unseen_hoi_ids.end());
    if (!seen.empty()) r.columns["Seen"] = evaluate_hico(dets, gts, lm.registry, counts, setting, seen);
    if (!unseen.empty()) r.columns["Unseen"] = evaluate_hico(dets, gts, lm.registry, counts, setting, unseen);
  }
  r.json = {{"setting", cfg.eval.setting},
            {"default", r.default_setting.to_json()},
            {"known_objects", r.known_objects.to_json()},
            {"vcoco", r.vcoco.to_json()},
            {"columns", nlohmann::json::object()}};
  for (const char* col : {"Full", "Seen", "Unseen"}) {
    auto it = r.columns.find(col);
    if (it != r.columns.end() && it->second.full) r.json["columns"][col] = *it->second.full;
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / "report.json") << r.json.dump(2) << "\n";
    std::ofstream(fs::path(out_dir) / "report.csv") << hico_csv({r.default_setting, r.known_objects});
    save_detections((fs::path(out_dir) / "detections.jsonl").string(), dets);
  }
  return r;
}

}  // namespace unihoi
