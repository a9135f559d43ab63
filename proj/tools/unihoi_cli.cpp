// unihoi command-line entry point.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "unihoi/runtime.hpp"

namespace fs = std::filesystem;
using namespace unihoi;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kProvider = 4, kDivergence = 5 };

nlohmann::json read_json_or_yaml(const std::string& path) {
  if (path.ends_with(".yaml") || path.ends_with(".yml")) {
    try {
      return unihoi::detail::yaml_to_json(YAML::LoadFile(path));
    } catch (const YAML::Exception& e) {
      throw ConfigError("cannot read " + path + ": " + e.what());
    }
  }
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + " is not valid JSON: " + e.what());
  }
}

std::map<int, int> read_counts(const std::string& path, const CategoryRegistry& reg) {
  if (path.ends_with(".jsonl")) return count_hoi(load_dataset(path, reg));
  std::ifstream in(path);
  if (!in) throw DataError("cannot open counts file " + path);
  std::map<int, int> counts;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.is_array()) {  // [[hoi, count], ...]
      for (const auto& pair : j) counts[pair.at(0).get<int>()] = pair.at(1).get<int>();
    } else {
      for (const auto& [k, v] : j.items()) counts[std::stoi(k)] = v.get<int>();
    }
  } catch (const std::exception& e) {
    throw DataError("counts file " + path + " must map hoi ids to counts: " + e.what());
  }
  return counts;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open text file " + path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"unihoi: human-object interaction detection toolkit"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model from a run config");
  std::string train_config, resume;
  int steps_override = 0;
  train_cmd->add_option("--config", train_config, "run config (YAML)")->required();
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");
  train_cmd->add_option("--steps", steps_override, "override train.max_steps");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_config, eval_ckpt, eval_split, eval_out = "eval";
  eval_cmd->add_option("--config", eval_config, "run config (YAML)")->required();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--split", eval_split, "zero-shot split file");
  eval_cmd->add_option("--out", eval_out, "report directory");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "detect interactions in one image");
  std::string infer_ckpt, infer_image, text_file, infer_out = ".", infer_config;
  std::vector<std::string> texts;
  bool open = false;
  std::size_t top_k = 0;
  double min_score = -1;
  infer_cmd->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  infer_cmd->add_option("--image", infer_image, "input PPM image")->required();
  auto* texts_opt = infer_cmd->add_option("--texts", texts, "interaction phrases or descriptions");
  infer_cmd->add_option("--text-file", text_file, "file with one text per line")->excludes(texts_opt);
  infer_cmd->add_flag("--open", open, "open-category scoring against the texts");
  infer_cmd->add_option("--out", infer_out, "output directory");
  infer_cmd->add_option("--config", infer_config, "override provider/knowledge settings");
  infer_cmd->add_option("--top-k", top_k, "keep at most this many detections");
  infer_cmd->add_option("--min-score", min_score, "drop detections at or below this score");

  // gen-synth
  auto* synth_cmd = app.add_subcommand("gen-synth", "generate a synthetic dataset");
  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 7;
  synth_cmd->add_option("--spec", synth_spec, "spec file (JSON or YAML)")->required();
  synth_cmd->add_option("--seed", synth_seed, "generator seed");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  // gen-splits
  auto* split_cmd = app.add_subcommand("gen-splits", "generate a zero-shot category split");
  std::string split_kind, counts_path, split_registry, split_out;
  int split_k = -1;
  split_cmd->add_option("--kind", split_kind, "RF-UC, NF-UC, UO or UV")->required();
  split_cmd->add_option("--k", split_k, "number of unseen categories (default: 20% of pairs for UC)");
  split_cmd->add_option("--counts", counts_path, "per-hoi training counts (JSON map or dataset .jsonl)")->required();
  split_cmd->add_option("--registry", split_registry, "category registry")->required();
  split_cmd->add_option("--out", split_out, "output split file")->required();

  // retrieve-knowledge
  auto* know_cmd = app.add_subcommand("retrieve-knowledge", "fetch descriptions for every category");
  std::string know_registry, backend, know_cache, know_out, know_ids_str;
  int word_limit = 50, retries = 2, timeout_ms = 10000;
  know_cmd->add_option("--registry", know_registry, "category registry")->required();
  know_cmd->add_option("--n", word_limit, "word limit in the prompt");
  know_cmd->add_option("--backend", backend, "fixture:<dir> or http://host:port/path")->required();
  know_cmd->add_option("--cache", know_cache, "knowledge cache (JSON lines)");
  know_cmd->add_option("--out", know_out, "write retrieved entries as JSON lines");
  know_cmd->add_option("--retries", retries, "extra attempts on transient failures");
  know_cmd->add_option("--timeout-ms", timeout_ms, "request timeout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (*train_cmd) {
    RunConfig cfg = load_run_config(train_config);
    if (steps_override > 0) {
      cfg.train.max_steps = steps_override;
      cfg.train.epochs = 0;
    }
    TrainHooks hooks;
    if (!resume.empty()) hooks.resume = resume;
    hooks.on_step = [&](std::int64_t step, const LossReport& r) {
      if (step % std::max(1, cfg.train.log_every) == 0) std::cerr << "step " << step << " loss " << r.total << "\n";
    };
    const TrainResult res = train(cfg, hooks);
    std::cout << nlohmann::json{{"checkpoint", res.checkpoint_path}, {"log", res.log_path}, {"steps", res.steps}}.dump()
              << "\n";
  } else if (*eval_cmd) {
    const RunConfig cfg = load_run_config(eval_config);
    const LoadedModel lm = load_model(eval_ckpt);
    std::optional<std::string> split;
    if (!eval_split.empty()) split = eval_split;
    const EvalResult r = run_eval(lm, split, eval_out, &cfg);
    std::cout << r.json["columns"].dump() << "\n";
  } else if (*infer_cmd) {
    LoadedModel lm = load_model(infer_ckpt);
    if (!infer_config.empty()) {
      const RunConfig over = load_run_config(infer_config);
      lm.config.provider = over.provider;
      lm.config.knowledge = over.knowledge;
    }
    InferOptions opts;
    opts.image_path = infer_image;
    opts.texts = text_file.empty() ? texts : read_lines(text_file);
    opts.open = open;
    opts.out_dir = infer_out;
    ScoringOptions scoring{lm.config.eval.top_k, lm.config.eval.min_score};
    if (top_k > 0) scoring.top_k = top_k;
    if (min_score >= 0) scoring.min_score = min_score;
    opts.scoring = scoring;
    const InferResult r = infer(lm, opts);
    std::cout << nlohmann::json{{"detections", r.json_path}, {"image", r.image_path},
                                {"count", r.detections.size()}}.dump()
              << "\n";
  } else if (*synth_cmd) {
    SynthSpec spec;
    try {
      spec = SynthSpec::from_json(read_json_or_yaml(synth_spec));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid synthetic spec: ") + e.what());
    }
    const auto [samples, reg] = generate_synthetic(spec, synth_seed);
    fs::create_directories(synth_out);
    save_registry((fs::path(synth_out) / "registry.json").string(), reg);
    save_dataset((fs::path(synth_out) / "dataset.jsonl").string(), samples, reg);
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [hoi, n] : count_hoi(samples)) counts[std::to_string(hoi)] = n;
    std::ofstream(fs::path(synth_out) / "counts.json") << counts.dump(2) << "\n";
    std::cout << nlohmann::json{{"samples", samples.size()}, {"hoi", reg.num_hoi()}}.dump() << "\n";
  } else if (*split_cmd) {
    const CategoryRegistry reg = load_registry(split_registry);
    const SplitKind kind = parse_split_kind(split_kind);
    const std::map<int, int> counts = read_counts(counts_path, reg);
    int k = split_k;
    if (k < 0) {
      if (kind == SplitKind::kUnseenObject || kind == SplitKind::kUnseenVerb) {
        throw ConfigError("--k is required for UO and UV splits");
      }
      k = default_unseen_count(reg);
    }
    const ZeroShotSplit split = make_split(reg, counts, kind, k);
    save_split(split_out, split);
    std::cout << nlohmann::json{{"unseen", split.unseen_hoi_ids.size()}, {"digest", split.digest()}}.dump() << "\n";
  } else if (*know_cmd) {
    const CategoryRegistry reg = load_registry(know_registry);
    KnowledgeConfig kc;
    kc.word_limit = word_limit;
    kc.retries = retries;
    kc.timeout_ms = timeout_ms;
    if (backend.rfind("fixture:", 0) == 0) {
      kc.backend = "fixture";
      kc.fixture_dir = backend.substr(8);
    } else if (backend.rfind("http://", 0) == 0) {
      kc.backend = "http";
      kc.endpoint = backend;
    } else {
      throw ConfigError("--backend must be fixture:<dir> or an http:// URL");
    }
    auto cache = know_cache.empty() ? std::make_shared<KnowledgeCache>() : std::make_shared<KnowledgeCache>(know_cache);
    RetrievalOptions ro;
    ro.retries = retries;
    KnowledgeClient client(make_llm_backend(kc), cache, ro);
    const auto entries = client.retrieve_all(reg, word_limit);
    std::ofstream out;
    if (!know_out.empty()) out.open(know_out);
    for (const auto& [id, e] : entries) (know_out.empty() ? std::cout : out) << e.to_json().dump() << "\n";
    std::cerr << "retrieved " << entries.size() << " entries, " << client.backend().calls() << " backend calls\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfig;
  } catch (const RangeError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ContaminationError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ProviderError& e) {
    std::cerr << "provider error: " << e.what() << "\n";
    return kProvider;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
