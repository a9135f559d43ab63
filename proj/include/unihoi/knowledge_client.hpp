#pragma once

// Knowledge retrieval: the fixed prompt template, LLM backends, a persistent
// checksummed cache with per-key single flight, and text embedding of
// phrases or retrieved descriptions.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "unihoi/common.hpp"
#include "unihoi/data_model.hpp"

namespace unihoi {

inline std::string build_prompt(const std::string& category, int n) {
  if (category.empty()) throw InvalidInput("build_prompt: empty category phrase");
  if (n <= 0) throw InvalidInput("build_prompt: word limit must be positive");
  return "Knowledge retrieve for " + category + ", limited to " + std::to_string(n) + " words";
}

inline std::size_t word_count(const std::string& text) {
  std::istringstream is(text);
  std::size_t n = 0;
  for (std::string w; is >> w;) ++n;
  return n;
}

// Lowercase, alphanumerics kept, every other run collapsed to one '_'.
inline std::string slugify(const std::string& phrase) {
  std::string out;
  bool gap = false;
  for (unsigned char c : phrase) {
    if (std::isalnum(c)) {
      if (gap && !out.empty()) out += '_';
      out += static_cast<char>(std::tolower(c));
      gap = false;
    } else {
      gap = true;
    }
  }
  return out;
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

enum class KnowledgeSource { kLlm, kFixture, kHuman };

inline std::string to_string(KnowledgeSource s) {
  switch (s) {
    case KnowledgeSource::kLlm:
      return "llm";
    case KnowledgeSource::kFixture:
      return "fixture";
    case KnowledgeSource::kHuman:
      return "human";
  }
  return "llm";
}

inline KnowledgeSource parse_knowledge_source(const std::string& s) {
  if (s == "llm") return KnowledgeSource::kLlm;
  if (s == "fixture") return KnowledgeSource::kFixture;
  if (s == "human") return KnowledgeSource::kHuman;
  throw DataError("unknown knowledge source '" + s + "'");
}

struct KnowledgeEntry {
  int hoi_id = -1;
  std::string phrase;
  std::string description;
  int word_limit = 0;
  KnowledgeSource source = KnowledgeSource::kLlm;
  std::string backend_id;
  std::string retrieved_at;

  bool over_limit() const { return static_cast<double>(word_count(description)) > 1.2 * word_limit; }

  nlohmann::json to_json() const {
    return {{"hoi_id", hoi_id},           {"phrase", phrase},          {"description", description},
            {"word_limit", word_limit},   {"source", to_string(source)}, {"backend", backend_id},
            {"retrieved_at", retrieved_at}};
  }

  static KnowledgeEntry from_json(const nlohmann::json& j) {
    KnowledgeEntry e;
    e.hoi_id = j.at("hoi_id").get<int>();
    e.phrase = j.at("phrase").get<std::string>();
    e.description = j.at("description").get<std::string>();
    e.word_limit = j.at("word_limit").get<int>();
    e.source = parse_knowledge_source(j.at("source").get<std::string>());
    e.backend_id = j.value("backend", std::string());
    e.retrieved_at = j.value("retrieved_at", std::string());
    return e;
  }
};

class LLMBackend {
 public:
  virtual ~LLMBackend() = default;
  virtual std::string id() const = 0;
  virtual KnowledgeSource source() const { return KnowledgeSource::kLlm; }
  // Completion for one prompt. Transient failures raise ProviderError (retried);
  // RetrievalError is final.
  virtual std::string complete(const std::string& prompt, int max_words) = 0;
  std::size_t calls() const { return calls_.load(); }

 protected:
  void count_call() { ++calls_; }

 private:
  std::atomic<std::size_t> calls_{0};
};

// Recovers the category phrase from a prompt built by build_prompt.
inline std::string phrase_from_prompt(const std::string& prompt) {
  static const std::string kHead = "Knowledge retrieve for ";
  const auto tail = prompt.rfind(", limited to ");
  if (prompt.rfind(kHead, 0) != 0 || tail == std::string::npos || tail < kHead.size()) {
    throw InvalidInput("not a knowledge prompt: " + prompt);
  }
  return prompt.substr(kHead.size(), tail - kHead.size());
}

// Offline backend: one {phrase-slug}.txt file per category in a directory.
class FixtureBackend final : public LLMBackend {
 public:
  explicit FixtureBackend(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::string id() const override { return "fixture:" + dir_.string(); }
  KnowledgeSource source() const override { return KnowledgeSource::kFixture; }

  std::string complete(const std::string& prompt, int /*max_words*/) override {
    count_call();
    const std::string slug = slugify(phrase_from_prompt(prompt));
    const auto path = dir_ / (slug + ".txt");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RetrievalError("no fixture for key '" + slug + "' (expected " + path.string() + ")");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
    return text;
  }

 private:
  std::filesystem::path dir_;
};

// JSON-lines store, one entry per line, with a sidecar holding the hex FNV-1a
// digest of the file bytes. Many readers, one writer.
class KnowledgeCache {
 public:
  KnowledgeCache() = default;
  explicit KnowledgeCache(std::filesystem::path path) : path_(std::move(path)) { load(); }

  static std::string key(const std::string& phrase, int n, const std::string& backend_id) {
    return phrase + "\x1f" + std::to_string(n) + "\x1f" + backend_id;
  }

  static std::filesystem::path sidecar(const std::filesystem::path& p) { return p.string() + ".fnv"; }

  std::optional<KnowledgeEntry> get(const std::string& k) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(k);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& k, const KnowledgeEntry& e) {
    std::unique_lock lock(mutex_);
    if (!entries_.emplace(k, e).second) return;
    order_.push_back(k);
    if (!path_.empty()) persist_locked();
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  std::vector<KnowledgeEntry> entries() const {
    std::shared_lock lock(mutex_);
    std::vector<KnowledgeEntry> out;
    for (const auto& k : order_) out.push_back(entries_.at(k));
    return out;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  void load() {
    if (!std::filesystem::exists(path_)) return;
    std::ifstream in(path_, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ifstream side(sidecar(path_));
    std::string expected;
    side >> expected;
    if (!side || expected != hex64(fnv1a(bytes))) {
      throw ChecksumError("knowledge cache " + path_.string() + " does not match its checksum");
    }
    std::istringstream is(bytes);
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        KnowledgeEntry e = KnowledgeEntry::from_json(j.at("entry"));
        const std::string k = j.at("key").get<std::string>();
        if (entries_.emplace(k, e).second) order_.push_back(k);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad knowledge cache record: ") + e.what(), n);
      }
    }
  }

  void persist_locked() const {
    std::string bytes;
    for (const auto& k : order_) bytes += nlohmann::json{{"key", k}, {"entry", entries_.at(k).to_json()}}.dump() + "\n";
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    const auto tmp = path_.string() + ".tmp";
    const auto side_tmp = sidecar(path_).string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << bytes;
      std::ofstream side(side_tmp, std::ios::trunc);
      side << hex64(fnv1a(bytes)) << "\n";
      if (!out || !side) throw DataError("cannot write knowledge cache " + path_.string());
    }
    std::filesystem::rename(tmp, path_);
    std::filesystem::rename(side_tmp, sidecar(path_));
  }

  std::filesystem::path path_;
  std::map<std::string, KnowledgeEntry> entries_;
  std::vector<std::string> order_;
  mutable std::shared_mutex mutex_;
};

struct RetrievalOptions {
  int retries = 2;  // extra attempts after the first on transient failures
  std::function<void(const std::string&)> log = [](const std::string& m) { std::clog << "[knowledge] " << m << "\n"; };
};

// Cache-first retrieval. Concurrent requests for one key share one backend call.
class KnowledgeClient {
 public:
  KnowledgeClient(std::shared_ptr<LLMBackend> backend, std::shared_ptr<KnowledgeCache> cache,
                  RetrievalOptions opts = {})
      : backend_(std::move(backend)), cache_(std::move(cache)), opts_(std::move(opts)) {
    if (!cache_) cache_ = std::make_shared<KnowledgeCache>();
  }

  KnowledgeEntry retrieve(int hoi_id, const std::string& phrase, int n) {
    const std::string prompt = build_prompt(phrase, n);
    const std::string k = KnowledgeCache::key(phrase, n, backend_->id());
    if (auto hit = cache_->get(k)) return with_id(*hit, hoi_id);

    std::shared_future<KnowledgeEntry> fut;
    std::promise<KnowledgeEntry> promise;
    bool leader = false;
    {
      std::lock_guard lock(flight_mutex_);
      if (auto hit = cache_->get(k)) return with_id(*hit, hoi_id);
      auto it = in_flight_.find(k);
      if (it != in_flight_.end()) {
        fut = it->second;
      } else {
        fut = promise.get_future().share();
        in_flight_.emplace(k, fut);
        leader = true;
      }
    }
    if (leader) {
      try {
        KnowledgeEntry e = fetch(hoi_id, phrase, n, prompt);
        cache_->put(k, e);
        promise.set_value(e);
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
      std::lock_guard lock(flight_mutex_);
      in_flight_.erase(k);
    }
    return with_id(fut.get(), hoi_id);
  }

  std::map<int, KnowledgeEntry> retrieve_all(const CategoryRegistry& reg, int n, const std::vector<int>& ids = {}) {
    std::map<int, KnowledgeEntry> out;
    for (int h : ids.empty() ? all_ids(reg) : ids) out.emplace(h, retrieve(h, reg.phrase(h), n));
    return out;
  }

  const LLMBackend& backend() const { return *backend_; }
  KnowledgeCache& cache() { return *cache_; }

  static std::vector<int> all_ids(const CategoryRegistry& reg) {
    std::vector<int> ids(static_cast<std::size_t>(reg.num_hoi()));
    for (int i = 0; i < reg.num_hoi(); ++i) ids[static_cast<std::size_t>(i)] = i;
    return ids;
  }

 private:
  static KnowledgeEntry with_id(KnowledgeEntry e, int hoi_id) {
    e.hoi_id = hoi_id;
    return e;
  }

  KnowledgeEntry fetch(int hoi_id, const std::string& phrase, int n, const std::string& prompt) {
    std::string last;
    int status = 0;
    for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
      try {
        KnowledgeEntry e;
        e.hoi_id = hoi_id;
        e.phrase = phrase;
        e.word_limit = n;
        e.description = backend_->complete(prompt, n);
        e.source = backend_->source();
        e.backend_id = backend_->id();
        e.retrieved_at = utc_timestamp();
        if (e.description.empty()) throw ProviderError("backend returned an empty description");
        if (e.over_limit()) {
          opts_.log("'" + phrase + "' description has " + std::to_string(word_count(e.description)) +
                    " words, above 1.2 x " + std::to_string(n));
        }
        return e;
      } catch (const RetrievalError&) {
        throw;
      } catch (const ProviderError& err) {
        last = err.what();
        status = err.status;
      }
    }
    throw RetrievalError("retrieval for '" + phrase + "' failed after " + std::to_string(opts_.retries + 1) +
                             " attempts: " + last,
                         opts_.retries + 1, status);
  }

  std::shared_ptr<LLMBackend> backend_;
  std::shared_ptr<KnowledgeCache> cache_;
  RetrievalOptions opts_;
  std::mutex flight_mutex_;
  std::map<std::string, std::shared_future<KnowledgeEntry>> in_flight_;
};

// ---------------------------------------------------------------------------
// Text embedding

struct TextEmbedding {
  Eigen::RowVectorXd vector;
  std::string text_hash;
  std::string encoder_id;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::string id() const = 0;
  virtual int dim() const = 0;
  virtual Eigen::RowVectorXd encode(const std::string& text) const = 0;
};

// Unit vector drawn from a normal stream seeded by the text digest.
class MockTextEncoder final : public TextEncoder {
 public:
  explicit MockTextEncoder(std::uint64_t seed = 0, int dim = 768) : seed_(seed), dim_(dim) {
    if (dim <= 0) throw ConfigError("text encoder dimension must be positive");
  }
  std::string id() const override { return "mock-text:" + std::to_string(seed_) + ":" + std::to_string(dim_); }
  int dim() const override { return dim_; }
  Eigen::RowVectorXd encode(const std::string& text) const override {
    SplitMix rng(fnv1a(text) ^ splitmix64(seed_));
    Eigen::RowVectorXd v(dim_);
    for (int i = 0; i < dim_; ++i) v(i) = rng.normal();
    return v / v.norm();
  }

 private:
  std::uint64_t seed_;
  int dim_;
};

inline TextEmbedding embed_text(const std::string& text, const TextEncoder& encoder) {
  TextEmbedding e;
  try {
    e.vector = encoder.encode(text);
  } catch (const EncodingError&) {
    throw;
  } catch (const std::exception& err) {
    throw EncodingError("text encoder " + encoder.id() + " failed: " + err.what());
  }
  if (e.vector.size() != encoder.dim()) throw EncodingError("text encoder returned a vector of the wrong width");
  if (!e.vector.allFinite()) throw EncodingError("text encoder returned non-finite values");
  e.text_hash = hex64(fnv1a(text));
  e.encoder_id = encoder.id();
  return e;
}

enum class TextMode { kPhrase, kDescription };

inline TextMode parse_text_mode(const std::string& s) {
  if (s == "phrase") return TextMode::kPhrase;
  if (s == "description") return TextMode::kDescription;
  throw ConfigError("text mode must be phrase or description");
}

struct MissingKnowledgeError : RetrievalError {
  MissingKnowledgeError(const std::string& what, std::vector<int> ids) : RetrievalError(what), missing(std::move(ids)) {}
  std::vector<int> missing;
};

// One embedding per requested hoi id in registry order (all ids when empty).
inline std::vector<TextEmbedding> embeddings_for_categories(const CategoryRegistry& reg, std::vector<int> ids,
                                                            TextMode mode, const TextEncoder& encoder,
                                                            const std::map<int, KnowledgeEntry>& knowledge = {}) {
  if (ids.empty()) ids = KnowledgeClient::all_ids(reg);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (mode == TextMode::kDescription) {
    std::vector<int> missing;
    for (int h : ids) {
      auto it = knowledge.find(h);
      if (it == knowledge.end() || it->second.description.empty()) missing.push_back(h);
    }
    if (!missing.empty()) {
      std::string list;
      for (int h : missing) list += (list.empty() ? "" : ", ") + std::to_string(h);
      throw MissingKnowledgeError("no description for hoi ids " + list, missing);
    }
  }
  std::vector<TextEmbedding> out;
  for (int h : ids) {
    if (h < 0 || h >= reg.num_hoi()) throw RegistryError("unknown hoi id " + std::to_string(h));
    out.push_back(embed_text(mode == TextMode::kPhrase ? reg.phrase(h) : knowledge.at(h).description, encoder));
  }
  return out;
}

inline Eigen::MatrixXd embedding_matrix(const std::vector<TextEmbedding>& embs) {
  if (embs.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(embs.size()), embs.front().vector.size());
  for (std::size_t i = 0; i < embs.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = embs[i].vector;
  return m;
}

}  // namespace unihoi
