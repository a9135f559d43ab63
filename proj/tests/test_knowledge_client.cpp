#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <thread>

#include "support.hpp"
#include "unihoi/knowledge_client.hpp"
#include "unihoi/remote.hpp"

using namespace unihoi;
using namespace unihoi::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::filesystem::path fixture_dir() { return source_dir() / "tests" / "data" / "knowledge"; }

RetrievalOptions quiet(std::vector<std::string>* sink = nullptr) {
  RetrievalOptions o;
  o.log = [sink](const std::string& m) {
    if (sink) sink->push_back(m);
  };
  return o;
}

// Returns "about <phrase>", optionally after a delay or a number of transient failures.
class EchoBackend final : public LLMBackend {
 public:
  explicit EchoBackend(int fail_first = 0, int delay_ms = 0) : fail_first_(fail_first), delay_ms_(delay_ms) {}
  std::string id() const override { return "echo"; }
  std::string complete(const std::string& prompt, int max_words) override {
    count_call();
    if (delay_ms_) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));
    if (failures_++ < fail_first_) throw ProviderError("transient", 1, 503);
    std::string out = "about " + phrase_from_prompt(prompt);
    for (int i = 0; i < words_; ++i) out += " w";
    (void)max_words;
    return out;
  }
  int words_ = 0;

 private:
  int fail_first_, delay_ms_;
  std::atomic<int> failures_{0};
};

// Minimal local HTTP server on an ephemeral port.
struct LocalServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;
  LocalServer() = default;
  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port) + path; }
  ~LocalServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Prompt template

TEST(BuildPrompt, GoldenFile) {
  std::ifstream in(source_dir() / "tests" / "data" / "prompt_golden.tsv");
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find('\t'), b = line.find('\t', a + 1);
    ASSERT_NE(b, std::string::npos);
    EXPECT_EQ(build_prompt(line.substr(0, a), std::stoi(line.substr(a + 1, b - a - 1))), line.substr(b + 1));
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}

TEST(BuildPrompt, TemplateMatchesReferenceText) {
  // The reference text writes the category as a LaTeX placeholder.
  const std::string reference = slurp(source_dir() / "paper.md");
  const std::regex pat(R"(Knowledge retrieve for \$[^$]+\$, limited to \$N\$ words)");
  ASSERT_TRUE(std::regex_search(reference, pat));
  EXPECT_EQ(build_prompt("X", 7), "Knowledge retrieve for X, limited to 7 words");
}

TEST(BuildPrompt, Errors) {
  EXPECT_THROW(build_prompt("", 50), InvalidInput);
  EXPECT_THROW(build_prompt("ride bicycle", 0), InvalidInput);
}

TEST(BuildPrompt, ExactForArbitraryInputs) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    std::string phrase;
    const int len = 1 + static_cast<int>(rng() % 20);
    for (int k = 0; k < len; ++k) phrase += static_cast<char>(32 + rng() % 95);
    const int n = 1 + static_cast<int>(rng() % 500);
    const std::string p = build_prompt(phrase, n);
    EXPECT_EQ(p, "Knowledge retrieve for " + phrase + ", limited to " + std::to_string(n) + " words");
    EXPECT_EQ(phrase_from_prompt(p), phrase);
  }
}

TEST(Slugify, Basics) {
  EXPECT_EQ(slugify("Human ride bicycle"), "human_ride_bicycle");
  EXPECT_EQ(slugify("  hold--cup!! "), "hold_cup");
}

// ---------------------------------------------------------------------------
// Retrieval

TEST(Retrieve, FixtureIsVerbatimAndMatchesReferenceText) {
  auto backend = std::make_shared<FixtureBackend>(fixture_dir());
  KnowledgeClient client(backend, nullptr, quiet());
  const auto e = client.retrieve(3, "Human ride bicycle", 50);
  EXPECT_EQ(e.description + "\n", slurp(fixture_dir() / "human_ride_bicycle.txt"));
  EXPECT_EQ(e.source, KnowledgeSource::kFixture);
  EXPECT_EQ(e.hoi_id, 3);
  // Oracle: the example block of the reference text, LaTeX markup stripped.
  std::istringstream reference(slurp(source_dir() / "paper.md"));
  std::string line, found;
  while (std::getline(reference, line)) {
    if (line.find("\\textbf{Riding a bicycle}") != std::string::npos) found = line;
  }
  ASSERT_FALSE(found.empty());
  for (const std::string tok : {"\\item ", "\\emph{", "\\textbf{"}) {
    for (auto p = found.find(tok); p != std::string::npos; p = found.find(tok)) found.erase(p, tok.size());
  }
  std::erase(found, '}');
  EXPECT_EQ(e.description, found);
}

TEST(Retrieve, SecondRequestServedFromCache) {
  auto backend = std::make_shared<FixtureBackend>(fixture_dir());
  KnowledgeClient client(backend, nullptr, quiet());
  const auto a = client.retrieve(0, "Human throw frisbee", 50);
  const auto b = client.retrieve(0, "Human throw frisbee", 50);
  EXPECT_EQ(backend->calls(), 1u);
  EXPECT_EQ(a.description, b.description);
  client.retrieve(0, "Human throw frisbee", 40);  // a different N is a different key
  EXPECT_EQ(backend->calls(), 2u);
}

TEST(Retrieve, MissingFixtureNamesTheKey) {
  KnowledgeClient client(std::make_shared<FixtureBackend>(fixture_dir()), nullptr, quiet());
  try {
    client.retrieve(0, "Human lick umbrella", 50);
    FAIL();
  } catch (const RetrievalError& e) {
    EXPECT_NE(std::string(e.what()).find("human_lick_umbrella"), std::string::npos);
  }
}

TEST(Retrieve, IdempotentCallCountEqualsDistinctKeys) {
  auto backend = std::make_shared<EchoBackend>();
  KnowledgeClient client(backend, nullptr, quiet());
  std::mt19937_64 rng(5);
  std::set<int> seen;
  for (int i = 0; i < 100; ++i) {
    const int k = static_cast<int>(rng() % 30);
    seen.insert(k);
    EXPECT_EQ(client.retrieve(k, "phrase " + std::to_string(k), 20).description, "about phrase " + std::to_string(k));
  }
  EXPECT_EQ(backend->calls(), seen.size());
}

TEST(Retrieve, ConcurrentDuplicatesCoalesce) {
  auto backend = std::make_shared<EchoBackend>(0, 100);
  KnowledgeClient client(backend, nullptr, quiet());
  std::vector<std::thread> pool;
  std::vector<std::string> got(24);
  for (int i = 0; i < 24; ++i) {
    pool.emplace_back([&, i] { got[i] = client.retrieve(i, "p" + std::to_string(i % 3), 10).description; });
  }
  for (auto& t : pool) t.join();
  EXPECT_EQ(backend->calls(), 3u);
  for (int i = 0; i < 24; ++i) EXPECT_EQ(got[i], "about p" + std::to_string(i % 3));
}

TEST(Retrieve, TransientFailuresAreRetried) {
  auto backend = std::make_shared<EchoBackend>(2);
  KnowledgeClient client(backend, nullptr, quiet());
  EXPECT_EQ(client.retrieve(0, "x", 5).description, "about x");
  EXPECT_EQ(backend->calls(), 3u);
  auto hopeless = std::make_shared<EchoBackend>(10);
  KnowledgeClient c2(hopeless, nullptr, quiet());
  try {
    c2.retrieve(0, "x", 5);
    FAIL();
  } catch (const RetrievalError& e) {
    EXPECT_EQ(e.attempts, 3);
    EXPECT_EQ(e.status, 503);
  }
}

TEST(Retrieve, OverLimitIsLoggedNotRejected) {
  auto backend = std::make_shared<EchoBackend>();
  backend->words_ = 20;
  std::vector<std::string> log;
  KnowledgeClient client(backend, nullptr, quiet(&log));
  const auto e = client.retrieve(0, "x", 10);  // 22 words > 12
  EXPECT_TRUE(e.over_limit());
  ASSERT_EQ(log.size(), 1u);
  EXPECT_NE(log[0].find("22 words"), std::string::npos);
}

TEST(Retrieve, RetrieveAllUsesRegistryPhrases) {
  const CategoryRegistry reg({"bicycle", "frisbee"}, {"ride", "throw"}, {{0, 0}, {1, 1}});
  auto backend = std::make_shared<FixtureBackend>(fixture_dir());
  KnowledgeClient client(backend, nullptr, quiet());
  const auto all = client.retrieve_all(reg, 50);
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all.at(1).phrase, "human throw frisbee");
}

// ---------------------------------------------------------------------------
// Persistent cache

TEST(KnowledgeCache, PersistReloadIsByteIdentical) {
  const auto dir = temp_dir("kc");
  const auto path = dir / "k.jsonl";
  std::vector<KnowledgeEntry> first;
  {
    auto cache = std::make_shared<KnowledgeCache>(path);
    KnowledgeClient client(std::make_shared<FixtureBackend>(fixture_dir()), cache, quiet());
    first.push_back(client.retrieve(0, "Human ride bicycle", 50));
    first.push_back(client.retrieve(1, "Human throw frisbee", 50));
  }
  EXPECT_TRUE(std::filesystem::exists(KnowledgeCache::sidecar(path)));
  auto backend = std::make_shared<FixtureBackend>(fixture_dir());
  KnowledgeClient client(backend, std::make_shared<KnowledgeCache>(path), quiet());
  EXPECT_EQ(client.retrieve(0, "Human ride bicycle", 50).description, first[0].description);
  EXPECT_EQ(client.retrieve(1, "Human throw frisbee", 50).description, first[1].description);
  EXPECT_EQ(backend->calls(), 0u);
  const auto entries = client.cache().entries();
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].retrieved_at, first[0].retrieved_at);
}

TEST(KnowledgeCache, CorruptionIsChecksumError) {
  const auto dir = temp_dir("kc");
  const auto path = dir / "k.jsonl";
  {
    KnowledgeCache cache(path);
    KnowledgeEntry e;
    e.phrase = "x";
    e.description = "abc";
    e.word_limit = 3;
    cache.put("k", e);
  }
  std::string bytes = slurp(path);
  bytes[bytes.find("abc")] = 'X';
  std::ofstream(path, std::ios::binary) << bytes;
  EXPECT_THROW(KnowledgeCache{path}, ChecksumError);
  std::filesystem::remove(KnowledgeCache::sidecar(path));
  EXPECT_THROW(KnowledgeCache{path}, ChecksumError);
}

// ---------------------------------------------------------------------------
// Text embedding

TEST(EmbedText, MockIsDeterministicUnitNorm) {
  const MockTextEncoder enc(3, 64);
  const auto a = embed_text("ride bicycle", enc), b = embed_text("ride bicycle", enc);
  EXPECT_EQ(a.vector, b.vector);
  EXPECT_NEAR(a.vector.norm(), 1.0, 1e-12);
  EXPECT_EQ(a.text_hash, hex64(fnv1a(std::string("ride bicycle"))));
  EXPECT_EQ(a.encoder_id, enc.id());
}

TEST(EmbedText, DistinctTextsMatchSeededHashOracle) {
  const MockTextEncoder enc(9, 16);
  for (const std::string t : {"hold cup", "throw frisbee", "ride bicycle"}) {
    SplitMix rng(fnv1a(t) ^ splitmix64(9));
    Eigen::RowVectorXd want(16);
    for (int i = 0; i < 16; ++i) want(i) = rng.normal();
    want /= want.norm();
    EXPECT_TRUE(embed_text(t, enc).vector.isApprox(want, 1e-14));
  }
  EXPECT_NE(embed_text("hold cup", enc).vector, embed_text("hold cups", enc).vector);
}

TEST(EmbedText, EncoderFailureIsEncodingError) {
  struct Broken final : TextEncoder {
    std::string id() const override { return "broken"; }
    int dim() const override { return 4; }
    Eigen::RowVectorXd encode(const std::string&) const override { throw std::runtime_error("down"); }
  };
  struct Narrow final : TextEncoder {
    std::string id() const override { return "narrow"; }
    int dim() const override { return 4; }
    Eigen::RowVectorXd encode(const std::string&) const override { return Eigen::RowVectorXd::Ones(3); }
  };
  EXPECT_THROW(embed_text("x", Broken()), EncodingError);
  EXPECT_THROW(embed_text("x", Narrow()), EncodingError);
}

TEST(EmbeddingsForCategories, PhraseAndDescriptionModes) {
  const CategoryRegistry reg({"bicycle", "frisbee", "cup"}, {"ride", "throw", "hold"}, {{0, 0}, {1, 1}, {2, 2}});
  const MockTextEncoder enc(0, 8);
  const auto e = embeddings_for_categories(reg, {}, TextMode::kPhrase, enc);
  ASSERT_EQ(e.size(), 3u);
  for (int h = 0; h < 3; ++h) EXPECT_EQ(e[h].vector, enc.encode(reg.phrase(h)));
  EXPECT_EQ(embedding_matrix(e), embedding_matrix(embeddings_for_categories(reg, {}, TextMode::kPhrase, enc)));
  EXPECT_EQ(embeddings_for_categories(reg, {2, 0}, TextMode::kPhrase, enc)[0].vector, e[0].vector);

  std::map<int, KnowledgeEntry> kb;
  kb[0].description = "zero";
  kb[2].description = "two";
  try {
    embeddings_for_categories(reg, {}, TextMode::kDescription, enc, kb);
    FAIL();
  } catch (const MissingKnowledgeError& err) {
    EXPECT_EQ(err.missing, std::vector<int>{1});
    EXPECT_NE(std::string(err.what()).find("1"), std::string::npos);
  }
  const auto d = embeddings_for_categories(reg, {0, 2}, TextMode::kDescription, enc, kb);
  EXPECT_EQ(d[1].vector, enc.encode("two"));
  EXPECT_THROW(embeddings_for_categories(reg, {7}, TextMode::kPhrase, enc), RegistryError);
}

// ---------------------------------------------------------------------------
// HTTP adapters against a local server

TEST(Http, LlmBackendRoundTripAndApiKey) {
  LocalServer srv;
  std::atomic<int> hits{0};
  std::string auth;
  srv.server.Post("/complete", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    auth = req.get_header_value("Authorization");
    const auto j = nlohmann::json::parse(req.body);
    res.set_content(nlohmann::json{{"text", "desc for " + phrase_from_prompt(j.at("prompt"))}}.dump(),
                    "application/json");
  });
  srv.start();
  ::setenv("UNIHOI_TEST_KEY", "sekrit", 1);
  HttpOptions o;
  o.endpoint = srv.url("/complete");
  o.api_key_env = "UNIHOI_TEST_KEY";
  KnowledgeClient client(std::make_shared<HttpLlmBackend>(o), nullptr, quiet());
  EXPECT_EQ(client.retrieve(0, "hold cup", 30).description, "desc for hold cup");
  EXPECT_EQ(client.retrieve(0, "hold cup", 30).description, "desc for hold cup");
  EXPECT_EQ(hits, 1);
  EXPECT_EQ(auth, "Bearer sekrit");
  ::unsetenv("UNIHOI_TEST_KEY");
}

TEST(Http, ServerErrorsAreRetriedThenReported) {
  LocalServer srv;
  std::atomic<int> hits{0};
  srv.server.Post("/complete", [&](const httplib::Request&, httplib::Response& res) {
    if (++hits < 3) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"text": "ok now"})", "application/json");
  });
  srv.server.Post("/bad", [&](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  srv.start();
  HttpOptions o;
  o.endpoint = srv.url("/complete");
  KnowledgeClient client(std::make_shared<HttpLlmBackend>(o), nullptr, quiet());
  EXPECT_EQ(client.retrieve(0, "x", 5).description, "ok now");
  EXPECT_EQ(hits, 3);
  o.endpoint = srv.url("/bad");
  KnowledgeClient failing(std::make_shared<HttpLlmBackend>(o), nullptr, quiet());
  try {
    failing.retrieve(0, "x", 5);
    FAIL();
  } catch (const RetrievalError& e) {
    EXPECT_EQ(e.status, 500);
    EXPECT_EQ(e.attempts, 3);
  }
}

TEST(Http, TimeoutIsProviderError) {
  LocalServer srv;
  srv.server.Post("/slow", [&](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    res.set_content(R"({"embedding": [1]})", "application/json");
  });
  srv.start();
  HttpOptions o;
  o.endpoint = srv.url("/slow");
  o.timeout_ms = 100;
  o.retries = 1;
  o.backoff_ms = 1;
  try {
    HttpTextEncoder(o, 1).encode("x");
    FAIL();
  } catch (const EncodingError& e) {
    EXPECT_EQ(e.attempts, 2);
  }
}

TEST(Http, RemoteFoundationProvider) {
  LocalServer srv;
  std::string seen_id;
  std::size_t body_size = 0;
  srv.server.Post("/features", [&](const httplib::Request& req, httplib::Response& res) {
    seen_id = req.get_header_value("X-Image-Id");
    body_size = req.body.size();
    res.set_content(R"({"tokens": [[1, 2, 3], [4, 5, 6]]})", "application/json");
  });
  srv.server.Post("/wrong", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"tokens": [[1, 2], [3, 4]]})", "application/json");
  });
  srv.start();
  HttpOptions o;
  o.endpoint = srv.url("/features");
  const RemoteFoundationProvider p(o, 2, 3, 16);
  const auto t = provide_features(random_image(20, 30, 1), p, "img-7");
  EXPECT_EQ(seen_id, "img-7");
  EXPECT_GT(body_size, 16u * 16u * 3u);
  EXPECT_EQ(t.tokens(1, 2), 6.0f);
  EXPECT_NEAR(t.global(0), 2.5f, 1e-6);
  o.endpoint = srv.url("/wrong");
  EXPECT_THROW(provide_features(random_image(20, 30, 1), RemoteFoundationProvider(o, 2, 3, 16)), ProviderError);
}

TEST(Http, TextEncoderAndEndpointValidation) {
  LocalServer srv;
  srv.server.Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
    const auto text = nlohmann::json::parse(req.body).at("text").get<std::string>();
    res.set_content(nlohmann::json{{"embedding", {double(text.size()), 1.0}}}.dump(), "application/json");
  });
  srv.start();
  HttpOptions o;
  o.endpoint = srv.url("/embed");
  const HttpTextEncoder enc(o, 2);
  EXPECT_EQ(embed_text("abcd", enc).vector, (Eigen::RowVector2d(4, 1)));
  o.endpoint = "https://example.invalid/x";
  EXPECT_THROW(HttpTextEncoder(o, 2).encode("x"), ConfigError);
  o.endpoint = "127.0.0.1/x";
  EXPECT_THROW(HttpTextEncoder(o, 2).encode("x"), ConfigError);
}
