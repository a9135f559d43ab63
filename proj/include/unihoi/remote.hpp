#pragma once

// HTTP adapters for the external services: foundation features, LLM
// completion and text encoding. Plain http only.

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>
#include <utility>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "unihoi/foundation_bridge.hpp"
#include "unihoi/image_io.hpp"
#include "unihoi/knowledge_client.hpp"

namespace unihoi {

struct HttpOptions {
  std::string endpoint;     // http://host:port/path
  int timeout_ms = 10000;
  int retries = 2;          // extra attempts after the first
  int backoff_ms = 50;
  std::string api_key_env;  // name of the variable holding a bearer token, if any
};

namespace detail {

struct Endpoint {
  std::string base;  // scheme://host:port
  std::string path;
};

inline Endpoint split_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("endpoint must include a scheme: " + url);
  if (url.compare(0, scheme, "http") != 0) throw ConfigError("only http endpoints are supported: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

struct HttpResult {
  int status = 0;
  std::string body;
};

// POST with retries on transport errors and 5xx/429. Anything else is final.
inline HttpResult post(const HttpOptions& opts, const std::string& body, const std::string& content_type,
                       const httplib::Headers& extra = {}) {
  const Endpoint ep = split_endpoint(opts.endpoint);
  httplib::Headers headers = extra;
  if (!opts.api_key_env.empty()) {
    if (const char* key = std::getenv(opts.api_key_env.c_str()); key != nullptr && *key != '\0') {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
  }
  std::string last = "no attempt made";
  int status = 0;
  const int attempts = opts.retries + 1;
  for (int a = 0; a < attempts; ++a) {
    if (a > 0) std::this_thread::sleep_for(std::chrono::milliseconds(opts.backoff_ms * a));
    httplib::Client cli(ep.base);
    const auto secs = opts.timeout_ms / 1000;
    const auto usecs = (opts.timeout_ms % 1000) * 1000;
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    auto res = cli.Post(ep.path, headers, body, content_type);
    if (!res) {
      last = "transport error: " + httplib::to_string(res.error());
      status = 0;
      continue;
    }
    status = res->status;
    if (status >= 200 && status < 300) return {status, res->body};
    last = "HTTP " + std::to_string(status);
    if (status != 429 && status < 500) throw ProviderError(opts.endpoint + " rejected the request: " + last, a + 1, status);
  }
  throw ProviderError(opts.endpoint + " failed after " + std::to_string(attempts) + " attempts: " + last, attempts,
                      status);
}

inline nlohmann::json parse_body(const HttpResult& r, const std::string& endpoint) {
  try {
    return nlohmann::json::parse(r.body);
  } catch (const nlohmann::json::exception& e) {
    throw ProviderError(endpoint + " returned invalid JSON: " + e.what(), 1, r.status);
  }
}

}  // namespace detail

// POSTs the resampled image as binary PPM; expects {"tokens": [[...]], "global": [...]}.
class RemoteFoundationProvider final : public FoundationProvider {
 public:
  RemoteFoundationProvider(HttpOptions opts, int num_tokens = 32, int dim = 768, int input_size = 224)
      : opts_(std::move(opts)), num_tokens_(num_tokens), dim_(dim), input_size_(input_size) {}

  std::string id() const override { return "remote:" + opts_.endpoint; }
  int num_tokens() const override { return num_tokens_; }
  int dim() const override { return dim_; }
  int input_size() const override { return input_size_; }

  FoundationTokens encode(const Image& resized, const std::string& image_id) const override {
    const auto res = detail::post(opts_, encode_ppm(resized), "image/x-portable-pixmap", {{"X-Image-Id", image_id}});
    const auto j = detail::parse_body(res, opts_.endpoint);
    FoundationTokens out;
    out.provider_id = id();
    try {
      const auto& rows = j.at("tokens");
      out.tokens.resize(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (static_cast<Eigen::Index>(rows[r].size()) != out.tokens.cols()) throw ProviderError("ragged token rows");
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
          out.tokens(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<float>();
        }
      }
      if (j.contains("global")) {
        const auto g = j.at("global").get<std::vector<float>>();
        out.global = Eigen::Map<const FloatRow>(g.data(), static_cast<Eigen::Index>(g.size()));
      } else {
        out.global = global_embedding(out.tokens);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ProviderError(opts_.endpoint + " response is missing fields: " + e.what(), 1, res.status);
    }
    return out;
  }

 private:
  HttpOptions opts_;
  int num_tokens_;
  int dim_;
  int input_size_;
};

// {prompt, max_words} -> {text}. Retries are left to the knowledge client.
class HttpLlmBackend final : public LLMBackend {
 public:
  explicit HttpLlmBackend(HttpOptions opts) : opts_(std::move(opts)) { opts_.retries = 0; }

  std::string id() const override { return "http:" + opts_.endpoint; }

  std::string complete(const std::string& prompt, int max_words) override {
    count_call();
    const nlohmann::json req = {{"prompt", prompt}, {"max_words", max_words}};
    const auto res = detail::post(opts_, req.dump(), "application/json");
    const auto j = detail::parse_body(res, opts_.endpoint);
    if (!j.contains("text") || !j["text"].is_string()) throw ProviderError("LLM response has no text field", 1, res.status);
    return j["text"].get<std::string>();
  }

 private:
  HttpOptions opts_;
};

// {text} -> {embedding: [...]}.
class HttpTextEncoder final : public TextEncoder {
 public:
  HttpTextEncoder(HttpOptions opts, int dim) : opts_(std::move(opts)), dim_(dim) {}

  std::string id() const override { return "http-text:" + opts_.endpoint; }
  int dim() const override { return dim_; }

  Eigen::RowVectorXd encode(const std::string& text) const override {
    try {
      const auto res = detail::post(opts_, nlohmann::json{{"text", text}}.dump(), "application/json");
      const auto v = detail::parse_body(res, opts_.endpoint).at("embedding").get<std::vector<double>>();
      return Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    } catch (const ProviderError& e) {
      throw EncodingError(std::string("text encoding failed: ") + e.what(), e.attempts, e.status);
    } catch (const nlohmann::json::exception& e) {
      throw EncodingError(std::string("text encoder response is malformed: ") + e.what());
    }
  }

 private:
  HttpOptions opts_;
  int dim_;
};

}  // namespace unihoi
