#pragma once

// HTTP backends for completions and embeddings (cpp-httplib, plain HTTP).

#include <chrono>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "pinnpipe/error.hpp"
#include "pinnpipe/provider.hpp"

namespace pinnpipe {

struct HttpOptions {
  std::string url;     // scheme://host:port/path
  std::string token;   // sent as "Authorization: Bearer <token>" when non-empty
  int max_retries = 3;
  std::chrono::milliseconds backoff{200};  // doubled per retry
  std::chrono::milliseconds timeout{30000};
  // Replaceable for tests.
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
};

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

namespace detail {

struct SplitUrl {
  std::string origin;  // scheme://host:port
  std::string path;
};

inline SplitUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigInvalid("provider URL lacks a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline bool retryable(int status) { return status == 429 || status >= 500; }

/// POSTs `body` as JSON with bounded retries on network errors, 429 and 5xx.
/// Returns the parsed response body; `retries` receives the retry count.
inline nlohmann::json post_json(const HttpOptions& opt, const nlohmann::json& body, int& retries) {
  if (opt.url.empty()) throw ProviderUnavailable("no provider URL configured");
  const auto [origin, path] = split_url(opt.url);
  httplib::Client client(origin);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(opt.timeout).count();
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(opt.timeout).count() % 1000000;
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!opt.token.empty()) headers.emplace("Authorization", "Bearer " + opt.token);
  const std::string payload = body.dump();
  std::string last_error;
  retries = 0;
  for (int attempt = 0;; ++attempt) {
    auto res = client.Post(path, headers, payload, "application/json");
    if (res && res->status >= 200 && res->status < 300) {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw ProviderUnavailable(std::string("malformed provider response: ") + e.what());
      }
    }
    if (res) {
      last_error = "HTTP " + std::to_string(res->status);
      if (!retryable(res->status)) throw ProviderUnavailable(last_error + " from " + opt.url);
    } else {
      last_error = httplib::to_string(res.error());
    }
    if (attempt >= opt.max_retries) break;
    opt.sleep(opt.backoff * (1 << attempt));
    ++retries;
  }
  throw ProviderUnavailable("provider failed after " + std::to_string(retries) + " retries: " + last_error);
}

}  // namespace detail

/// Live completion backend: POST {"prompt", "temperature", "max_length"},
/// response {"text"}.
class HttpProvider : public CompletionProvider {
 public:
  explicit HttpProvider(HttpOptions opt) : opt_(std::move(opt)) {}

  /// Endpoint and token from PINNPIPE_PROVIDER_URL / PINNPIPE_PROVIDER_TOKEN.
  static HttpOptions options_from_env() {
    HttpOptions o;
    o.url = env_or("PINNPIPE_PROVIDER_URL", "");
    o.token = env_or("PINNPIPE_PROVIDER_TOKEN", "");
    return o;
  }

  std::string complete(const std::string& prompt, const CompletionParams& params) override {
    int retries = 0;
    auto res = detail::post_json(
        opt_, {{"prompt", prompt}, {"temperature", params.temperature}, {"max_length", params.max_length}}, retries);
    if (!res.is_object() || !res.contains("text") || !res.at("text").is_string())
      throw ProviderUnavailable("provider response lacks a 'text' string");
    record({request_key(prompt, params), 0, retries});
    return res.at("text").get<std::string>();
  }

  std::string name() const override { return "http"; }

 private:
  HttpOptions opt_;
};

/// Embedding backend for EmbeddingSimilarity: POST {"texts"}, response {"vectors"}.
inline std::function<std::vector<std::vector<double>>(const std::vector<std::string>&)> http_embedder(HttpOptions opt) {
  return [opt = std::move(opt)](const std::vector<std::string>& texts) {
    int retries = 0;
    auto res = detail::post_json(opt, {{"texts", texts}}, retries);
    if (!res.is_object() || !res.contains("vectors")) throw ProviderUnavailable("embedding response lacks 'vectors'");
    try {
      return res.at("vectors").get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
      throw ProviderUnavailable(std::string("malformed embedding vectors: ") + e.what());
    }
  };
}

inline HttpOptions embedding_options_from_env() {
  HttpOptions o;
  o.url = env_or("PINNPIPE_EMBEDDING_URL", "");
  o.token = env_or("PINNPIPE_EMBEDDING_TOKEN", "");
  return o;
}

}  // namespace pinnpipe
