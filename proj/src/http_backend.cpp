#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "audit/backend.hpp"
#include "audit/errors.hpp"

namespace audit::backend {

using nlohmann::json;

namespace {

// Counting semaphore; std::counting_semaphore needs a compile-time max.
class Semaphore {
 public:
  explicit Semaphore(int count) : count_(count) {}
  void acquire() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return count_ > 0; });
    --count_;
  }
  void release() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      ++count_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int count_;
};

struct SemaphoreGuard {
  explicit SemaphoreGuard(Semaphore& s) : sem(s) { sem.acquire(); }
  ~SemaphoreGuard() { sem.release(); }
  Semaphore& sem;
};

struct SplitUrl {
  std::string origin;       // scheme://host[:port]
  std::string path_prefix;  // e.g. /v1
};

SplitUrl split_base_url(const std::string& base_url) {
  const size_t scheme = base_url.find("://");
  if (scheme == std::string::npos) {
    throw ValidationError("base_url must include a scheme: " + base_url);
  }
  const size_t path = base_url.find('/', scheme + 3);
  SplitUrl out;
  if (path == std::string::npos) {
    out.origin = base_url;
  } else {
    out.origin = base_url.substr(0, path);
    out.path_prefix = base_url.substr(path);
  }
  while (!out.path_prefix.empty() && out.path_prefix.back() == '/') out.path_prefix.pop_back();
  return out;
}

std::string extract_server_message(const std::string& body) {
  try {
    json j = json::parse(body);
    if (j.contains("error")) {
      const auto& err = j["error"];
      if (err.is_object() && err.contains("message")) return err["message"].get<std::string>();
      if (err.is_string()) return err.get<std::string>();
    }
    if (j.contains("message") && j["message"].is_string()) {
      return j["message"].get<std::string>();
    }
  } catch (const json::parse_error&) {
  }
  return body.substr(0, 400);
}

bool transient_status(int status) { return status == 429 || (status >= 500 && status < 600); }

}  // namespace

struct HttpBackend::Impl {
  Impl(const BackendConfig& cfg)
      : url(split_base_url(cfg.base_url)), client(url.origin), sem(cfg.max_parallel_requests) {
    const auto timeout = std::chrono::milliseconds(cfg.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    if (!cfg.api_key_env_var_name.empty()) {
      if (const char* key = std::getenv(cfg.api_key_env_var_name.c_str())) {
        client.set_default_headers({{"Authorization", std::string("Bearer ") + key}});
      }
    }
  }

  // POST with retry/backoff. Throws TransportError after exhausting attempts
  // on connection failures, BackendError on non-transient HTTP errors.
  json post_json(const std::string& endpoint, const json& body, const RetryPolicy& retry) {
    const std::string path = url.path_prefix + endpoint;
    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 1; attempt <= retry.max_attempts; ++attempt) {
      if (attempt > 1) {
        const int64_t backoff = static_cast<int64_t>(retry.backoff_base_ms)
                                << (attempt - 2);  // base, 2*base, 4*base, ...
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      }
      auto res = client.Post(path, payload, "application/json");
      if (!res) {
        last_error = "transport failure: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 200 && res->status < 300) {
        try {
          return json::parse(res->body);
        } catch (const json::parse_error& e) {
          throw BackendError("backend returned unparseable body: " + std::string(e.what()),
                             res->status);
        }
      }
      const std::string message = extract_server_message(res->body);
      if (!transient_status(res->status)) {
        throw BackendError("backend error " + std::to_string(res->status) + " on " + path +
                               ": " + message,
                           res->status);
      }
      last_error = "status " + std::to_string(res->status) + ": " + message;
    }
    throw TransportError("request to " + url.origin + path + " failed after " +
                         std::to_string(retry.max_attempts) + " attempts; last error: " +
                         last_error);
  }

  SplitUrl url;
  httplib::Client client;
  Semaphore sem;
};

HttpBackend::HttpBackend(BackendConfig config) : config_(std::move(config)) {
  config_.validate();
  impl_ = std::make_unique<Impl>(config_);
}

HttpBackend::~HttpBackend() = default;

GenerationResult HttpBackend::generate(const GenerationRequest& req) {
  req.validate();
  SemaphoreGuard guard(impl_->sem);

  json body;
  body["model"] = req.model_id;
  body["messages"] = json::array({json{{"role", "user"}, {"content", req.prompt}}});
  body["temperature"] = req.temperature;
  body["max_tokens"] = req.max_tokens;
  if (req.seed) body["seed"] = *req.seed;

  const auto start = std::chrono::steady_clock::now();
  json resp = impl_->post_json("/chat/completions", body, config_.retry);
  const auto elapsed = std::chrono::steady_clock::now() - start;

  GenerationResult out;
  try {
    out.text = resp.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw BackendError("chat completion response missing choices[0].message.content: " +
                       std::string(e.what()));
  }
  out.model_id = req.model_id;
  out.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count();
  out.from_cache = false;
  out.request_fingerprint = request_fingerprint(req);
  return out;
}

std::vector<clustering::EmbeddingVector> HttpBackend::embed(const std::vector<std::string>& texts,
                                                            const std::string& model_id) {
  if (texts.empty()) throw ValidationError("embed called with an empty text list");
  if (model_id.empty()) throw ValidationError("embed called with an empty model id");
  SemaphoreGuard guard(impl_->sem);

  json body;
  body["model"] = model_id;
  body["input"] = texts;
  body["encoding_format"] = "float";

  json resp = impl_->post_json("/embeddings", body, config_.retry);

  std::vector<clustering::EmbeddingVector> out(texts.size());
  std::vector<bool> filled(texts.size(), false);
  try {
    const auto& data = resp.at("data");
    if (data.size() != texts.size()) {
      throw BackendError("embedding response has " + std::to_string(data.size()) +
                         " rows for " + std::to_string(texts.size()) + " inputs");
    }
    for (size_t i = 0; i < data.size(); ++i) {
      const auto& row = data.at(i);
      const size_t idx = row.contains("index") ? row.at("index").get<size_t>() : i;
      if (idx >= out.size() || filled[idx]) {
        throw BackendError("embedding response has bad index " + std::to_string(idx));
      }
      out[idx].values = row.at("embedding").get<std::vector<double>>();
      filled[idx] = true;
    }
  } catch (const json::exception& e) {
    throw BackendError("embedding response malformed: " + std::string(e.what()));
  }
  return out;
}

}  // namespace audit::backend
