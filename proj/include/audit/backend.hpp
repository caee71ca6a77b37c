#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "audit/clustering.hpp"

namespace audit::backend {

enum class Purpose { paraphrase, neutralize, infer };

std::string purpose_name(Purpose p);

struct GenerationRequest {
  std::string model_id;
  std::string prompt;
  double temperature = 0.0;
  int max_tokens = 512;
  std::optional<int64_t> seed;
  Purpose purpose = Purpose::infer;

  void validate() const;
};

struct GenerationResult {
  std::string text;
  std::string model_id;
  int64_t latency_ms = 0;
  bool from_cache = false;
  std::string request_fingerprint;
};

struct RetryPolicy {
  int max_attempts = 3;
  int backoff_base_ms = 250;
};

struct BackendConfig {
  std::string base_url = "http://localhost:8000/v1";
  std::string api_key_env_var_name = "OPENAI_API_KEY";
  int max_parallel_requests = 4;
  RetryPolicy retry;
  int timeout_ms = 120000;

  void validate() const;
};

// Canonical-serialization hash of the full request; identical requests get
// identical fingerprints across runs and platforms.
std::string request_fingerprint(const GenerationRequest& req);

class Backend {
 public:
  virtual ~Backend() = default;
  virtual GenerationResult generate(const GenerationRequest& req) = 0;
  virtual std::vector<clustering::EmbeddingVector> embed(const std::vector<std::string>& texts,
                                                         const std::string& model_id) = 0;
  virtual std::string name() const = 0;
};

// Network-free backend. generate() returns the fixture text when the request
// fingerprint is in the table, otherwise a deterministic pseudo-response
// derived from (request, seed): paraphrase/neutralize echo the marked prompt
// block, infer emits a bracketed label from label_alphabet when one is
// configured. embed() derives a deterministic unit vector from (text, seed).
class MockBackend : public Backend {
 public:
  explicit MockBackend(std::map<std::string, std::string> fixtures = {}, uint64_t seed = 0,
                       std::vector<std::string> label_alphabet = {}, size_t embed_dim = 16);

  GenerationResult generate(const GenerationRequest& req) override;
  std::vector<clustering::EmbeddingVector> embed(const std::vector<std::string>& texts,
                                                 const std::string& model_id) override;
  std::string name() const override { return "mock"; }

  int generate_calls() const { return generate_calls_.load(); }
  int embed_calls() const { return embed_calls_.load(); }
  int max_in_flight() const { return max_in_flight_.load(); }

 private:
  std::map<std::string, std::string> fixtures_;
  uint64_t seed_;
  std::vector<std::string> label_alphabet_;
  size_t embed_dim_;
  std::atomic<int> generate_calls_{0};
  std::atomic<int> embed_calls_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
};

// OpenAI-compatible client: POST {base_url}/chat/completions and
// {base_url}/embeddings. Transient failures (transport, 429, 5xx) retry with
// exponential backoff up to retry.max_attempts; other statuses surface as
// BackendError with status and server message. In-flight requests are capped
// at max_parallel_requests.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(BackendConfig config);
  ~HttpBackend() override;

  GenerationResult generate(const GenerationRequest& req) override;
  std::vector<clustering::EmbeddingVector> embed(const std::vector<std::string>& texts,
                                                 const std::string& model_id) override;
  std::string name() const override { return "http:" + config_.base_url; }

 private:
  struct Impl;
  BackendConfig config_;
  std::unique_ptr<Impl> impl_;
};

// Append-only JSON Lines response cache keyed by request fingerprint.
// Corrupt lines are skipped with a warning, never fatal.
class ResponseCache {
 public:
  explicit ResponseCache(std::string path);

  // Cache lookup; on miss, calls the backend and appends the new record.
  GenerationResult generate_through(Backend& backend, const GenerationRequest& req);

  size_t size() const;
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::map<std::string, std::string> by_fingerprint_;
};

GenerationResult cached_generate(ResponseCache& cache, Backend& backend,
                                 const GenerationRequest& req);

}  // namespace audit::backend
