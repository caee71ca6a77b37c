#include "audit/backend.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "audit/corpus.hpp"
#include "audit/errors.hpp"
#include "audit/util.hpp"

namespace audit::backend {

using nlohmann::json;

std::string purpose_name(Purpose p) {
  switch (p) {
    case Purpose::paraphrase: return "paraphrase";
    case Purpose::neutralize: return "neutralize";
    case Purpose::infer: return "infer";
  }
  return "?";
}

void GenerationRequest::validate() const {
  if (prompt.empty()) throw ValidationError("generation request has an empty prompt");
  if (model_id.empty()) throw ValidationError("generation request has an empty model id");
  if (!(temperature >= 0.0)) throw ValidationError("temperature must be >= 0");
  if (max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
}

void BackendConfig::validate() const {
  if (max_parallel_requests < 1) throw ValidationError("max_parallel_requests must be >= 1");
  if (retry.max_attempts < 1) throw ValidationError("retry.max_attempts must be >= 1");
  if (retry.backoff_base_ms < 0) throw ValidationError("retry.backoff_base_ms must be >= 0");
  if (timeout_ms < 1) throw ValidationError("timeout_ms must be >= 1");
}

namespace {

json request_to_canonical_json(const GenerationRequest& req) {
  json j;  // nlohmann objects are key-sorted, so dump() is canonical
  j["max_tokens"] = req.max_tokens;
  j["model"] = req.model_id;
  j["prompt"] = req.prompt;
  j["purpose"] = purpose_name(req.purpose);
  if (req.seed) {
    j["seed"] = *req.seed;
  } else {
    j["seed"] = nullptr;
  }
  j["temperature"] = req.temperature;
  return j;
}

}  // namespace

std::string request_fingerprint(const GenerationRequest& req) {
  req.validate();
  return util::fnv1a64_hex(request_to_canonical_json(req).dump());
}

// ---------------------------------------------------------------------------
// MockBackend

namespace {

class InFlightGuard {
 public:
  InFlightGuard(std::atomic<int>& in_flight, std::atomic<int>& max_in_flight)
      : in_flight_(in_flight) {
    const int now = ++in_flight_;
    int prev = max_in_flight.load();
    while (prev < now && !max_in_flight.compare_exchange_weak(prev, now)) {
    }
  }
  ~InFlightGuard() { --in_flight_; }

 private:
  std::atomic<int>& in_flight_;
};

}  // namespace

MockBackend::MockBackend(std::map<std::string, std::string> fixtures, uint64_t seed,
                         std::vector<std::string> label_alphabet, size_t embed_dim)
    : fixtures_(std::move(fixtures)),
      seed_(seed),
      label_alphabet_(std::move(label_alphabet)),
      embed_dim_(embed_dim) {
  if (embed_dim_ == 0) throw ValidationError("mock embedding dimension must be >= 1");
}

GenerationResult MockBackend::generate(const GenerationRequest& req) {
  InFlightGuard guard(in_flight_, max_in_flight_);
  ++generate_calls_;
  GenerationResult res;
  res.model_id = req.model_id;
  res.request_fingerprint = request_fingerprint(req);
  res.latency_ms = 0;
  res.from_cache = false;

  auto it = fixtures_.find(res.request_fingerprint);
  if (it != fixtures_.end()) {
    res.text = it->second;
    return res;
  }

  const uint64_t h = util::mix_seed(util::fnv1a64(res.request_fingerprint), seed_);
  const std::string tag = util::to_hex(h).substr(0, 8);

  if (req.purpose == Purpose::infer) {
    if (!label_alphabet_.empty()) {
      const auto& label = label_alphabet_[h % label_alphabet_.size()];
      res.text = "Mock reasoning " + tag + ": the configured answer is [" + label + "]";
    } else {
      res.text = "mock-response-" + tag;
    }
    return res;
  }

  // Paraphrase/neutralize rewrites echo the embedded prompt so pipeline runs
  // stay shaped like real ones.
  const auto block = corpus::extract_marked_block(req.prompt);
  if (req.purpose == Purpose::paraphrase) {
    res.text = block ? (*block + " (restyled " + tag + ")") : ("mock-paraphrase-" + tag);
  } else {
    res.text = block ? *block : ("mock-neutralized-" + tag);
  }
  return res;
}

std::vector<clustering::EmbeddingVector> MockBackend::embed(const std::vector<std::string>& texts,
                                                            const std::string& model_id) {
  InFlightGuard guard(in_flight_, max_in_flight_);
  ++embed_calls_;
  if (texts.empty()) throw ValidationError("embed called with an empty text list");
  if (model_id.empty()) throw ValidationError("embed called with an empty model id");

  std::vector<clustering::EmbeddingVector> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    uint64_t stream = util::mix_seed(util::fnv1a64(text), seed_ ^ 0x5eedbeefULL);
    clustering::EmbeddingVector v;
    v.values.reserve(embed_dim_);
    for (size_t d = 0; d < embed_dim_; ++d) {
      // Box-Muller over the deterministic word stream.
      const double u1 = std::max(util::unit_double(util::splitmix64(stream)), 1e-12);
      const double u2 = util::unit_double(util::splitmix64(stream));
      v.values.push_back(std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
    }
    out.push_back(l2_normalize(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// ResponseCache

ResponseCache::ResponseCache(std::string path) : path_(std::move(path)) {
  std::ifstream in(path_);
  if (!in) {
    // Cold cache: verify the path is writable now rather than mid-run.
    std::ofstream probe(path_, std::ios::app);
    if (!probe) throw IoError("cache path is not writable: " + path_);
    return;
  }
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (util::trim(line).empty()) continue;
    try {
      json rec = json::parse(line);
      by_fingerprint_[rec.at("fp").get<std::string>()] = rec.at("text").get<std::string>();
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping corrupt cache line " << line_no << " in " << path_ << ": "
                << e.what() << "\n";
    }
  }
}

size_t ResponseCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return by_fingerprint_.size();
}

GenerationResult ResponseCache::generate_through(Backend& backend,
                                                 const GenerationRequest& req) {
  const std::string fp = request_fingerprint(req);
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = by_fingerprint_.find(fp);
    if (it != by_fingerprint_.end()) {
      GenerationResult res;
      res.text = it->second;
      res.model_id = req.model_id;
      res.latency_ms = 0;
      res.from_cache = true;
      res.request_fingerprint = fp;
      return res;
    }
  }

  GenerationResult res = backend.generate(req);

  json rec;
  rec["fp"] = fp;
  rec["model"] = req.model_id;
  rec["req"] = request_to_canonical_json(req);
  rec["text"] = res.text;
  rec["ts"] = util::iso8601_now();

  std::lock_guard<std::mutex> lock(mu_);
  if (by_fingerprint_.emplace(fp, res.text).second) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to cache: " + path_);
    out << rec.dump() << "\n";
  }
  return res;
}

GenerationResult cached_generate(ResponseCache& cache, Backend& backend,
                                 const GenerationRequest& req) {
  return cache.generate_through(backend, req);
}

}  // namespace audit::backend
