#pragma once

// Shared pipeline test fixtures: a scriptable backend plus config/corpus
// builders. The scripted handlers receive the raw GenerationRequest so tests
// can key behavior off purpose, embedded prompt block, persona, or seed.

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "audit/backend.hpp"
#include "audit/config.hpp"
#include "audit/corpus.hpp"
#include "audit/util.hpp"

namespace fixtures {

class ScriptedBackend : public audit::backend::Backend {
 public:
  using GenHandler = std::function<std::string(const audit::backend::GenerationRequest&)>;
  using EmbedHandler = std::function<std::vector<double>(const std::string&)>;

  GenHandler on_paraphrase = echo_block();
  GenHandler on_neutralize = echo_block();
  GenHandler on_infer = [](const audit::backend::GenerationRequest&) { return "[A]"; };
  EmbedHandler on_embed = hash_embedding(16, 0);
  int delay_ms = 0;

  audit::backend::GenerationResult generate(
      const audit::backend::GenerationRequest& req) override {
    Flight flight(*this);
    ++generate_calls_;
    if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
    audit::backend::GenerationResult res;
    res.model_id = req.model_id;
    res.request_fingerprint = audit::backend::request_fingerprint(req);
    switch (req.purpose) {
      case audit::backend::Purpose::paraphrase: res.text = on_paraphrase(req); break;
      case audit::backend::Purpose::neutralize: res.text = on_neutralize(req); break;
      case audit::backend::Purpose::infer: res.text = on_infer(req); break;
    }
    return res;
  }

  std::vector<audit::clustering::EmbeddingVector> embed(const std::vector<std::string>& texts,
                                                        const std::string&) override {
    Flight flight(*this);
    ++embed_calls_;
    std::vector<audit::clustering::EmbeddingVector> out;
    for (const auto& text : texts) {
      audit::clustering::EmbeddingVector v;
      v.values = on_embed(text);
      out.push_back(std::move(v));
    }
    return out;
  }

  std::string name() const override { return "scripted"; }

  int generate_calls() const { return generate_calls_.load(); }
  int max_in_flight() const { return max_in_flight_.load(); }

  // Returns the prompt embedded between the <<< >>> markers, or the whole
  // prompt when no markers are present.
  static std::string block_of(const audit::backend::GenerationRequest& req) {
    auto block = audit::corpus::extract_marked_block(req.prompt);
    return block ? *block : req.prompt;
  }

  static GenHandler echo_block() {
    return [](const audit::backend::GenerationRequest& req) { return block_of(req); };
  }

  // Deterministic pseudo-embedding from the text hash.
  static EmbedHandler hash_embedding(size_t dim, uint64_t seed) {
    return [dim, seed](const std::string& text) {
      uint64_t stream = audit::util::mix_seed(audit::util::fnv1a64(text), seed);
      std::vector<double> values;
      values.reserve(dim);
      for (size_t d = 0; d < dim; ++d) {
        values.push_back(audit::util::unit_double(audit::util::splitmix64(stream)) - 0.5);
      }
      return values;
    };
  }

 private:
  struct Flight {
    explicit Flight(ScriptedBackend& b) : backend(b) {
      const int now = ++backend.in_flight_;
      int prev = backend.max_in_flight_.load();
      while (prev < now && !backend.max_in_flight_.compare_exchange_weak(prev, now)) {
      }
    }
    ~Flight() { --backend.in_flight_; }
    ScriptedBackend& backend;
  };

  std::atomic<int> generate_calls_{0};
  std::atomic<int> embed_calls_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
};

inline std::vector<audit::corpus::SubgroupSpec> four_groups() {
  return {
      {"W,F", "a white female writer", {"white", "female"}},
      {"W,M", "a white male writer", {"white", "male"}},
      {"B,F", "a black female writer", {"black", "female"}},
      {"B,M", "a black male writer", {"black", "male"}},
  };
}

inline audit::config::RunConfig base_config(const std::string& mode) {
  audit::config::RunConfig cfg;
  cfg.mode = mode;
  cfg.subgroups = four_groups();
  cfg.generation.m = 2;
  cfg.generation.seed = 1000;
  cfg.metrics.log_base = 2.0;
  cfg.metrics.alpha = 0.0;
  cfg.metrics.names = std::vector<std::string>{"tv", "jsd"};
  cfg.clustering.k = 2;
  cfg.clustering.n_init = 5;
  cfg.clustering.seeds = {0, 1};
  cfg.label_alphabet = {"A", "B"};
  cfg.report.emit_timestamp = false;
  return cfg;
}

inline std::vector<audit::corpus::TaskInstance> make_tasks(int n, bool with_gt,
                                                           const std::string& gt = "A") {
  std::vector<audit::corpus::TaskInstance> tasks;
  for (int i = 0; i < n; ++i) {
    audit::corpus::TaskInstance t;
    t.task_id = "task-" + std::to_string(i);
    t.prompt = "Question number " + std::to_string(i) + ": what is the answer?";
    if (with_gt) t.ground_truth = gt;
    tasks.push_back(std::move(t));
  }
  return tasks;
}

// Variant index recovered from the sampling seed offset the pipeline applies.
inline int variant_of(const audit::backend::GenerationRequest& req, uint64_t base_seed) {
  return req.seed ? static_cast<int>(*req.seed - static_cast<int64_t>(base_seed)) : 0;
}

// The persona phrase mentions the group's tokens, so fixtures can recover the
// group id from a paraphrase instruction.
inline std::string group_of_instruction(const std::string& prompt,
                                        const std::vector<audit::corpus::SubgroupSpec>& groups) {
  for (const auto& g : groups) {
    if (prompt.find(g.persona_phrase) != std::string::npos) return g.group_id;
  }
  return "";
}

}  // namespace fixtures
