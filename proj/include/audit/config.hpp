#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "audit/backend.hpp"
#include "audit/corpus.hpp"

namespace audit::config {

enum class NeutralizeMode { off, mask_only, llm_only, mask_then_llm };

NeutralizeMode neutralize_mode_from_name(const std::string& name);
std::string neutralize_mode_name(NeutralizeMode m);

struct CorpusConfig {
  std::string path;
  std::string format = "jsonl";  // jsonl | csv
  std::string label_column;      // csv only
  std::string id_column;         // csv only
};

struct ModelConfig {
  std::string paraphrase = "llama-2-13b-chat";
  std::string neutralize = "llama-2-13b-chat";
  std::string infer = "openthinker2-7b";
  std::string embed = "all-mpnet-base-v2";
};

struct GenerationConfig {
  int m = 5;
  int n_gen = 1;
  double temperature_paraphrase = 0.7;
  double temperature_neutralize = 0.0;
  std::optional<double> temperature_infer;  // default 0, or 0.7 when n_gen >= 2
  int max_tokens = 512;
  uint64_t seed = 1234;

  double effective_temperature_infer() const {
    if (temperature_infer) return *temperature_infer;
    return n_gen >= 2 ? 0.7 : 0.0;
  }
};

struct MitigationConfig {
  bool majority_vote = false;
  NeutralizeMode neutralize = NeutralizeMode::off;
};

struct MetricsConfig {
  std::optional<std::vector<std::string>> names;  // default depends on mode
  double log_base = 2.718281828459045235;         // natural log (nats)
  double alpha = 1e-6;
  std::string estimator = "variant_marginal";  // variant_marginal | conditional
};

struct ClusteringConfig {
  int k = 4;
  int n_init = 50;
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
};

struct ReportConfig {
  std::string out_dir = "audit-out";
  bool per_task_breakdown = false;
  int heatmap_precision = 2;
  std::optional<bool> emit_timestamp;  // default: true, false under --mock
};

struct TemplateConfig {
  std::string tabular_path;
  std::string paraphrase_path;
  std::string neutralize_path;
};

struct RunConfig {
  std::string mode = "without_gt";  // with_gt | without_gt
  CorpusConfig corpus;
  std::vector<corpus::SubgroupSpec> subgroups;
  std::vector<std::string> global_lexicon;  // merged with lexicon_path contents
  std::string lexicon_path;
  backend::BackendConfig backend;
  ModelConfig models;
  GenerationConfig generation;
  MitigationConfig mitigation;
  MetricsConfig metrics;
  ClusteringConfig clustering;
  std::vector<std::string> label_alphabet = {">50K", "<=50K"};
  ReportConfig report;
  TemplateConfig templates;
  std::string cache_path;
  std::vector<std::string> refusal_patterns;  // empty -> built-in defaults

  bool with_ground_truth() const { return mode == "with_gt"; }
  std::vector<std::string> effective_metric_names() const;
  std::vector<std::string> effective_refusal_patterns() const;
  void validate() const;

  // Canonical JSON with every default resolved; hashing it identifies the
  // run configuration.
  std::string canonical_json() const;
  std::string config_hash() const;

  static RunConfig from_json_text(const std::string& text, const std::string& source_name);
  static RunConfig from_file(const std::string& path);
};

const std::vector<std::string>& default_refusal_patterns();

}  // namespace audit::config
