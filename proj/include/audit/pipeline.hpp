#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "audit/backend.hpp"
#include "audit/clustering.hpp"
#include "audit/config.hpp"
#include "audit/corpus.hpp"
#include "audit/metrics.hpp"

namespace audit::pipeline {

// One model response flowing through filter -> label/embedding extraction.
struct ResponseRecord {
  std::string response_id;
  std::string task_id;
  std::string group_id;
  int variant_index = 0;
  int generation_index = 0;
  std::string raw_text;
  std::optional<std::string> extracted_label;
  std::optional<clustering::EmbeddingVector> embedding;
  bool filtered = false;
  std::string filter_reason;  // empty | too_short | refusal | no_label
};

// Divergence matrix plus the provenance every reported matrix carries.
struct MatrixEntry {
  std::string phase;  // before | after_vote | after_neutralize
  metrics::DivergenceMatrix matrix;
  double alpha = 0.0;
  std::string estimator;
  std::vector<uint64_t> seeds;  // k-means seeds; empty for label-based matrices
};

struct PassCounts {
  size_t generated = 0;
  size_t used = 0;
  std::map<std::string, size_t> filtered;  // reason -> count
};

struct PerTaskMatrix {
  std::string task_id;
  MatrixEntry entry;
};

struct EvaluationReport {
  std::string mode;  // with_gt | without_gt

  std::map<std::string, double> accuracy_per_variant;  // with_gt only
  std::map<std::string, double> accuracy_voted;        // with_gt + majority_vote

  std::map<std::string, double> sensitivity;
  std::string sensitivity_estimator;
  std::string sensitivity_outcome_space;  // labels | clusters
  double log_base = 2.718281828459045;

  std::vector<MatrixEntry> matrices;
  std::vector<PerTaskMatrix> per_task_matrices;  // only when configured

  std::string config_hash;
  std::string backend_name;
  config::ModelConfig models;
  uint64_t seed = 0;
  std::vector<uint64_t> kmeans_seeds;
  int k = 0;
  int n_init = 0;
  int m = 0;
  int n_gen = 0;
  bool majority_vote = false;
  std::string neutralize_mode = "off";
  std::map<std::string, PassCounts> counts;  // phase -> counts
  std::optional<std::string> timestamp;
};

// Resolved run state: backend, optional cache, template texts, merged lexicon.
struct RunContext {
  const config::RunConfig& cfg;
  backend::Backend& llm;
  std::unique_ptr<backend::ResponseCache> cache;
  std::string tabular_template;
  std::string paraphrase_template;
  std::string neutralize_template;
  std::vector<std::string> lexicon;
};

RunContext make_context(const config::RunConfig& cfg, backend::Backend& llm);

// Tabular tasks render through the tabular template; free-text tasks pass
// their prompt through unchanged.
std::string base_prompt_for(const corpus::TaskInstance& task, const RunContext& ctx);

// Drops a leading assistant-pleasantry line ("Sure, ...") and unwraps a fully
// quoted body; paraphrasers routinely echo such framing around the rewrite.
std::string strip_instruction_echo(const std::string& text);

// m paraphrase variants of the task's base prompt in the subgroup's voice,
// variant_index 0..m-1. Backend failures carry task/group context.
std::vector<corpus::PromptRecord> paraphrase_stage(const corpus::TaskInstance& task,
                                                   const corpus::SubgroupSpec& subgroup, int m,
                                                   RunContext& ctx);

// mask_only strips lexicon terms, llm_only rewrites via the neutralize model,
// mask_then_llm does both in that order. mode == off is a validation error;
// the caller skips the stage instead.
corpus::PromptRecord neutralize_stage(const corpus::PromptRecord& p,
                                      config::NeutralizeMode mode, RunContext& ctx);

// n_gen generations for one prompt. Label extraction runs in with-ground-truth
// mode. A whitespace-only prompt yields records that filter as "empty" rather
// than a failed backend call.
std::vector<ResponseRecord> infer_stage(const corpus::PromptRecord& p, int n_gen,
                                        RunContext& ctx);

// Content of the last [...] pair, canonicalized against the label alphabet;
// absent when no bracket or the content is outside the alphabet.
std::optional<std::string> extract_label(const std::string& raw_text,
                                         const std::vector<std::string>& alphabet);

// Marks filtered=true with reason empty / too_short / refusal / no_label
// (no_label only when require_label).
void filter_responses(std::vector<ResponseRecord>& records,
                      const std::vector<std::string>& refusal_patterns, bool require_label);

// Most frequent label; ties break to the earliest first occurrence.
std::string majority_vote(const std::vector<std::string>& labels);

EvaluationReport run_with_ground_truth(const std::vector<corpus::TaskInstance>& tasks,
                                       const config::RunConfig& cfg, backend::Backend& llm);

EvaluationReport run_without_ground_truth(const std::vector<corpus::TaskInstance>& tasks,
                                          const config::RunConfig& cfg, backend::Backend& llm);

// Dispatches on cfg.mode.
EvaluationReport run(const std::vector<corpus::TaskInstance>& tasks,
                     const config::RunConfig& cfg, backend::Backend& llm);

}  // namespace audit::pipeline
