#include "audit/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <functional>
#include <mutex>
#include <set>
#include <thread>

#include "audit/errors.hpp"
#include "audit/util.hpp"

namespace audit::pipeline {

namespace {

using backend::GenerationRequest;
using backend::GenerationResult;
using backend::Purpose;
using config::NeutralizeMode;
using corpus::PromptRecord;
using corpus::SubgroupSpec;
using corpus::TaskInstance;
using metrics::CategoricalDistribution;

void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  if (n == 0) return;
  workers = std::max(1, std::min(workers, static_cast<int>(n)));
  if (workers == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto body = [&] {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard<std::mutex> lock(err_mu);
        if (first_error) return;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

template <typename Fn>
auto with_unit_context(const std::string& task_id, const std::string& group_id, Fn&& fn) {
  try {
    return fn();
  } catch (const TransportError& e) {
    throw TransportError("task '" + task_id + "' group '" + group_id + "': " + e.what());
  } catch (const BackendError& e) {
    throw BackendError("task '" + task_id + "' group '" + group_id + "': " + e.what(),
                       e.status());
  }
}

GenerationResult ctx_generate(RunContext& ctx, Purpose purpose, const std::string& prompt,
                              int64_t seed_offset) {
  GenerationRequest req;
  req.prompt = prompt;
  req.purpose = purpose;
  req.max_tokens = ctx.cfg.generation.max_tokens;
  switch (purpose) {
    case Purpose::paraphrase:
      req.model_id = ctx.cfg.models.paraphrase;
      req.temperature = ctx.cfg.generation.temperature_paraphrase;
      break;
    case Purpose::neutralize:
      req.model_id = ctx.cfg.models.neutralize;
      req.temperature = ctx.cfg.generation.temperature_neutralize;
      break;
    case Purpose::infer:
      req.model_id = ctx.cfg.models.infer;
      req.temperature = ctx.cfg.generation.effective_temperature_infer();
      break;
  }
  // Greedy decoding ignores sampling seeds, so the per-variant/per-generation
  // offset only applies when the stage actually samples.
  req.seed = static_cast<int64_t>(ctx.cfg.generation.seed) +
             (req.temperature > 0.0 ? seed_offset : 0);
  if (ctx.cache) return ctx.cache->generate_through(ctx.llm, req);
  return ctx.llm.generate(req);
}

size_t non_whitespace_count(const std::string& s) {
  size_t n = 0;
  for (char c : s) {
    if (!std::isspace(static_cast<unsigned char>(c))) ++n;
  }
  return n;
}

}  // namespace

RunContext make_context(const config::RunConfig& cfg, backend::Backend& llm) {
  cfg.validate();
  RunContext ctx{cfg, llm, nullptr, {}, {}, {}, {}};
  if (!cfg.cache_path.empty()) {
    ctx.cache = std::make_unique<backend::ResponseCache>(cfg.cache_path);
  }
  ctx.tabular_template = cfg.templates.tabular_path.empty()
                             ? corpus::default_tabular_template()
                             : util::read_file(cfg.templates.tabular_path);
  ctx.paraphrase_template = cfg.templates.paraphrase_path.empty()
                                ? corpus::default_paraphrase_template()
                                : util::read_file(cfg.templates.paraphrase_path);
  ctx.neutralize_template = cfg.templates.neutralize_path.empty()
                                ? corpus::default_neutralize_template()
                                : util::read_file(cfg.templates.neutralize_path);
  std::vector<std::string> global = cfg.global_lexicon;
  if (!cfg.lexicon_path.empty()) {
    for (auto& term : corpus::load_lexicon(cfg.lexicon_path)) global.push_back(std::move(term));
  }
  if (global.empty() && cfg.lexicon_path.empty()) global = corpus::default_lexicon();
  ctx.lexicon = corpus::combine_lexicons(cfg.subgroups, global);
  return ctx;
}

std::string base_prompt_for(const TaskInstance& task, const RunContext& ctx) {
  if (task.is_tabular()) return corpus::serialize_tabular_row(task.row, ctx.tabular_template);
  if (util::trim(task.prompt).empty()) {
    throw ValidationError("task '" + task.task_id + "' has an empty prompt");
  }
  return task.prompt;
}

std::string strip_instruction_echo(const std::string& text) {
  static const std::vector<std::string> echo_prefixes = {
      "sure,",     "sure!",     "sure.",    "sure:",  "here is", "here's",
      "certainly", "of course", "okay,",    "okay!",  "ok,",     "ok!",
      "here you go",
  };
  std::string out = util::trim(text);

  const size_t nl = out.find('\n');
  if (nl != std::string::npos) {
    const std::string first_line = util::trim(out.substr(0, nl));
    for (const auto& prefix : echo_prefixes) {
      if (util::starts_with_icase(first_line, prefix)) {
        out = util::trim(out.substr(nl + 1));
        break;
      }
    }
  }

  if (out.size() >= 2) {
    const char open = out.front();
    const char close = out.back();
    if ((open == '"' && close == '"') || (open == '\'' && close == '\'')) {
      const std::string inner = out.substr(1, out.size() - 2);
      // Unwrap only a single outer quotation, not internal quotes.
      if (inner.find(open) == std::string::npos) out = util::trim(inner);
    }
  }
  return out;
}

std::vector<PromptRecord> paraphrase_stage(const TaskInstance& task, const SubgroupSpec& subgroup,
                                           int m, RunContext& ctx) {
  if (m < 1) throw ValidationError("paraphrase count m must be >= 1");
  return with_unit_context(task.task_id, subgroup.group_id, [&] {
    const std::string base = base_prompt_for(task, ctx);
    std::vector<PromptRecord> out;
    out.reserve(static_cast<size_t>(m));
    for (int v = 0; v < m; ++v) {
      const std::string instruction =
          corpus::build_paraphrase_instruction(subgroup, base, ctx.paraphrase_template);
      GenerationResult res = ctx_generate(ctx, Purpose::paraphrase, instruction, v);
      PromptRecord rec;
      rec.task_id = task.task_id;
      rec.group_id = subgroup.group_id;
      rec.variant_index = v;
      rec.stage = corpus::Stage::paraphrased;
      rec.text = strip_instruction_echo(res.text);
      out.push_back(std::move(rec));
    }
    return out;
  });
}

PromptRecord neutralize_stage(const PromptRecord& p, NeutralizeMode mode, RunContext& ctx) {
  if (mode == NeutralizeMode::off) {
    throw ValidationError("neutralize_stage called with mode 'off'; skip the stage instead");
  }
  return with_unit_context(p.task_id, p.group_id, [&] {
    PromptRecord out = p;
    out.stage = corpus::Stage::neutralized;

    std::string text = p.text;
    if (mode == NeutralizeMode::mask_only || mode == NeutralizeMode::mask_then_llm) {
      text = corpus::mask_demographic_terms(text, ctx.lexicon);
    }
    if (mode == NeutralizeMode::llm_only || mode == NeutralizeMode::mask_then_llm) {
      if (util::trim(text).empty()) {
        // Masking annihilated the prompt; the empty text filters downstream.
        out.text = text;
        return out;
      }
      const std::string instruction =
          corpus::build_neutralization_instruction(text, ctx.neutralize_template);
      GenerationResult res = ctx_generate(ctx, Purpose::neutralize, instruction, 0);
      text = strip_instruction_echo(res.text);
    }
    out.text = text;
    return out;
  });
}

std::vector<ResponseRecord> infer_stage(const PromptRecord& p, int n_gen, RunContext& ctx) {
  if (n_gen < 1) throw ValidationError("n_gen must be >= 1");
  return with_unit_context(p.task_id, p.group_id, [&] {
    std::vector<ResponseRecord> out;
    out.reserve(static_cast<size_t>(n_gen));
    const bool dead_prompt = util::trim(p.text).empty();
    for (int g = 0; g < n_gen; ++g) {
      ResponseRecord rec;
      rec.task_id = p.task_id;
      rec.group_id = p.group_id;
      rec.variant_index = p.variant_index;
      rec.generation_index = g;
      rec.response_id = p.task_id + "/" + p.group_id + "/v" + std::to_string(p.variant_index) +
                        "/g" + std::to_string(g) + "/" + corpus::stage_name(p.stage);
      if (dead_prompt) {
        rec.raw_text = "";
      } else {
        rec.raw_text = ctx_generate(ctx, Purpose::infer, p.text, g).text;
      }
      if (ctx.cfg.with_ground_truth()) {
        rec.extracted_label = extract_label(rec.raw_text, ctx.cfg.label_alphabet);
      }
      out.push_back(std::move(rec));
    }
    return out;
  });
}

std::optional<std::string> extract_label(const std::string& raw_text,
                                         const std::vector<std::string>& alphabet) {
  std::optional<std::string> content;
  size_t pos = 0;
  while (true) {
    const size_t open = raw_text.find('[', pos);
    if (open == std::string::npos) break;
    const size_t close = raw_text.find(']', open + 1);
    if (close == std::string::npos) break;
    content = raw_text.substr(open + 1, close - open - 1);  // last complete pair wins
    pos = close + 1;
  }
  if (!content) return std::nullopt;
  const std::string canon = util::uppercase(util::trim(*content));
  for (const auto& label : alphabet) {
    if (util::uppercase(label) == canon) return label;
  }
  return std::nullopt;
}

void filter_responses(std::vector<ResponseRecord>& records,
                      const std::vector<std::string>& refusal_patterns, bool require_label) {
  for (auto& rec : records) {
    if (rec.filtered) continue;
    const std::string trimmed = util::trim(rec.raw_text);
    if (trimmed.empty()) {
      rec.filtered = true;
      rec.filter_reason = "empty";
      continue;
    }
    if (non_whitespace_count(trimmed) < 3) {
      rec.filtered = true;
      rec.filter_reason = "too_short";
      continue;
    }
    bool refusal = false;
    for (const auto& pattern : refusal_patterns) {
      if (util::starts_with_icase(trimmed, pattern)) {
        refusal = true;
        break;
      }
    }
    if (refusal) {
      rec.filtered = true;
      rec.filter_reason = "refusal";
      continue;
    }
    if (require_label && !rec.extracted_label) {
      rec.filtered = true;
      rec.filter_reason = "no_label";
    }
  }
}

std::string majority_vote(const std::vector<std::string>& labels) {
  if (labels.empty()) throw ValidationError("majority vote over empty label list: all responses filtered");
  std::vector<std::string> order;
  std::map<std::string, int> counts;
  for (const auto& label : labels) {
    if (counts.emplace(label, 0).second) order.push_back(label);
    ++counts[label];
  }
  std::string best = order.front();
  for (const auto& label : order) {
    if (counts[label] > counts[best]) best = label;  // strict: earliest wins ties
  }
  return best;
}

// ---------------------------------------------------------------------------
// Pass collection and aggregation

namespace {

struct CollectedPasses {
  std::vector<ResponseRecord> before;
  std::vector<ResponseRecord> after;  // empty when neutralization is off
};

CollectedPasses collect_passes(const std::vector<TaskInstance>& tasks, RunContext& ctx) {
  const auto& groups = ctx.cfg.subgroups;
  const NeutralizeMode mode = ctx.cfg.mitigation.neutralize;
  const bool neutral = mode != NeutralizeMode::off;
  const int n_gen = ctx.cfg.generation.n_gen;

  struct UnitOutput {
    std::vector<ResponseRecord> before;
    std::vector<ResponseRecord> after;
  };
  const size_t n_units = tasks.size() * groups.size();
  std::vector<UnitOutput> units(n_units);

  parallel_for(n_units, ctx.cfg.backend.max_parallel_requests, [&](size_t u) {
    const TaskInstance& task = tasks[u / groups.size()];
    const SubgroupSpec& group = groups[u % groups.size()];
    auto prompts = paraphrase_stage(task, group, ctx.cfg.generation.m, ctx);
    UnitOutput& out = units[u];
    for (const auto& p : prompts) {
      auto recs = infer_stage(p, n_gen, ctx);
      out.before.insert(out.before.end(), std::make_move_iterator(recs.begin()),
                        std::make_move_iterator(recs.end()));
    }
    if (neutral) {
      for (const auto& p : prompts) {
        auto np = neutralize_stage(p, mode, ctx);
        auto recs = infer_stage(np, n_gen, ctx);
        out.after.insert(out.after.end(), std::make_move_iterator(recs.begin()),
                         std::make_move_iterator(recs.end()));
      }
    }
  });

  CollectedPasses passes;
  for (auto& unit : units) {
    passes.before.insert(passes.before.end(), std::make_move_iterator(unit.before.begin()),
                         std::make_move_iterator(unit.before.end()));
    passes.after.insert(passes.after.end(), std::make_move_iterator(unit.after.begin()),
                        std::make_move_iterator(unit.after.end()));
  }
  return passes;
}

PassCounts count_pass(const std::vector<ResponseRecord>& records) {
  PassCounts counts;
  counts.generated = records.size();
  for (const auto& rec : records) {
    if (rec.filtered) {
      ++counts.filtered[rec.filter_reason];
    } else {
      ++counts.used;
    }
  }
  return counts;
}

// Unfiltered records of one pass indexed by task (corpus order) then group.
using UnitIndex = std::vector<std::map<std::string, std::vector<const ResponseRecord*>>>;

UnitIndex index_units(const std::vector<TaskInstance>& tasks,
                      const std::vector<ResponseRecord>& records) {
  std::map<std::string, size_t> task_pos;
  for (size_t i = 0; i < tasks.size(); ++i) task_pos[tasks[i].task_id] = i;
  UnitIndex index(tasks.size());
  for (const auto& rec : records) {
    if (rec.filtered) continue;
    index[task_pos.at(rec.task_id)][rec.group_id].push_back(&rec);
  }
  return index;
}

const std::vector<const ResponseRecord*>& usable_records(const UnitIndex& index, size_t task_pos,
                                                         const TaskInstance& task,
                                                         const std::string& group_id) {
  auto it = index[task_pos].find(group_id);
  if (it == index[task_pos].end() || it->second.empty()) {
    throw ValidationError("subgroup '" + group_id + "' has no usable responses for task '" +
                          task.task_id + "'");
  }
  return it->second;
}

struct LabelAggregation {
  std::map<std::string, double> accuracy_per_variant;
  std::map<std::string, double> accuracy_voted;
  std::map<std::string, double> sensitivity;
  // metric name -> one matrix per task, corpus order
  std::map<std::string, std::vector<metrics::DivergenceMatrix>> task_matrices;
  std::map<std::string, std::vector<metrics::DivergenceMatrix>> voted_task_matrices;
};

LabelAggregation aggregate_labels(const std::vector<TaskInstance>& tasks,
                                  const std::vector<ResponseRecord>& records,
                                  const config::RunConfig& cfg) {
  const auto& alphabet = cfg.label_alphabet;
  const double base = cfg.metrics.log_base;
  const UnitIndex index = index_units(tasks, records);
  const auto metric_names = cfg.effective_metric_names();

  std::map<std::string, size_t> correct, total, voted_correct;
  std::map<std::string, double> entropy_sum;
  LabelAggregation agg;

  for (size_t t = 0; t < tasks.size(); ++t) {
    const TaskInstance& task = tasks[t];
    // Canonicalize the ground truth to its alphabet spelling so label
    // comparisons are exact.
    std::string gt = util::uppercase(*task.ground_truth);
    for (const auto& label : alphabet) {
      if (util::uppercase(label) == gt) {
        gt = label;
        break;
      }
    }
    std::vector<std::pair<std::string, CategoricalDistribution>> dists;
    std::vector<std::pair<std::string, CategoricalDistribution>> voted_dists;

    for (const auto& group : cfg.subgroups) {
      const auto& recs = usable_records(index, t, task, group.group_id);

      std::vector<std::string> labels;
      labels.reserve(recs.size());
      std::vector<double> label_counts(alphabet.size(), 0.0);
      for (const ResponseRecord* rec : recs) {
        labels.push_back(*rec->extracted_label);
        for (size_t a = 0; a < alphabet.size(); ++a) {
          if (alphabet[a] == *rec->extracted_label) label_counts[a] += 1.0;
        }
        total[group.group_id] += 1;
        if (*rec->extracted_label == gt) correct[group.group_id] += 1;
      }
      const auto dist = CategoricalDistribution::from_counts(alphabet, label_counts);
      dists.emplace_back(group.group_id, dist);

      const std::string voted = majority_vote(labels);
      if (voted == gt) voted_correct[group.group_id] += 1;
      std::vector<double> voted_counts(alphabet.size(), 0.0);
      for (size_t a = 0; a < alphabet.size(); ++a) {
        if (alphabet[a] == voted) voted_counts[a] = 1.0;
      }
      voted_dists.emplace_back(group.group_id,
                               CategoricalDistribution::from_counts(alphabet, voted_counts));

      if (cfg.metrics.estimator == "conditional") {
        std::map<int, std::vector<double>> variant_counts;
        for (const ResponseRecord* rec : recs) {
          auto it = variant_counts
                        .emplace(rec->variant_index, std::vector<double>(alphabet.size(), 0.0))
                        .first;
          for (size_t a = 0; a < alphabet.size(); ++a) {
            if (alphabet[a] == *rec->extracted_label) it->second[a] += 1.0;
          }
        }
        metrics::ConditionalDistributionSet cset;
        const double w = 1.0 / static_cast<double>(variant_counts.size());
        for (const auto& [variant, counts] : variant_counts) {
          cset.conditioners.push_back("v" + std::to_string(variant));
          cset.weights.push_back(w);
          cset.per_variant.push_back(CategoricalDistribution::from_counts(alphabet, counts));
        }
        entropy_sum[group.group_id] += metrics::conditional_entropy(cset, base);
      } else {
        entropy_sum[group.group_id] += metrics::entropy(dist, base);
      }
    }

    for (const auto& name : metric_names) {
      const auto metric = metrics::metric_from_name(name);
      agg.task_matrices[name].push_back(
          metrics::divergence_matrix(dists, metric, base, cfg.metrics.alpha));
      if (cfg.mitigation.majority_vote) {
        agg.voted_task_matrices[name].push_back(
            metrics::divergence_matrix(voted_dists, metric, base, cfg.metrics.alpha));
      }
    }
  }

  const double n_tasks = static_cast<double>(tasks.size());
  for (const auto& group : cfg.subgroups) {
    const auto& g = group.group_id;
    agg.accuracy_per_variant[g] =
        static_cast<double>(correct[g]) / static_cast<double>(total[g]);
    if (cfg.mitigation.majority_vote) {
      agg.accuracy_voted[g] = static_cast<double>(voted_correct[g]) / n_tasks;
    }
    agg.sensitivity[g] = entropy_sum[g] / n_tasks;
  }
  return agg;
}

struct ClusterAggregation {
  std::map<std::string, double> sensitivity;
  std::map<std::string, metrics::DivergenceMatrix> matrices;  // metric name -> averaged matrix
};

// Embeds the unfiltered records in place and runs the clustering estimators.
ClusterAggregation aggregate_clusters(const std::vector<TaskInstance>& tasks,
                                      std::vector<ResponseRecord>& records, RunContext& ctx) {
  const config::RunConfig& cfg = ctx.cfg;

  std::vector<size_t> live;
  std::vector<std::string> texts;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].filtered) continue;
    live.push_back(i);
    texts.push_back(records[i].raw_text);
  }
  if (live.empty()) throw ValidationError("all responses were filtered; nothing to embed");

  constexpr size_t kBatch = 128;
  std::vector<clustering::EmbeddingVector> embeddings;
  embeddings.reserve(live.size());
  for (size_t start = 0; start < texts.size(); start += kBatch) {
    const size_t end = std::min(texts.size(), start + kBatch);
    auto batch = ctx.llm.embed(std::vector<std::string>(texts.begin() + start, texts.begin() + end),
                               cfg.models.embed);
    for (auto& v : batch) embeddings.push_back(std::move(v));
  }
  for (size_t i = 0; i < live.size(); ++i) {
    embeddings[i].source_response_id = records[live[i]].response_id;
    embeddings[i] = clustering::l2_normalize(embeddings[i]);
    records[live[i]].embedding = embeddings[i];
  }

  std::map<std::string, std::string> group_of;
  for (size_t i : live) group_of[records[i].response_id] = records[i].group_id;

  // Each (task, group) must still have at least one usable response.
  const UnitIndex index = index_units(tasks, records);
  for (size_t t = 0; t < tasks.size(); ++t) {
    for (const auto& group : cfg.subgroups) {
      usable_records(index, t, tasks[t], group.group_id);
    }
  }

  std::vector<std::string> group_order;
  for (const auto& g : cfg.subgroups) group_order.push_back(g.group_id);

  ClusterAggregation agg;
  for (const auto& name : cfg.effective_metric_names()) {
    agg.matrices.emplace(
        name, clustering::clustered_divergence_run(
                  embeddings, group_of, cfg.clustering.k, cfg.clustering.n_init,
                  cfg.clustering.seeds, metrics::metric_from_name(name), cfg.metrics.log_base,
                  cfg.metrics.alpha, group_order));
  }

  // Sensitivity over cluster outcomes: per-(task, group) entropy of the
  // cluster-id distribution, averaged over tasks, then over seeds.
  const auto outcomes = clustering::cluster_outcomes(cfg.clustering.k);
  std::map<std::string, double> entropy_sum;
  for (uint64_t seed : cfg.clustering.seeds) {
    auto model =
        clustering::kmeans_fit(embeddings, cfg.clustering.k, cfg.clustering.n_init, seed);
    for (size_t t = 0; t < tasks.size(); ++t) {
      for (const auto& group : cfg.subgroups) {
        const auto& recs = usable_records(index, t, tasks[t], group.group_id);
        std::vector<double> counts(outcomes.size(), 0.0);
        for (const ResponseRecord* rec : recs) {
          counts[static_cast<size_t>(model.assignments.at(rec->response_id))] += 1.0;
        }
        entropy_sum[group.group_id] += metrics::entropy(
            CategoricalDistribution::from_counts(outcomes, counts), cfg.metrics.log_base);
      }
    }
  }
  const double denom =
      static_cast<double>(tasks.size()) * static_cast<double>(cfg.clustering.seeds.size());
  for (const auto& group : cfg.subgroups) {
    agg.sensitivity[group.group_id] = entropy_sum[group.group_id] / denom;
  }
  return agg;
}

void validate_tasks_for_mode(const std::vector<TaskInstance>& tasks,
                             const config::RunConfig& cfg) {
  if (tasks.empty()) throw ValidationError("empty task list");
  std::set<std::string> ids;
  for (const auto& t : tasks) {
    if (!ids.insert(t.task_id).second) throw ValidationError("duplicate task_id: " + t.task_id);
    if (cfg.with_ground_truth()) {
      if (!t.ground_truth) {
        throw ValidationError("with_gt mode but task '" + t.task_id + "' has no ground truth");
      }
      const std::string canon = util::uppercase(*t.ground_truth);
      bool known = false;
      for (const auto& label : cfg.label_alphabet) {
        if (util::uppercase(label) == canon) known = true;
      }
      if (!known) {
        throw ValidationError("task '" + t.task_id + "' ground truth '" + *t.ground_truth +
                              "' is not in the label alphabet");
      }
    } else if (t.ground_truth) {
      throw ValidationError("without_gt mode but task '" + t.task_id + "' carries ground truth");
    }
  }
}

EvaluationReport base_report(const config::RunConfig& cfg, backend::Backend& llm) {
  EvaluationReport report;
  report.mode = cfg.mode;
  report.sensitivity_estimator = cfg.metrics.estimator;
  report.log_base = cfg.metrics.log_base;
  report.config_hash = cfg.config_hash();
  report.backend_name = llm.name();
  report.models = cfg.models;
  report.seed = cfg.generation.seed;
  report.kmeans_seeds = cfg.clustering.seeds;
  report.k = cfg.clustering.k;
  report.n_init = cfg.clustering.n_init;
  report.m = cfg.generation.m;
  report.n_gen = cfg.generation.n_gen;
  report.majority_vote = cfg.mitigation.majority_vote;
  report.neutralize_mode = config::neutralize_mode_name(cfg.mitigation.neutralize);
  if (cfg.report.emit_timestamp.value_or(true)) report.timestamp = util::iso8601_now();
  return report;
}

MatrixEntry make_entry(const config::RunConfig& cfg, const std::string& phase,
                       metrics::DivergenceMatrix matrix, bool clustered) {
  MatrixEntry entry;
  entry.phase = phase;
  entry.matrix = std::move(matrix);
  entry.alpha = cfg.metrics.alpha;
  entry.estimator = cfg.metrics.estimator;
  if (clustered) entry.seeds = cfg.clustering.seeds;
  return entry;
}

// Ground-truth mode: ground_truth is dereferenced per task, so tasks must be
// validated first.
void append_label_matrices(EvaluationReport& report, const config::RunConfig& cfg,
                           const std::vector<TaskInstance>& tasks,
                           const LabelAggregation& agg, const std::string& phase,
                           const std::string& voted_phase) {
  for (const auto& name : cfg.effective_metric_names()) {
    report.matrices.push_back(
        make_entry(cfg, phase, metrics::average_matrices(agg.task_matrices.at(name)), false));
    if (cfg.report.per_task_breakdown) {
      for (size_t t = 0; t < tasks.size(); ++t) {
        report.per_task_matrices.push_back(
            {tasks[t].task_id, make_entry(cfg, phase, agg.task_matrices.at(name)[t], false)});
      }
    }
  }
  if (!voted_phase.empty() && cfg.mitigation.majority_vote) {
    for (const auto& name : cfg.effective_metric_names()) {
      report.matrices.push_back(make_entry(
          cfg, voted_phase, metrics::average_matrices(agg.voted_task_matrices.at(name)), false));
      if (cfg.report.per_task_breakdown) {
        for (size_t t = 0; t < tasks.size(); ++t) {
          report.per_task_matrices.push_back(
              {tasks[t].task_id,
               make_entry(cfg, voted_phase, agg.voted_task_matrices.at(name)[t], false)});
        }
      }
    }
  }
}

}  // namespace

EvaluationReport run_with_ground_truth(const std::vector<TaskInstance>& tasks,
                                       const config::RunConfig& cfg, backend::Backend& llm) {
  if (!cfg.with_ground_truth()) {
    throw ValidationError("run_with_ground_truth needs mode 'with_gt'");
  }
  validate_tasks_for_mode(tasks, cfg);
  RunContext ctx = make_context(cfg, llm);

  CollectedPasses passes = collect_passes(tasks, ctx);
  const auto refusals = cfg.effective_refusal_patterns();
  filter_responses(passes.before, refusals, /*require_label=*/true);
  filter_responses(passes.after, refusals, /*require_label=*/true);

  EvaluationReport report = base_report(cfg, llm);
  report.sensitivity_outcome_space = "labels";
  report.counts["before"] = count_pass(passes.before);

  const LabelAggregation agg = aggregate_labels(tasks, passes.before, cfg);
  report.accuracy_per_variant = agg.accuracy_per_variant;
  report.accuracy_voted = agg.accuracy_voted;
  report.sensitivity = agg.sensitivity;
  append_label_matrices(report, cfg, tasks, agg, "before", "after_vote");

  if (cfg.mitigation.neutralize != NeutralizeMode::off) {
    report.counts["after_neutralize"] = count_pass(passes.after);
    const LabelAggregation after = aggregate_labels(tasks, passes.after, cfg);
    append_label_matrices(report, cfg, tasks, after, "after_neutralize", "");
  }
  return report;
}

EvaluationReport run_without_ground_truth(const std::vector<TaskInstance>& tasks,
                                          const config::RunConfig& cfg, backend::Backend& llm) {
  if (cfg.with_ground_truth()) {
    throw ValidationError("run_without_ground_truth needs mode 'without_gt'");
  }
  validate_tasks_for_mode(tasks, cfg);
  RunContext ctx = make_context(cfg, llm);

  CollectedPasses passes = collect_passes(tasks, ctx);
  const auto refusals = cfg.effective_refusal_patterns();
  filter_responses(passes.before, refusals, /*require_label=*/false);
  filter_responses(passes.after, refusals, /*require_label=*/false);

  EvaluationReport report = base_report(cfg, llm);
  report.sensitivity_outcome_space = "clusters";
  report.counts["before"] = count_pass(passes.before);

  ClusterAggregation agg = aggregate_clusters(tasks, passes.before, ctx);
  report.sensitivity = agg.sensitivity;
  for (const auto& name : cfg.effective_metric_names()) {
    report.matrices.push_back(make_entry(cfg, "before", agg.matrices.at(name), true));
  }

  if (cfg.mitigation.neutralize != NeutralizeMode::off) {
    report.counts["after_neutralize"] = count_pass(passes.after);
    ClusterAggregation after = aggregate_clusters(tasks, passes.after, ctx);
    for (const auto& name : cfg.effective_metric_names()) {
      report.matrices.push_back(
          make_entry(cfg, "after_neutralize", after.matrices.at(name), true));
    }
  }
  return report;
}

EvaluationReport run(const std::vector<TaskInstance>& tasks, const config::RunConfig& cfg,
                     backend::Backend& llm) {
  return cfg.with_ground_truth() ? run_with_ground_truth(tasks, cfg, llm)
                                 : run_without_ground_truth(tasks, cfg, llm);
}

}  // namespace audit::pipeline
