#include "audit/config.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "audit/errors.hpp"
#include "audit/metrics.hpp"
#include "audit/util.hpp"

namespace audit::config {

using nlohmann::json;

NeutralizeMode neutralize_mode_from_name(const std::string& name) {
  if (name == "off") return NeutralizeMode::off;
  if (name == "mask_only") return NeutralizeMode::mask_only;
  if (name == "llm_only") return NeutralizeMode::llm_only;
  if (name == "mask_then_llm") return NeutralizeMode::mask_then_llm;
  throw ValidationError("unknown neutralize mode: " + name +
                        " (expected off|mask_only|llm_only|mask_then_llm)");
}

std::string neutralize_mode_name(NeutralizeMode m) {
  switch (m) {
    case NeutralizeMode::off: return "off";
    case NeutralizeMode::mask_only: return "mask_only";
    case NeutralizeMode::llm_only: return "llm_only";
    case NeutralizeMode::mask_then_llm: return "mask_then_llm";
  }
  return "?";
}

const std::vector<std::string>& default_refusal_patterns() {
  static const std::vector<std::string> patterns = {
      "i cannot",    "i can't",      "i can not", "i won't",     "i will not",
      "i'm sorry",   "i am sorry",   "sorry,",    "i'm unable",  "i am unable",
      "as an ai",    "i refuse",     "i must decline",
  };
  return patterns;
}

namespace {

void check_known_keys(const json& obj, const std::string& where,
                      const std::set<std::string>& known) {
  for (const auto& [key, value] : obj.items()) {
    if (!known.count(key)) {
      throw ValidationError("unknown config key: " + (where.empty() ? key : where + "." + key));
    }
  }
}

double parse_log_base(const json& v, const std::string& where) {
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "e" || s == "nats") return 2.718281828459045235;
    if (s == "2" || s == "bits") return 2.0;
    throw ValidationError(where + ": log_base string must be 'e' or '2', got '" + s + "'");
  }
  if (v.is_number()) return v.get<double>();
  throw ValidationError(where + ": log_base must be a number or 'e'/'2'");
}

template <typename T>
T get_as(const json& obj, const std::string& key, const std::string& where, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + "." + key + ": " + e.what());
  }
}

}  // namespace

std::vector<std::string> RunConfig::effective_metric_names() const {
  if (metrics.names) return *metrics.names;
  if (with_ground_truth()) return {"sym_kl", "tv"};
  return {"jsd", "kl"};
}

std::vector<std::string> RunConfig::effective_refusal_patterns() const {
  return refusal_patterns.empty() ? default_refusal_patterns() : refusal_patterns;
}

void RunConfig::validate() const {
  if (mode != "with_gt" && mode != "without_gt") {
    throw ValidationError("mode must be 'with_gt' or 'without_gt', got '" + mode + "'");
  }
  if (corpus.format != "jsonl" && corpus.format != "csv") {
    throw ValidationError("corpus.format must be 'jsonl' or 'csv'");
  }
  if (subgroups.size() < 2) throw ValidationError("need at least 2 subgroups");
  std::set<std::string> ids;
  for (const auto& g : subgroups) {
    if (g.group_id.empty()) throw ValidationError("subgroup with empty group_id");
    if (!ids.insert(g.group_id).second) {
      throw ValidationError("duplicate subgroup id: " + g.group_id);
    }
    if (util::trim(g.persona_phrase).empty()) {
      throw ValidationError("subgroup '" + g.group_id + "' has an empty persona_phrase");
    }
  }
  backend.validate();
  if (generation.m < 1) throw ValidationError("generation.m must be >= 1");
  if (generation.n_gen < 1) throw ValidationError("generation.n_gen must be >= 1");
  if (generation.max_tokens < 1) throw ValidationError("generation.max_tokens must be >= 1");
  if (!(metrics.log_base > 1.0)) throw ValidationError("metrics.log_base must be > 1");
  if (metrics.alpha < 0.0) throw ValidationError("metrics.alpha must be >= 0");
  if (metrics.estimator != "variant_marginal" && metrics.estimator != "conditional") {
    throw ValidationError("metrics.estimator must be 'variant_marginal' or 'conditional'");
  }
  if (metrics.estimator == "conditional" && generation.n_gen < 2) {
    throw ValidationError("conditional sensitivity estimator needs generation.n_gen >= 2");
  }
  for (const auto& name : effective_metric_names()) {
    audit::metrics::metric_from_name(name);  // throws on unknown names
  }
  if (clustering.k < 1) throw ValidationError("clustering.k must be >= 1");
  if (clustering.n_init < 1) throw ValidationError("clustering.n_init must be >= 1");
  if (clustering.seeds.empty()) throw ValidationError("clustering.seeds must be non-empty");
  if (with_ground_truth() && label_alphabet.empty()) {
    throw ValidationError("with_gt mode needs a non-empty label alphabet");
  }
  if (mitigation.majority_vote && !with_ground_truth()) {
    throw ValidationError("majority voting aggregates labels and needs mode 'with_gt'");
  }
  std::set<std::string> labels;
  for (const auto& l : label_alphabet) {
    if (!labels.insert(util::uppercase(l)).second) {
      throw ValidationError("label alphabet entries collide case-insensitively: " + l);
    }
  }
  if (report.heatmap_precision < 0 || report.heatmap_precision > 17) {
    throw ValidationError("report.heatmap_precision must be in [0, 17]");
  }
}

std::string RunConfig::canonical_json() const {
  json j;
  j["mode"] = mode;
  j["corpus"] = {{"path", corpus.path},
                 {"format", corpus.format},
                 {"label_column", corpus.label_column},
                 {"id_column", corpus.id_column}};
  json groups = json::array();
  for (const auto& g : subgroups) {
    groups.push_back({{"group_id", g.group_id},
                      {"persona_phrase", g.persona_phrase},
                      {"lexicon", g.lexicon}});
  }
  j["subgroups"] = groups;
  j["global_lexicon"] = global_lexicon;
  j["lexicon_path"] = lexicon_path;
  j["backend"] = {{"base_url", backend.base_url},
                  {"api_key_env", backend.api_key_env_var_name},
                  {"max_parallel_requests", backend.max_parallel_requests},
                  {"retry",
                   {{"max_attempts", backend.retry.max_attempts},
                    {"backoff_base_ms", backend.retry.backoff_base_ms}}},
                  {"timeout_ms", backend.timeout_ms}};
  j["models"] = {{"paraphrase", models.paraphrase},
                 {"neutralize", models.neutralize},
                 {"infer", models.infer},
                 {"embed", models.embed}};
  j["generation"] = {{"m", generation.m},
                     {"n_gen", generation.n_gen},
                     {"temperature_paraphrase", generation.temperature_paraphrase},
                     {"temperature_neutralize", generation.temperature_neutralize},
                     {"temperature_infer", generation.effective_temperature_infer()},
                     {"max_tokens", generation.max_tokens},
                     {"seed", generation.seed}};
  j["mitigation"] = {{"majority_vote", mitigation.majority_vote},
                     {"neutralize", neutralize_mode_name(mitigation.neutralize)}};
  j["metrics"] = {{"names", effective_metric_names()},
                  {"log_base", metrics.log_base},
                  {"alpha", metrics.alpha},
                  {"estimator", metrics.estimator}};
  j["clustering"] = {{"k", clustering.k},
                     {"n_init", clustering.n_init},
                     {"seeds", clustering.seeds}};
  j["label_alphabet"] = label_alphabet;
  // out_dir and cache_path are IO locations, not experiment parameters; two
  // runs of the same experiment into different directories share a hash.
  j["report"] = {{"per_task_breakdown", report.per_task_breakdown},
                 {"heatmap_precision", report.heatmap_precision}};
  j["templates"] = {{"tabular_path", templates.tabular_path},
                    {"paraphrase_path", templates.paraphrase_path},
                    {"neutralize_path", templates.neutralize_path}};
  j["refusal_patterns"] = effective_refusal_patterns();
  return j.dump();
}

std::string RunConfig::config_hash() const { return util::fnv1a64_hex(canonical_json()); }

RunConfig RunConfig::from_json_text(const std::string& text, const std::string& source_name) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(source_name + ": config is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ValidationError(source_name + ": config root must be an object");

  check_known_keys(j, "",
                   {"mode", "corpus", "subgroups", "global_lexicon", "lexicon_path", "backend",
                    "models", "generation", "mitigation", "metrics", "clustering",
                    "label_alphabet", "report", "templates", "cache_path", "refusal_patterns"});

  RunConfig cfg;
  cfg.mode = get_as<std::string>(j, "mode", "config", cfg.mode);

  if (j.contains("corpus")) {
    const auto& c = j["corpus"];
    check_known_keys(c, "corpus", {"path", "format", "label_column", "id_column"});
    cfg.corpus.path = get_as<std::string>(c, "path", "corpus", "");
    cfg.corpus.format = get_as<std::string>(c, "format", "corpus", cfg.corpus.format);
    cfg.corpus.label_column = get_as<std::string>(c, "label_column", "corpus", "");
    cfg.corpus.id_column = get_as<std::string>(c, "id_column", "corpus", "");
  }

  if (j.contains("subgroups")) {
    if (!j["subgroups"].is_array()) throw ValidationError("subgroups must be an array");
    for (const auto& g : j["subgroups"]) {
      check_known_keys(g, "subgroups[]", {"group_id", "persona_phrase", "lexicon"});
      corpus::SubgroupSpec spec;
      spec.group_id = get_as<std::string>(g, "group_id", "subgroups[]", "");
      spec.persona_phrase = get_as<std::string>(g, "persona_phrase", "subgroups[]", "");
      spec.lexicon = get_as<std::vector<std::string>>(g, "lexicon", "subgroups[]", {});
      cfg.subgroups.push_back(std::move(spec));
    }
  }

  cfg.global_lexicon =
      get_as<std::vector<std::string>>(j, "global_lexicon", "config", {});
  cfg.lexicon_path = get_as<std::string>(j, "lexicon_path", "config", "");

  if (j.contains("backend")) {
    const auto& b = j["backend"];
    check_known_keys(b, "backend",
                     {"base_url", "api_key_env", "max_parallel_requests", "retry", "timeout_ms"});
    cfg.backend.base_url = get_as<std::string>(b, "base_url", "backend", cfg.backend.base_url);
    cfg.backend.api_key_env_var_name =
        get_as<std::string>(b, "api_key_env", "backend", cfg.backend.api_key_env_var_name);
    cfg.backend.max_parallel_requests = get_as<int>(b, "max_parallel_requests", "backend",
                                                    cfg.backend.max_parallel_requests);
    if (b.contains("retry")) {
      const auto& r = b["retry"];
      check_known_keys(r, "backend.retry", {"max_attempts", "backoff_base_ms"});
      cfg.backend.retry.max_attempts =
          get_as<int>(r, "max_attempts", "backend.retry", cfg.backend.retry.max_attempts);
      cfg.backend.retry.backoff_base_ms =
          get_as<int>(r, "backoff_base_ms", "backend.retry", cfg.backend.retry.backoff_base_ms);
    }
    cfg.backend.timeout_ms = get_as<int>(b, "timeout_ms", "backend", cfg.backend.timeout_ms);
  }

  if (j.contains("models")) {
    const auto& m = j["models"];
    check_known_keys(m, "models", {"paraphrase", "neutralize", "infer", "embed"});
    cfg.models.paraphrase = get_as<std::string>(m, "paraphrase", "models", cfg.models.paraphrase);
    cfg.models.neutralize = get_as<std::string>(m, "neutralize", "models", cfg.models.neutralize);
    cfg.models.infer = get_as<std::string>(m, "infer", "models", cfg.models.infer);
    cfg.models.embed = get_as<std::string>(m, "embed", "models", cfg.models.embed);
  }

  if (j.contains("generation")) {
    const auto& g = j["generation"];
    check_known_keys(g, "generation",
                     {"m", "n_gen", "temperature_paraphrase", "temperature_neutralize",
                      "temperature_infer", "max_tokens", "seed"});
    cfg.generation.m = get_as<int>(g, "m", "generation", cfg.generation.m);
    cfg.generation.n_gen = get_as<int>(g, "n_gen", "generation", cfg.generation.n_gen);
    cfg.generation.temperature_paraphrase = get_as<double>(
        g, "temperature_paraphrase", "generation", cfg.generation.temperature_paraphrase);
    cfg.generation.temperature_neutralize = get_as<double>(
        g, "temperature_neutralize", "generation", cfg.generation.temperature_neutralize);
    if (g.contains("temperature_infer")) {
      cfg.generation.temperature_infer = get_as<double>(g, "temperature_infer", "generation", 0.0);
    }
    cfg.generation.max_tokens =
        get_as<int>(g, "max_tokens", "generation", cfg.generation.max_tokens);
    cfg.generation.seed = get_as<uint64_t>(g, "seed", "generation", cfg.generation.seed);
  }

  if (j.contains("mitigation")) {
    const auto& m = j["mitigation"];
    check_known_keys(m, "mitigation", {"majority_vote", "neutralize"});
    cfg.mitigation.majority_vote =
        get_as<bool>(m, "majority_vote", "mitigation", cfg.mitigation.majority_vote);
    cfg.mitigation.neutralize = neutralize_mode_from_name(
        get_as<std::string>(m, "neutralize", "mitigation", "off"));
  }

  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    check_known_keys(m, "metrics", {"names", "log_base", "alpha", "estimator"});
    if (m.contains("names")) {
      cfg.metrics.names = get_as<std::vector<std::string>>(m, "names", "metrics", {});
    }
    if (m.contains("log_base")) cfg.metrics.log_base = parse_log_base(m["log_base"], "metrics");
    cfg.metrics.alpha = get_as<double>(m, "alpha", "metrics", cfg.metrics.alpha);
    cfg.metrics.estimator =
        get_as<std::string>(m, "estimator", "metrics", cfg.metrics.estimator);
  }

  if (j.contains("clustering")) {
    const auto& c = j["clustering"];
    check_known_keys(c, "clustering", {"k", "n_init", "seeds"});
    cfg.clustering.k = get_as<int>(c, "k", "clustering", cfg.clustering.k);
    cfg.clustering.n_init = get_as<int>(c, "n_init", "clustering", cfg.clustering.n_init);
    cfg.clustering.seeds =
        get_as<std::vector<uint64_t>>(c, "seeds", "clustering", cfg.clustering.seeds);
  }

  cfg.label_alphabet =
      get_as<std::vector<std::string>>(j, "label_alphabet", "config", cfg.label_alphabet);

  if (j.contains("report")) {
    const auto& r = j["report"];
    check_known_keys(r, "report",
                     {"out_dir", "per_task_breakdown", "heatmap_precision", "emit_timestamp"});
    cfg.report.out_dir = get_as<std::string>(r, "out_dir", "report", cfg.report.out_dir);
    cfg.report.per_task_breakdown =
        get_as<bool>(r, "per_task_breakdown", "report", cfg.report.per_task_breakdown);
    cfg.report.heatmap_precision =
        get_as<int>(r, "heatmap_precision", "report", cfg.report.heatmap_precision);
    if (r.contains("emit_timestamp")) {
      cfg.report.emit_timestamp = get_as<bool>(r, "emit_timestamp", "report", true);
    }
  }

  if (j.contains("templates")) {
    const auto& t = j["templates"];
    check_known_keys(t, "templates", {"tabular_path", "paraphrase_path", "neutralize_path"});
    cfg.templates.tabular_path = get_as<std::string>(t, "tabular_path", "templates", "");
    cfg.templates.paraphrase_path = get_as<std::string>(t, "paraphrase_path", "templates", "");
    cfg.templates.neutralize_path = get_as<std::string>(t, "neutralize_path", "templates", "");
  }

  cfg.cache_path = get_as<std::string>(j, "cache_path", "config", "");
  cfg.refusal_patterns =
      get_as<std::vector<std::string>>(j, "refusal_patterns", "config", {});

  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  return from_json_text(util::read_file(path), path);
}

}  // namespace audit::config
