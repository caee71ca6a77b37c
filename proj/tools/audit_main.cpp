#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "audit/backend.hpp"
#include "audit/config.hpp"
#include "audit/corpus.hpp"
#include "audit/errors.hpp"
#include "audit/metrics.hpp"
#include "audit/pipeline.hpp"
#include "audit/reporting.hpp"
#include "audit/util.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitBackend = 3;
constexpr int kExitIo = 4;

std::unique_ptr<audit::backend::Backend> make_backend(const audit::config::RunConfig& cfg,
                                                      bool mock) {
  if (mock) {
    return std::make_unique<audit::backend::MockBackend>(
        std::map<std::string, std::string>{}, cfg.generation.seed, cfg.label_alphabet);
  }
  return std::make_unique<audit::backend::HttpBackend>(cfg.backend);
}

std::vector<audit::corpus::TaskInstance> load_tasks(const audit::config::RunConfig& cfg) {
  if (cfg.corpus.path.empty()) {
    throw audit::ValidationError("config corpus.path is required for this command");
  }
  if (cfg.corpus.format == "csv") {
    return audit::corpus::load_tabular_corpus(cfg.corpus.path, cfg.corpus.label_column,
                                              cfg.corpus.id_column);
  }
  return audit::corpus::load_prompt_corpus(cfg.corpus.path);
}

double parse_log_base_arg(const std::string& s) {
  if (s == "e" || s == "nats") return 2.718281828459045235;
  if (s == "2" || s == "bits") return 2.0;
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw audit::ValidationError("bad --log-base value: " + s);
  }
}

void print_matrix(const audit::metrics::DivergenceMatrix& m) {
  std::printf("%-12s", "");
  for (const auto& g : m.group_ids) std::printf(" %10s", g.c_str());
  std::printf("\n");
  for (size_t i = 0; i < m.group_ids.size(); ++i) {
    std::printf("%-12s", m.group_ids[i].c_str());
    for (size_t j = 0; j < m.group_ids.size(); ++j) std::printf(" %10.5f", m.values[i][j]);
    std::printf("\n");
  }
}

void print_report_summary(const audit::pipeline::EvaluationReport& report) {
  std::printf("mode: %s   config: %s   backend: %s\n", report.mode.c_str(),
              report.config_hash.c_str(), report.backend_name.c_str());
  std::printf("sensitivity (estimator=%s, outcome_space=%s, log_base=%.6g):\n",
              report.sensitivity_estimator.c_str(), report.sensitivity_outcome_space.c_str(),
              report.log_base);
  const bool with_acc = !report.accuracy_per_variant.empty();
  if (with_acc) {
    std::printf("  %-14s %12s %12s %12s\n", "group", "sensitivity", "accuracy",
                report.accuracy_voted.empty() ? "" : "voted");
  } else {
    std::printf("  %-14s %12s\n", "group", "sensitivity");
  }
  for (const auto& [group, sens] : report.sensitivity) {
    std::printf("  %-14s %12.5f", group.c_str(), sens);
    if (with_acc) {
      std::printf(" %12.5f", report.accuracy_per_variant.at(group));
      auto voted = report.accuracy_voted.find(group);
      if (voted != report.accuracy_voted.end()) std::printf(" %12.5f", voted->second);
    }
    std::printf("\n");
  }
  for (const auto& entry : report.matrices) {
    std::printf("\n%s divergence, phase=%s (alpha=%g):\n",
                audit::metrics::metric_name(entry.matrix.metric).c_str(), entry.phase.c_str(),
                entry.alpha);
    print_matrix(entry.matrix);
  }
  for (const auto& [phase, counts] : report.counts) {
    std::printf("\nresponses[%s]: generated=%zu used=%zu", phase.c_str(), counts.generated,
                counts.used);
    for (const auto& [reason, n] : counts.filtered) {
      std::printf(" filtered_%s=%zu", reason.c_str(), n);
    }
    std::printf("\n");
  }
}

int cmd_run(const std::string& config_path, bool mock, const std::string& out_override) {
  auto cfg = audit::config::RunConfig::from_file(config_path);
  if (!out_override.empty()) cfg.report.out_dir = out_override;
  if (!cfg.report.emit_timestamp) cfg.report.emit_timestamp = !mock;

  auto backend = make_backend(cfg, mock);
  auto tasks = load_tasks(cfg);
  auto report = audit::pipeline::run(tasks, cfg, *backend);
  auto manifest =
      audit::reporting::emit_report(report, cfg.report.out_dir, cfg.report.heatmap_precision);

  print_report_summary(report);
  std::printf("\n");
  for (const auto& entry : manifest) {
    std::printf("wrote %s (fnv64 %s)\n", entry.path.c_str(), entry.content_hash.c_str());
  }
  return kExitOk;
}

int cmd_metrics(const std::string& dists_path, const std::string& metric_name,
                const std::string& log_base_arg, double alpha, const std::string& out_path,
                const std::string& svg_path) {
  const json root = [&] {
    try {
      return json::parse(audit::util::read_file(dists_path));
    } catch (const json::parse_error& e) {
      throw audit::ValidationError(dists_path + ": not valid JSON: " + e.what());
    }
  }();
  if (!root.is_object() || root.empty()) {
    throw audit::ValidationError(dists_path +
                                 ": expected an object mapping group ids to distributions");
  }

  // Either {"group": [p0, p1, ...]} with implicit outcomes, or
  // {"group": {"outcomes": [...], "probs": [...]}}.
  std::vector<std::pair<std::string, audit::metrics::CategoricalDistribution>> groups;
  for (const auto& [group_id, value] : root.items()) {
    audit::metrics::CategoricalDistribution d;
    if (value.is_array()) {
      d.probs = value.get<std::vector<double>>();
      for (size_t i = 0; i < d.probs.size(); ++i) d.outcomes.push_back(std::to_string(i));
    } else if (value.is_object()) {
      d.outcomes = value.at("outcomes").get<std::vector<std::string>>();
      d.probs = value.at("probs").get<std::vector<double>>();
    } else {
      throw audit::ValidationError("group '" + group_id + "': expected array or object");
    }
    d.validate();
    groups.emplace_back(group_id, std::move(d));
  }

  const double log_base = parse_log_base_arg(log_base_arg);
  const auto metric = audit::metrics::metric_from_name(metric_name);
  const auto matrix = audit::metrics::divergence_matrix(groups, metric, log_base, alpha);

  std::printf("%s divergence (log_base=%.6g, alpha=%g):\n", metric_name.c_str(), log_base, alpha);
  print_matrix(matrix);

  if (!out_path.empty()) {
    json out;
    out["group_ids"] = matrix.group_ids;
    out["metric"] = metric_name;
    out["log_base"] = matrix.log_base;
    out["alpha"] = alpha;
    out["values"] = matrix.values;
    audit::util::write_file(out_path, out.dump(2) + "\n");
    std::printf("wrote %s\n", out_path.c_str());
  }
  if (!svg_path.empty()) {
    const auto spec = audit::reporting::HeatmapSpec::for_matrix(
        matrix, metric_name + " divergence");
    audit::util::write_file(svg_path, audit::reporting::render_heatmap(spec));
    std::printf("wrote %s\n", svg_path.c_str());
  }
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, std::vector<int> k_values, bool mock,
               const std::string& out_override) {
  auto cfg = audit::config::RunConfig::from_file(config_path);
  if (!out_override.empty()) cfg.report.out_dir = out_override;
  auto backend = make_backend(cfg, mock);
  auto tasks = load_tasks(cfg);
  auto rows = audit::reporting::ablation_clusters(tasks, cfg, k_values, *backend);

  std::printf("%4s %20s %20s %10s %8s\n", "k", "consistency_before", "consistency_after",
              "evaluated", "skipped");
  for (const auto& row : rows) {
    std::printf("%4d %20.4f %20.4f %10zu %8zu\n", row.k, row.consistency_before,
                row.consistency_after, row.evaluated, row.skipped);
  }

  std::error_code ec;
  std::filesystem::create_directories(cfg.report.out_dir, ec);
  if (ec) {
    throw audit::IoError("cannot create output directory " + cfg.report.out_dir + ": " +
                         ec.message());
  }
  audit::util::write_file(cfg.report.out_dir + "/ablation.csv",
                          audit::reporting::ablation_to_csv(rows));
  audit::util::write_file(cfg.report.out_dir + "/ablation.json",
                          audit::reporting::ablation_to_json(rows).dump(2) + "\n");
  std::printf("wrote %s/ablation.csv and %s/ablation.json\n", cfg.report.out_dir.c_str(),
              cfg.report.out_dir.c_str());
  return kExitOk;
}

int cmd_render(const std::string& report_dir, int precision) {
  const std::string report_path = report_dir + "/report.json";
  json j;
  try {
    j = json::parse(audit::util::read_file(report_path));
  } catch (const json::parse_error& e) {
    throw audit::ValidationError(report_path + ": not valid JSON: " + e.what());
  }
  const auto report = audit::reporting::report_from_json(j);
  const auto manifest = audit::reporting::emit_svgs(report, report_dir, precision);
  for (const auto& entry : manifest) {
    std::printf("wrote %s (fnv64 %s)\n", entry.path.c_str(), entry.content_hash.c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-fairness audit toolkit: subgroup sensitivity, cross-group divergence "
               "matrices, and mitigation runs over OpenAI-compatible backends"};
  app.require_subcommand(1);
  app.fallthrough();  // lets --mock appear after the subcommand name too

  bool mock = false;
  app.add_flag("--mock", mock, "Use the deterministic network-free mock backend");

  auto* run = app.add_subcommand("run", "Run the full audit pipeline from a config file");
  std::string run_config;
  std::string run_out;
  run->add_option("--config", run_config, "Path to run config JSON")->required();
  run->add_option("--out", run_out, "Override report.out_dir");

  auto* metrics_cmd =
      app.add_subcommand("metrics", "Compute a divergence matrix from group distributions");
  std::string dists_path;
  std::string metric_name = "sym_kl";
  std::string log_base_arg = "e";
  double alpha = 1e-6;
  std::string metrics_out;
  std::string metrics_svg;
  metrics_cmd->add_option("--group-dists", dists_path,
                          "JSON file: {group: [probs]} or {group: {outcomes, probs}}")
      ->required();
  metrics_cmd->add_option("--metric", metric_name, "kl|sym_kl|tv|jsd (default sym_kl)");
  metrics_cmd->add_option("--log-base", log_base_arg, "'e', '2', or a number (default e)");
  metrics_cmd->add_option("--alpha", alpha, "Additive smoothing for KL-family (default 1e-6)");
  metrics_cmd->add_option("--out", metrics_out, "Write the matrix as JSON to this path");
  metrics_cmd->add_option("--svg", metrics_svg, "Write a heatmap SVG to this path");

  auto* ablate = app.add_subcommand("ablate-k", "Cluster-count ablation over paraphrase pools");
  std::string ablate_config;
  std::string ablate_out;
  std::vector<int> k_values;
  ablate->add_option("--config", ablate_config, "Path to run config JSON")->required();
  ablate->add_option("--k", k_values, "Cluster counts, e.g. --k 2,3,4")
      ->required()
      ->delimiter(',');
  ablate->add_option("--out", ablate_out, "Override report.out_dir");

  auto* render = app.add_subcommand("render", "Re-render heatmap SVGs from a report directory");
  std::string report_dir;
  int precision = 2;
  render->add_option("--report", report_dir, "Directory containing report.json")->required();
  render->add_option("--precision", precision, "Cell label decimals (default 2)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (run->parsed()) return cmd_run(run_config, mock, run_out);
    if (metrics_cmd->parsed()) {
      return cmd_metrics(dists_path, metric_name, log_base_arg, alpha, metrics_out, metrics_svg);
    }
    if (ablate->parsed()) return cmd_ablate(ablate_config, k_values, mock, ablate_out);
    if (render->parsed()) return cmd_render(report_dir, precision);
    std::cerr << "no subcommand selected\n";
    return kExitValidation;
  } catch (const audit::TransportError& e) {
    std::cerr << "transport error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const audit::BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const audit::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const audit::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
