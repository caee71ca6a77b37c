#include "audit/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>

#include "audit/errors.hpp"
#include "audit/util.hpp"

namespace audit::reporting {

using nlohmann::json;

namespace {

std::string fixed(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return std::string(buf);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

HeatmapSpec HeatmapSpec::for_matrix(const metrics::DivergenceMatrix& m, std::string title,
                                    int precision) {
  HeatmapSpec spec;
  spec.matrix = m;
  spec.scale_min = 0.0;
  spec.scale_max = m.max_value() > 0.0 ? m.max_value() : 1.0;
  spec.precision = precision;
  spec.title = std::move(title);
  return spec;
}

void HeatmapSpec::validate() const {
  matrix.validate();
  if (!(scale_min < scale_max)) {
    throw ValidationError("degenerate heatmap color scale: min must be < max");
  }
  if (precision < 0 || precision > 17) throw ValidationError("heatmap precision out of range");
}

std::string heatmap_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  // White (247,251,255) to dark blue (8,48,107); linear in each channel.
  const int r = static_cast<int>(std::lround(247.0 + t * (8.0 - 247.0)));
  const int g = static_cast<int>(std::lround(251.0 + t * (48.0 - 251.0)));
  const int b = static_cast<int>(std::lround(255.0 + t * (107.0 - 255.0)));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return std::string(buf);
}

std::string render_heatmap(const HeatmapSpec& spec) {
  spec.validate();
  const size_t k = spec.matrix.group_ids.size();
  const int cell = 64;
  const int margin_left = 110;
  const int margin_top = 72;
  const int margin_right = 24;
  const int margin_bottom = 40;
  const int width = margin_left + static_cast<int>(k) * cell + margin_right;
  const int height = margin_top + static_cast<int>(k) * cell + margin_bottom;

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) +
         " " + std::to_string(height) + "\">\n";
  svg += "<style>text{font-family:monospace;}.title{font-size:15px;}"
         ".axis{font-size:12px;}.cell-value{font-size:12px;}.note{font-size:10px;fill:#555555;}"
         "</style>\n";
  svg += "<rect width=\"" + std::to_string(width) + "\" height=\"" + std::to_string(height) +
         "\" fill=\"#ffffff\"/>\n";
  svg += "<text class=\"title\" x=\"" + std::to_string(width / 2) +
         "\" y=\"24\" text-anchor=\"middle\">" + xml_escape(spec.title) + "</text>\n";

  for (size_t j = 0; j < k; ++j) {
    const int x = margin_left + static_cast<int>(j) * cell + cell / 2;
    svg += "<text class=\"axis\" x=\"" + std::to_string(x) + "\" y=\"" +
           std::to_string(margin_top - 10) + "\" text-anchor=\"middle\">" +
           xml_escape(spec.matrix.group_ids[j]) + "</text>\n";
  }
  for (size_t i = 0; i < k; ++i) {
    const int y = margin_top + static_cast<int>(i) * cell + cell / 2 + 4;
    svg += "<text class=\"axis\" x=\"" + std::to_string(margin_left - 8) + "\" y=\"" +
           std::to_string(y) + "\" text-anchor=\"end\">" + xml_escape(spec.matrix.group_ids[i]) +
           "</text>\n";
  }

  for (size_t i = 0; i < k; ++i) {
    for (size_t j = 0; j < k; ++j) {
      const double v = spec.matrix.at(i, j);
      const double t = (v - spec.scale_min) / (spec.scale_max - spec.scale_min);
      const int x = margin_left + static_cast<int>(j) * cell;
      const int y = margin_top + static_cast<int>(i) * cell;
      svg += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
             std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" +
             heatmap_color(t) + "\" stroke=\"#ffffff\"/>\n";
      const char* text_color = t > 0.55 ? "#ffffff" : "#000000";
      svg += "<text class=\"cell-value\" x=\"" + std::to_string(x + cell / 2) + "\" y=\"" +
             std::to_string(y + cell / 2 + 4) + "\" text-anchor=\"middle\" fill=\"" + text_color +
             "\">" + fixed(v, spec.precision) + "</text>\n";
    }
  }

  svg += "<text class=\"note\" x=\"" + std::to_string(margin_left) + "\" y=\"" +
         std::to_string(height - 14) + "\">metric=" + metrics::metric_name(spec.matrix.metric) +
         " scale=[" + fixed(spec.scale_min, spec.precision) + ", " +
         fixed(spec.scale_max, spec.precision) + "]</text>\n";
  svg += "</svg>\n";
  return svg;
}

// ---------------------------------------------------------------------------
// Report serialization

namespace {

json matrix_entry_to_json(const pipeline::MatrixEntry& entry) {
  json j;
  j["phase"] = entry.phase;
  j["metric"] = metrics::metric_name(entry.matrix.metric);
  j["log_base"] = entry.matrix.log_base;
  j["alpha"] = entry.alpha;
  j["estimator"] = entry.estimator;
  j["seeds"] = entry.seeds;
  j["group_ids"] = entry.matrix.group_ids;
  j["values"] = entry.matrix.values;
  return j;
}

pipeline::MatrixEntry matrix_entry_from_json(const json& j) {
  pipeline::MatrixEntry entry;
  entry.phase = j.at("phase").get<std::string>();
  entry.matrix.metric = metrics::metric_from_name(j.at("metric").get<std::string>());
  entry.matrix.log_base = j.at("log_base").get<double>();
  entry.alpha = j.at("alpha").get<double>();
  entry.estimator = j.at("estimator").get<std::string>();
  entry.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  entry.matrix.group_ids = j.at("group_ids").get<std::vector<std::string>>();
  entry.matrix.values = j.at("values").get<std::vector<std::vector<double>>>();
  entry.matrix.validate();
  return entry;
}

json counts_to_json(const pipeline::PassCounts& counts) {
  json j;
  j["generated"] = counts.generated;
  j["used"] = counts.used;
  j["filtered"] = counts.filtered;
  return j;
}

pipeline::PassCounts counts_from_json(const json& j) {
  pipeline::PassCounts counts;
  counts.generated = j.at("generated").get<size_t>();
  counts.used = j.at("used").get<size_t>();
  counts.filtered = j.at("filtered").get<std::map<std::string, size_t>>();
  return counts;
}

}  // namespace

json report_to_json(const pipeline::EvaluationReport& report) {
  json j;
  j["mode"] = report.mode;

  if (report.mode == "with_gt") {
    json acc;
    acc["per_variant"] = report.accuracy_per_variant;
    if (report.majority_vote) acc["voted"] = report.accuracy_voted;
    j["accuracy"] = acc;
  }

  json sens;
  sens["per_group"] = report.sensitivity;
  sens["estimator"] = report.sensitivity_estimator;
  sens["outcome_space"] = report.sensitivity_outcome_space;
  sens["log_base"] = report.log_base;
  j["sensitivity"] = sens;

  json matrices = json::array();
  for (const auto& entry : report.matrices) matrices.push_back(matrix_entry_to_json(entry));
  j["matrices"] = matrices;

  if (!report.per_task_matrices.empty()) {
    json per_task = json::array();
    for (const auto& [task_id, entry] : report.per_task_matrices) {
      json e = matrix_entry_to_json(entry);
      e["task_id"] = task_id;
      per_task.push_back(e);
    }
    j["per_task_matrices"] = per_task;
  }

  json meta;
  meta["backend"] = report.backend_name;
  meta["config_hash"] = report.config_hash;
  meta["models"] = {{"paraphrase", report.models.paraphrase},
                    {"neutralize", report.models.neutralize},
                    {"infer", report.models.infer},
                    {"embed", report.models.embed}};
  meta["seed"] = report.seed;
  meta["kmeans_seeds"] = report.kmeans_seeds;
  meta["k"] = report.k;
  meta["n_init"] = report.n_init;
  meta["m"] = report.m;
  meta["n_gen"] = report.n_gen;
  meta["mitigation"] = {{"majority_vote", report.majority_vote},
                        {"neutralize", report.neutralize_mode}};
  json counts;
  for (const auto& [phase, c] : report.counts) counts[phase] = counts_to_json(c);
  meta["counts"] = counts;
  if (report.timestamp) meta["timestamp"] = *report.timestamp;
  j["metadata"] = meta;
  return j;
}

pipeline::EvaluationReport report_from_json(const json& j) {
  pipeline::EvaluationReport report;
  try {
    report.mode = j.at("mode").get<std::string>();
    if (j.contains("accuracy")) {
      const auto& acc = j.at("accuracy");
      report.accuracy_per_variant =
          acc.at("per_variant").get<std::map<std::string, double>>();
      if (acc.contains("voted")) {
        report.accuracy_voted = acc.at("voted").get<std::map<std::string, double>>();
      }
    }
    const auto& sens = j.at("sensitivity");
    report.sensitivity = sens.at("per_group").get<std::map<std::string, double>>();
    report.sensitivity_estimator = sens.at("estimator").get<std::string>();
    report.sensitivity_outcome_space = sens.at("outcome_space").get<std::string>();
    report.log_base = sens.at("log_base").get<double>();

    for (const auto& entry : j.at("matrices")) {
      report.matrices.push_back(matrix_entry_from_json(entry));
    }
    if (j.contains("per_task_matrices")) {
      for (const auto& entry : j.at("per_task_matrices")) {
        report.per_task_matrices.push_back(
            {entry.at("task_id").get<std::string>(), matrix_entry_from_json(entry)});
      }
    }

    const auto& meta = j.at("metadata");
    report.backend_name = meta.at("backend").get<std::string>();
    report.config_hash = meta.at("config_hash").get<std::string>();
    report.models.paraphrase = meta.at("models").at("paraphrase").get<std::string>();
    report.models.neutralize = meta.at("models").at("neutralize").get<std::string>();
    report.models.infer = meta.at("models").at("infer").get<std::string>();
    report.models.embed = meta.at("models").at("embed").get<std::string>();
    report.seed = meta.at("seed").get<uint64_t>();
    report.kmeans_seeds = meta.at("kmeans_seeds").get<std::vector<uint64_t>>();
    report.k = meta.at("k").get<int>();
    report.n_init = meta.at("n_init").get<int>();
    report.m = meta.at("m").get<int>();
    report.n_gen = meta.at("n_gen").get<int>();
    report.majority_vote = meta.at("mitigation").at("majority_vote").get<bool>();
    report.neutralize_mode = meta.at("mitigation").at("neutralize").get<std::string>();
    for (const auto& [phase, c] : meta.at("counts").items()) {
      report.counts[phase] = counts_from_json(c);
    }
    if (meta.contains("timestamp")) report.timestamp = meta.at("timestamp").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report JSON malformed: ") + e.what());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Emission

std::vector<ManifestEntry> emit_svgs(const pipeline::EvaluationReport& report,
                                     const std::string& out_dir, int precision) {
  std::vector<ManifestEntry> manifest;
  for (const auto& entry : report.matrices) {
    const std::string name =
        "matrix_" + entry.phase + "_" + metrics::metric_name(entry.matrix.metric) + ".svg";
    const std::string title =
        metrics::metric_name(entry.matrix.metric) + " divergence (" + entry.phase + ")";
    const std::string svg =
        render_heatmap(HeatmapSpec::for_matrix(entry.matrix, title, precision));
    const std::string path = out_dir + "/" + name;
    util::write_file(path, svg);
    manifest.push_back({path, util::fnv1a64_hex(svg)});
  }
  return manifest;
}

std::vector<ManifestEntry> emit_report(const pipeline::EvaluationReport& report,
                                       const std::string& out_dir, int precision) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

  std::vector<ManifestEntry> manifest;
  auto emit = [&](const std::string& name, const std::string& content) {
    const std::string path = out_dir + "/" + name;
    util::write_file(path, content);
    manifest.push_back({path, util::fnv1a64_hex(content)});
  };

  emit("report.json", report_to_json(report).dump(2) + "\n");

  std::string sens_csv = "group,sensitivity,estimator,outcome_space,log_base\n";
  for (const auto& [group, value] : report.sensitivity) {
    char row[256];
    std::snprintf(row, sizeof(row), "\"%s\",%.17g,%s,%s,%.17g\n", group.c_str(), value,
                  report.sensitivity_estimator.c_str(), report.sensitivity_outcome_space.c_str(),
                  report.log_base);
    sens_csv += row;
  }
  emit("sensitivity.csv", sens_csv);

  if (report.mode == "with_gt") {
    std::string acc_csv = "group,accuracy_per_variant,accuracy_voted\n";
    for (const auto& [group, value] : report.accuracy_per_variant) {
      char row[256];
      auto voted = report.accuracy_voted.find(group);
      if (voted != report.accuracy_voted.end()) {
        std::snprintf(row, sizeof(row), "\"%s\",%.17g,%.17g\n", group.c_str(), value,
                      voted->second);
      } else {
        std::snprintf(row, sizeof(row), "\"%s\",%.17g,\n", group.c_str(), value);
      }
      acc_csv += row;
    }
    emit("accuracy.csv", acc_csv);
  }

  auto svgs = emit_svgs(report, out_dir, precision);
  manifest.insert(manifest.end(), svgs.begin(), svgs.end());
  return manifest;
}

// ---------------------------------------------------------------------------
// Cluster-count ablation

std::vector<AblationRow> ablation_clusters(const std::vector<corpus::TaskInstance>& tasks,
                                           const config::RunConfig& cfg,
                                           const std::vector<int>& k_values,
                                           backend::Backend& llm) {
  if (k_values.empty()) throw ValidationError("ablation needs at least one k value");
  for (int k : k_values) {
    if (k < 1) throw ValidationError("ablation k values must be >= 1");
  }
  if (cfg.label_alphabet.empty()) {
    throw ValidationError("ablation needs a label alphabet to compare predictions");
  }
  if (tasks.empty()) throw ValidationError("empty task list");

  auto prompt_uid = [](const corpus::PromptRecord& p) {
    return p.task_id + "/" + p.group_id + "/v" + std::to_string(p.variant_index) + "/" +
           corpus::stage_name(p.stage);
  };

  pipeline::RunContext ctx = pipeline::make_context(cfg, llm);
  const config::NeutralizeMode after_mode =
      cfg.mitigation.neutralize == config::NeutralizeMode::off
          ? config::NeutralizeMode::mask_then_llm
          : cfg.mitigation.neutralize;

  // Paraphrase pools and their prompt embeddings are k-independent; compute
  // once per task.
  struct TaskPool {
    std::vector<corpus::PromptRecord> prompts[2];            // 0=before, 1=after
    std::vector<clustering::EmbeddingVector> embeddings[2];  // l2-normalized
  };
  std::vector<TaskPool> pools(tasks.size());

  for (size_t t = 0; t < tasks.size(); ++t) {
    TaskPool& pool = pools[t];
    for (const auto& group : cfg.subgroups) {
      auto prompts = pipeline::paraphrase_stage(tasks[t], group, cfg.generation.m, ctx);
      for (auto& p : prompts) {
        pool.prompts[1].push_back(pipeline::neutralize_stage(p, after_mode, ctx));
        pool.prompts[0].push_back(std::move(p));
      }
    }
    for (int phase = 0; phase < 2; ++phase) {
      std::vector<std::string> texts;
      for (const auto& p : pool.prompts[phase]) {
        texts.push_back(p.text.empty() ? " " : p.text);  // keep slot alignment
      }
      auto embedded = llm.embed(texts, cfg.models.embed);
      for (size_t i = 0; i < embedded.size(); ++i) {
        embedded[i].source_response_id = prompt_uid(pool.prompts[phase][i]);
        pool.embeddings[phase].push_back(clustering::l2_normalize(embedded[i]));
      }
    }
  }

  std::vector<AblationRow> rows;
  for (int k : k_values) {
    AblationRow row;
    row.k = k;
    size_t consistent[2] = {0, 0};
    for (size_t t = 0; t < tasks.size(); ++t) {
      const TaskPool& pool = pools[t];
      if (pool.embeddings[0].size() < static_cast<size_t>(k)) {
        std::cerr << "warning: task '" << tasks[t].task_id << "' has "
                  << pool.embeddings[0].size() << " paraphrases < k=" << k << "; skipped\n";
        ++row.skipped;
        continue;
      }
      ++row.evaluated;
      for (int phase = 0; phase < 2; ++phase) {
        auto model = clustering::kmeans_fit(pool.embeddings[phase], k, cfg.clustering.n_init,
                                            cfg.clustering.seeds.front());
        // Medoid per cluster: assigned point nearest its centroid.
        std::vector<int> medoid(static_cast<size_t>(k), -1);
        std::vector<double> best(static_cast<size_t>(k),
                                 std::numeric_limits<double>::infinity());
        for (size_t i = 0; i < pool.embeddings[phase].size(); ++i) {
          const int c = model.assignments.at(pool.embeddings[phase][i].source_response_id);
          double d2 = 0.0;
          for (size_t d = 0; d < pool.embeddings[phase][i].values.size(); ++d) {
            const double diff =
                pool.embeddings[phase][i].values[d] - model.centroids[static_cast<size_t>(c)][d];
            d2 += diff * diff;
          }
          if (d2 < best[static_cast<size_t>(c)]) {
            best[static_cast<size_t>(c)] = d2;
            medoid[static_cast<size_t>(c)] = static_cast<int>(i);
          }
        }

        bool unanimous = true;
        std::optional<std::string> agreed;
        for (int c = 0; c < k && unanimous; ++c) {
          if (medoid[static_cast<size_t>(c)] < 0) continue;  // empty cluster
          const auto& rep = pool.prompts[phase][static_cast<size_t>(medoid[static_cast<size_t>(c)])];
          auto responses = pipeline::infer_stage(rep, 1, ctx);
          const auto label =
              pipeline::extract_label(responses.front().raw_text, cfg.label_alphabet);
          if (!label) {
            unanimous = false;
            break;
          }
          if (!agreed) {
            agreed = label;
          } else if (*agreed != *label) {
            unanimous = false;
          }
        }
        if (unanimous && agreed) ++consistent[phase];
      }
    }
    if (row.evaluated > 0) {
      row.consistency_before =
          static_cast<double>(consistent[0]) / static_cast<double>(row.evaluated);
      row.consistency_after =
          static_cast<double>(consistent[1]) / static_cast<double>(row.evaluated);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
  std::string csv = "k,consistency_before,consistency_after,evaluated,skipped\n";
  for (const auto& row : rows) {
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%zu,%zu\n", row.k, row.consistency_before,
                  row.consistency_after, row.evaluated, row.skipped);
    csv += line;
  }
  return csv;
}

json ablation_to_json(const std::vector<AblationRow>& rows) {
  json arr = json::array();
  for (const auto& row : rows) {
    arr.push_back({{"k", row.k},
                   {"consistency_before", row.consistency_before},
                   {"consistency_after", row.consistency_after},
                   {"evaluated", row.evaluated},
                   {"skipped", row.skipped}});
  }
  return arr;
}

}  // namespace audit::reporting
