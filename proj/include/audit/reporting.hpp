#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "audit/metrics.hpp"
#include "audit/pipeline.hpp"

namespace audit::reporting {

struct HeatmapSpec {
  metrics::DivergenceMatrix matrix;
  double scale_min = 0.0;
  double scale_max = 1.0;
  int precision = 2;
  std::string title;

  // Scale 0..observed max (floor 1.0 so an all-zero matrix still renders).
  static HeatmapSpec for_matrix(const metrics::DivergenceMatrix& m, std::string title,
                                int precision = 2);
  void validate() const;
};

// Monotone single-hue ramp (white to dark blue); t clamps to [0,1].
std::string heatmap_color(double t);

// Deterministic standalone SVG: K x K cell grid, numeric cell labels, row and
// column group labels, title, scale note.
std::string render_heatmap(const HeatmapSpec& spec);

nlohmann::json report_to_json(const pipeline::EvaluationReport& report);
pipeline::EvaluationReport report_from_json(const nlohmann::json& j);

struct ManifestEntry {
  std::string path;
  std::string content_hash;
};

// One SVG per matrix entry: matrix_<phase>_<metric>.svg under out_dir.
std::vector<ManifestEntry> emit_svgs(const pipeline::EvaluationReport& report,
                                     const std::string& out_dir, int precision = 2);

// Writes report.json, sensitivity.csv, accuracy.csv (ground-truth runs), and
// the heatmap SVGs; returns the manifest of paths and content hashes.
std::vector<ManifestEntry> emit_report(const pipeline::EvaluationReport& report,
                                       const std::string& out_dir, int precision = 2);

struct AblationRow {
  int k = 0;
  double consistency_before = 0.0;
  double consistency_after = 0.0;
  size_t evaluated = 0;
  size_t skipped = 0;
};

// Cluster-count ablation: per k, cluster each task's paraphrase pool in
// embedding space, infer on each cluster medoid prompt, and report the
// fraction of tasks whose representatives all agree on one label - before
// and after neutralization. Tasks with fewer paraphrases than k are skipped
// with a warning and counted.
std::vector<AblationRow> ablation_clusters(const std::vector<corpus::TaskInstance>& tasks,
                                           const config::RunConfig& cfg,
                                           const std::vector<int>& k_values,
                                           backend::Backend& llm);

std::string ablation_to_csv(const std::vector<AblationRow>& rows);
nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);

}  // namespace audit::reporting
