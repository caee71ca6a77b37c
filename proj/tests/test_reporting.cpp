#include "audit/reporting.hpp"

#include <filesystem>
#include <regex>
#include <set>
#include <unistd.h>

#include <doctest.h>

#include "audit/errors.hpp"
#include "audit/util.hpp"
#include "fixtures.hpp"

using namespace audit;
using fixtures::ScriptedBackend;
namespace fs = std::filesystem;

namespace {

constexpr double kE = 2.718281828459045235;

fs::path temp_dir() {
  static int counter = 0;
  fs::path dir = fs::temp_directory_path() /
                 ("audit-report-test-" + std::to_string(::getpid()) + "-" +
                  std::to_string(counter++));
  fs::create_directories(dir);
  return dir;
}

metrics::DivergenceMatrix sample_matrix(metrics::Metric metric, std::vector<double> probs_a,
                                        std::vector<double> probs_b) {
  metrics::CategoricalDistribution a{{"x", "y"}, std::move(probs_a)};
  metrics::CategoricalDistribution b{{"x", "y"}, std::move(probs_b)};
  return metrics::divergence_matrix({{"g1", a}, {"g2", b}}, metric, kE, 1e-6);
}

pipeline::EvaluationReport sample_report(bool with_gt) {
  pipeline::EvaluationReport report;
  report.mode = with_gt ? "with_gt" : "without_gt";
  if (with_gt) {
    report.accuracy_per_variant = {{"g1", 0.75}, {"g2", 0.5}};
    report.accuracy_voted = {{"g1", 0.8}, {"g2", 0.6}};
    report.majority_vote = true;
  }
  report.sensitivity = {{"g1", 0.12345678901234567}, {"g2", 0.5}};
  report.sensitivity_estimator = "variant_marginal";
  report.sensitivity_outcome_space = with_gt ? "labels" : "clusters";
  report.log_base = kE;

  pipeline::MatrixEntry before;
  before.phase = "before";
  before.matrix = sample_matrix(metrics::Metric::jsd, {0.9, 0.1}, {0.4, 0.6});
  before.alpha = 1e-6;
  before.estimator = "variant_marginal";
  before.seeds = {0, 1, 2};
  report.matrices.push_back(before);

  pipeline::MatrixEntry after = before;
  after.phase = "after_neutralize";
  after.matrix = sample_matrix(metrics::Metric::jsd, {0.55, 0.45}, {0.45, 0.55});
  report.matrices.push_back(after);

  report.config_hash = "cafe0123deadbeef";
  report.backend_name = "mock";
  report.seed = 1234;
  report.kmeans_seeds = {0, 1, 2};
  report.k = 2;
  report.n_init = 5;
  report.m = 3;
  report.n_gen = 1;
  report.neutralize_mode = "mask_then_llm";
  report.counts["before"] = {24, 20, {{"empty", 3}, {"refusal", 1}}};
  return report;
}

std::vector<std::string> cell_fills(const std::string& svg) {
  // Cells are the only rects with a computed fill color besides the white
  // background; capture fills in document (row-major) order.
  std::vector<std::string> fills;
  std::regex re("<rect[^>]*fill=\"(#[0-9a-f]{6})\"[^>]*/>");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), re);
       it != std::sregex_iterator(); ++it) {
    if ((*it)[1] != "#ffffff") fills.push_back((*it)[1]);
  }
  return fills;
}

size_t count_occurrences(const std::string& text, const std::string& needle) {
  size_t count = 0;
  for (size_t pos = text.find(needle); pos != std::string::npos;
       pos = text.find(needle, pos + 1)) {
    ++count;
  }
  return count;
}

}  // namespace

TEST_CASE("heatmap color ramp is monotone") {
  CHECK(reporting::heatmap_color(0.0) == "#f7fbff");
  CHECK(reporting::heatmap_color(1.0) == "#08306b");
  CHECK(reporting::heatmap_color(-5.0) == "#f7fbff");  // clamps
  CHECK(reporting::heatmap_color(7.0) == "#08306b");

  int prev_r = 256;
  for (int step = 0; step <= 100; ++step) {
    const std::string color = reporting::heatmap_color(step / 100.0);
    const int r = std::stoi(color.substr(1, 2), nullptr, 16);
    CHECK(r <= prev_r);
    prev_r = r;
  }
}

TEST_CASE("zero matrix renders at scale-min color with 0.00 labels") {
  metrics::DivergenceMatrix zero;
  zero.group_ids = {"g1", "g2"};
  zero.metric = metrics::Metric::tv;
  zero.log_base = kE;
  zero.values = {{0.0, 0.0}, {0.0, 0.0}};

  const auto spec = reporting::HeatmapSpec::for_matrix(zero, "zero");
  const std::string svg = reporting::render_heatmap(spec);
  auto fills = cell_fills(svg);
  REQUIRE(fills.size() == 4);
  for (const auto& fill : fills) CHECK(fill == "#f7fbff");
  CHECK(count_occurrences(svg, ">0.00</text>") == 4);
}

TEST_CASE("4x4 heatmap structure: 16 cells, 8 axis labels, deterministic bytes") {
  std::vector<std::pair<std::string, metrics::CategoricalDistribution>> groups;
  const std::vector<std::vector<double>> probs = {
      {0.9, 0.1}, {0.6, 0.4}, {0.3, 0.7}, {0.15, 0.85}};
  for (size_t g = 0; g < 4; ++g) {
    groups.emplace_back("grp" + std::to_string(g),
                        metrics::CategoricalDistribution{{"x", "y"}, probs[g]});
  }
  auto matrix = metrics::divergence_matrix(groups, metrics::Metric::jsd, kE, 0.0);
  const auto spec = reporting::HeatmapSpec::for_matrix(matrix, "jsd divergence");

  const std::string svg = reporting::render_heatmap(spec);
  CHECK(cell_fills(svg).size() == 16);
  CHECK(count_occurrences(svg, "class=\"axis\"") == 8);
  CHECK(count_occurrences(svg, "class=\"cell-value\"") == 16);
  CHECK(svg.find("jsd divergence") != std::string::npos);

  CHECK(reporting::render_heatmap(spec) == svg);  // byte-identical
}

TEST_CASE("heatmap cell color intensity tracks matrix values") {
  std::vector<std::pair<std::string, metrics::CategoricalDistribution>> groups;
  const std::vector<std::vector<double>> probs = {
      {1.0, 0.0}, {0.7, 0.3}, {0.4, 0.6}, {0.0, 1.0}};
  for (size_t g = 0; g < 4; ++g) {
    groups.emplace_back("grp" + std::to_string(g),
                        metrics::CategoricalDistribution{{"x", "y"}, probs[g]});
  }
  auto matrix = metrics::divergence_matrix(groups, metrics::Metric::tv, kE, 0.0);
  const auto spec = reporting::HeatmapSpec::for_matrix(matrix, "tv");
  auto fills = cell_fills(reporting::render_heatmap(spec));
  REQUIRE(fills.size() == 16);

  auto red = [](const std::string& fill) { return std::stoi(fill.substr(1, 2), nullptr, 16); };
  for (size_t i = 0; i < 4; ++i) {
    for (size_t j = 0; j < 4; ++j) {
      for (size_t a = 0; a < 4; ++a) {
        for (size_t b = 0; b < 4; ++b) {
          if (matrix.values[i][j] < matrix.values[a][b]) {
            CHECK(red(fills[i * 4 + j]) >= red(fills[a * 4 + b]));
          }
        }
      }
    }
  }
}

TEST_CASE("degenerate color scale is rejected") {
  metrics::DivergenceMatrix m;
  m.group_ids = {"a", "b"};
  m.metric = metrics::Metric::tv;
  m.log_base = kE;
  m.values = {{0.0, 0.5}, {0.5, 0.0}};
  reporting::HeatmapSpec spec;
  spec.matrix = m;
  spec.scale_min = 0.3;
  spec.scale_max = 0.3;
  CHECK_THROWS_AS(reporting::render_heatmap(spec), ValidationError);
}

TEST_CASE("report json round-trips every field exactly") {
  for (bool with_gt : {true, false}) {
    const auto report = sample_report(with_gt);
    const auto j = reporting::report_to_json(report);
    const auto parsed = reporting::report_from_json(j);
    CHECK(reporting::report_to_json(parsed).dump() == j.dump());

    CHECK(parsed.sensitivity.at("g1") == report.sensitivity.at("g1"));
    CHECK(parsed.matrices[0].matrix.values[0][1] == report.matrices[0].matrix.values[0][1]);
    CHECK(parsed.counts.at("before").used == 20);
    if (with_gt) {
      CHECK(parsed.accuracy_voted.at("g2") == 0.6);
    } else {
      CHECK(parsed.accuracy_per_variant.empty());
    }
  }
}

TEST_CASE("emit_report writes the full artifact set deterministically") {
  const auto report = sample_report(true);
  const auto dir_a = temp_dir();
  const auto dir_b = temp_dir();
  auto manifest_a = reporting::emit_report(report, dir_a.string());
  auto manifest_b = reporting::emit_report(report, dir_b.string());

  REQUIRE(manifest_a.size() == manifest_b.size());
  std::set<std::string> names;
  for (size_t i = 0; i < manifest_a.size(); ++i) {
    CHECK(manifest_a[i].content_hash == manifest_b[i].content_hash);
    names.insert(fs::path(manifest_a[i].path).filename().string());
    CHECK(fs::exists(manifest_a[i].path));
  }
  CHECK(names.count("report.json") == 1);
  CHECK(names.count("sensitivity.csv") == 1);
  CHECK(names.count("accuracy.csv") == 1);
  CHECK(names.count("matrix_before_jsd.svg") == 1);
  CHECK(names.count("matrix_after_neutralize_jsd.svg") == 1);

  // Emitted report parses back to the same canonical form.
  const auto parsed = nlohmann::json::parse(util::read_file((dir_a / "report.json").string()));
  CHECK(reporting::report_to_json(reporting::report_from_json(parsed)).dump() == parsed.dump());

  // Label-free reports do not emit accuracy.csv.
  const auto free_report = sample_report(false);
  const auto dir_c = temp_dir();
  auto manifest_c = reporting::emit_report(free_report, dir_c.string());
  for (const auto& entry : manifest_c) {
    CHECK(fs::path(entry.path).filename().string() != "accuracy.csv");
  }
}

TEST_CASE("ablation: a constant responder is fully consistent for every k") {
  auto cfg = fixtures::base_config("without_gt");
  cfg.generation.m = 2;  // 8 paraphrases per task across 4 groups
  cfg.clustering.n_init = 5;
  auto tasks = fixtures::make_tasks(3, false);

  ScriptedBackend backend;
  const uint64_t seed = cfg.generation.seed;
  backend.on_paraphrase = [seed](const audit::backend::GenerationRequest& req) {
    return ScriptedBackend::block_of(req) + " restyled v" +
           std::to_string(fixtures::variant_of(req, seed)) + " " +
           audit::util::fnv1a64_hex(req.prompt).substr(0, 6);
  };
  backend.on_infer = [](const audit::backend::GenerationRequest&) {
    return std::string("definitely [A]");
  };

  auto rows = reporting::ablation_clusters(tasks, cfg, {1, 2, 3}, backend);
  REQUIRE(rows.size() == 3);
  for (const auto& row : rows) {
    CHECK(row.consistency_before == doctest::Approx(1.0));
    CHECK(row.consistency_after == doctest::Approx(1.0));
    CHECK(row.evaluated == 3);
    CHECK(row.skipped == 0);
  }
}

TEST_CASE("ablation skips tasks with fewer paraphrases than k") {
  auto cfg = fixtures::base_config("without_gt");
  cfg.generation.m = 1;  // pool of 4 paraphrases
  auto tasks = fixtures::make_tasks(2, false);

  ScriptedBackend backend;
  auto rows = reporting::ablation_clusters(tasks, cfg, {9}, backend);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].skipped == 2);
  CHECK(rows[0].evaluated == 0);
  CHECK(rows[0].consistency_before == 0.0);
}

TEST_CASE("ablation table serialization") {
  std::vector<reporting::AblationRow> rows = {{2, 0.824, 0.947, 30, 0}, {4, 0.741, 0.938, 30, 1}};
  const std::string csv = reporting::ablation_to_csv(rows);
  CHECK(csv.find("k,consistency_before,consistency_after,evaluated,skipped\n") == 0);
  CHECK(csv.find("\n2,") != std::string::npos);
  CHECK(csv.find("0.82") != std::string::npos);

  const auto j = reporting::ablation_to_json(rows);
  REQUIRE(j.size() == 2);
  CHECK(j[1]["k"] == 4);
  CHECK(j[1]["skipped"] == 1);
}
