// Acceptance suite: one criterion per function, one PASS/FAIL line each.
// Run directly or through ctest; exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>
#include <unistd.h>

#include <json.hpp>

#include "audit/backend.hpp"
#include "audit/clustering.hpp"
#include "audit/config.hpp"
#include "audit/corpus.hpp"
#include "audit/metrics.hpp"
#include "audit/pipeline.hpp"
#include "audit/reporting.hpp"
#include "audit/util.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace audit;
using fixtures::ScriptedBackend;
namespace fs = std::filesystem;

namespace {

struct CriterionFailure {
  std::string message;
};

#define ACCEPT(cond)                                                                     \
  do {                                                                                   \
    if (!(cond)) {                                                                       \
      throw CriterionFailure{std::string(#cond) + " (line " + std::to_string(__LINE__) + \
                             ")"};                                                       \
    }                                                                                    \
  } while (0)

constexpr double kE = 2.718281828459045235;

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() /
                 ("audit-accept-" + std::to_string(::getpid()) + "-" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

metrics::CategoricalDistribution dist(const std::vector<double>& probs) {
  metrics::CategoricalDistribution d;
  for (size_t i = 0; i < probs.size(); ++i) d.outcomes.push_back("o" + std::to_string(i));
  d.probs = probs;
  return d;
}

// Criterion 1: entropy/KL/symKL/TV/JSD match the independent brute-force
// oracle on 1e4 random pairs within 1e-9 absolute; bounds hold everywhere.
void criterion_metric_oracles() {
  oracle::Rng rng(20260808);
  const double log2_in_base_e = std::log(2.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const size_t k = 2 + rng.index(7);
    const auto pv = oracle::random_dist(rng, k, true);
    const auto qv = oracle::random_dist(rng, k, true);
    const auto p = dist(pv);
    const auto q = dist(qv);

    ACCEPT(std::abs(metrics::entropy(p, kE) - oracle::entropy(pv, kE)) <= 1e-9);
    ACCEPT(std::abs(metrics::entropy(q, 2.0) - oracle::entropy(qv, 2.0)) <= 1e-9);

    const double tv = metrics::tv(p, q);
    ACCEPT(std::abs(tv - oracle::tv(pv, qv)) <= 1e-9);
    ACCEPT(tv >= 0.0 && tv <= 1.0 + 1e-12);

    const double jsd = metrics::jsd(p, q, kE);
    ACCEPT(std::abs(jsd - oracle::jsd(pv, qv, kE)) <= 1e-9);
    ACCEPT(jsd >= -1e-15 && jsd <= log2_in_base_e + 1e-12);

    // KL family on strictly positive (smoothed) distributions.
    const auto ps = metrics::smooth(p, 1e-6);
    const auto qs = metrics::smooth(q, 1e-6);
    const double kl = metrics::kl(ps, qs, kE);
    ACCEPT(std::abs(kl - oracle::kl(ps.probs, qs.probs, kE)) <= 1e-9);
    ACCEPT(kl >= -1e-12);

    const double sym = metrics::symmetric_kl(ps, qs, kE);
    ACCEPT(std::abs(sym - oracle::sym_kl(ps.probs, qs.probs, kE)) <= 1e-9);
    ACCEPT(sym >= -1e-12);
  }
}

// Criterion 2: for n <= 8, k <= 3 the fitted inertia equals the global
// optimum from exhaustive partition enumeration (200 random instances).
void criterion_kmeans_global_optimum() {
  oracle::Rng rng(77);
  for (int instance = 0; instance < 200; ++instance) {
    const int k = 2 + static_cast<int>(rng.index(2));
    const size_t n = static_cast<size_t>(k) + rng.index(9 - static_cast<size_t>(k));
    const size_t dim = 2 + rng.index(3);
    std::vector<std::vector<double>> raw;
    std::vector<clustering::EmbeddingVector> points;
    for (size_t i = 0; i < n; ++i) {
      std::vector<double> x;
      for (size_t d = 0; d < dim; ++d) x.push_back(rng.uniform());
      raw.push_back(x);
      points.push_back({x, "p" + std::to_string(i)});
    }
    const auto model = clustering::kmeans_fit(points, k, 50, rng.next());
    const double best = oracle::optimal_inertia(raw, k);
    ACCEPT(std::abs(model.inertia - best) <= 1e-9 * std::max(1.0, best));
  }
}

// Criterion 3: `audit run --mock` with fixed seeds, 4 groups x 10 tasks x
// m=5, executed twice, produces byte-identical report.json and SVGs.
void criterion_cli_determinism() {
  const fs::path dir = fresh_dir("cli");

  std::vector<corpus::TaskInstance> tasks;
  for (int i = 0; i < 10; ++i) {
    corpus::TaskInstance t;
    t.task_id = "bold-" + std::to_string(i);
    t.prompt = "Prompt " + std::to_string(i) + " describes a professional and their work.";
    tasks.push_back(t);
  }
  const std::string corpus_path = (dir / "corpus.jsonl").string();
  corpus::save_prompt_corpus(corpus_path, tasks);

  nlohmann::json cfg;
  cfg["mode"] = "without_gt";
  cfg["corpus"] = {{"path", corpus_path}, {"format", "jsonl"}};
  cfg["subgroups"] = nlohmann::json::array();
  for (const auto& g : fixtures::four_groups()) {
    cfg["subgroups"].push_back({{"group_id", g.group_id},
                                {"persona_phrase", g.persona_phrase},
                                {"lexicon", g.lexicon}});
  }
  cfg["generation"] = {{"m", 5}, {"seed", 4242}};
  cfg["mitigation"] = {{"neutralize", "mask_then_llm"}};
  cfg["metrics"] = {{"names", {"jsd", "kl"}}, {"log_base", "e"}, {"alpha", 1e-6}};
  cfg["clustering"] = {{"k", 4}, {"n_init", 10}, {"seeds", {0, 1, 2, 3, 4}}};
  const std::string cfg_path = (dir / "config.json").string();
  util::write_file(cfg_path, cfg.dump(2));

  auto run_once = [&](const std::string& out_dir) {
    std::ostringstream cmd;
    cmd << "\"" << AUDIT_BIN_PATH << "\" --mock run --config \"" << cfg_path << "\" --out \""
        << out_dir << "\" > \"" << out_dir << ".log\" 2>&1";
    fs::create_directories(out_dir);
    const int rc = std::system(cmd.str().c_str());
    ACCEPT(rc == 0);
  };
  const std::string out1 = (dir / "run1").string();
  const std::string out2 = (dir / "run2").string();
  run_once(out1);
  run_once(out2);

  std::set<std::string> names;
  for (const auto& entry : fs::directory_iterator(out1)) {
    names.insert(entry.path().filename().string());
  }
  ACCEPT(names.count("report.json") == 1);
  size_t svg_count = 0;
  for (const auto& name : names) {
    if (name.size() > 4 && name.substr(name.size() - 4) == ".svg") ++svg_count;
  }
  ACCEPT(svg_count == 4);  // {jsd, kl} x {before, after_neutralize}
  for (const auto& name : names) {
    if (name != "report.json" && name.substr(name.size() - 4) != ".svg") continue;
    ACCEPT(util::read_file(out1 + "/" + name) == util::read_file(out2 + "/" + name));
  }
}

// Criterion 4: majority voting over m=5 with per-variant flip probability 0.3
// lands within +/-0.02 of the binomial error 0.16308 on 1e4 tasks, and the
// voted channel's variant-marginal entropy is strictly below the single-
// response channel's.
void criterion_majority_vote_binomial() {
  const int n_tasks = 10000;
  auto cfg = fixtures::base_config("with_gt");
  cfg.subgroups = {{"ref", "a careful analyst", {}}, {"biased", "a hurried analyst", {}}};
  cfg.generation.m = 5;
  cfg.mitigation.majority_vote = true;
  cfg.metrics.names = std::vector<std::string>{"tv"};
  cfg.metrics.log_base = 2.0;
  auto tasks = fixtures::make_tasks(n_tasks, true, "A");

  ScriptedBackend responder;
  const uint64_t seed = cfg.generation.seed;
  const auto groups = cfg.subgroups;
  responder.on_paraphrase = [seed, groups](const backend::GenerationRequest& req) {
    return ScriptedBackend::block_of(req) +
           " |g=" + fixtures::group_of_instruction(req.prompt, groups) +
           "|v=" + std::to_string(fixtures::variant_of(req, seed));
  };
  responder.on_infer = [](const backend::GenerationRequest& req) {
    bool flip = false;
    if (req.prompt.find("|g=biased|") != std::string::npos) {
      const double u =
          util::unit_double(util::mix_seed(util::fnv1a64(req.prompt), 0xACC4));
      flip = u < 0.3;
    }
    return std::string("verdict [") + (flip ? "B" : "A") + "]";
  };

  const auto report = pipeline::run_with_ground_truth(tasks, cfg, responder);

  const double per_variant_acc = report.accuracy_per_variant.at("biased");
  ACCEPT(std::abs((1.0 - per_variant_acc) - 0.3) <= 0.02);
  const double voted_error = 1.0 - report.accuracy_voted.at("biased");
  ACCEPT(std::abs(voted_error - oracle::binomial_tail(5, 0.3, 3)) <= 0.02);
  ACCEPT(std::abs(voted_error - 0.16308) <= 0.02);
  ACCEPT(report.accuracy_voted.at("ref") == 1.0);

  // Ground truth is constant, so the pooled label distributions are exactly
  // [accuracy, 1 - accuracy].
  const double h_single =
      metrics::entropy(dist({per_variant_acc, 1.0 - per_variant_acc}), 2.0);
  const double h_voted = metrics::entropy(dist({1.0 - voted_error, voted_error}), 2.0);
  ACCEPT(h_voted < h_single);
}

// Criterion 5: embeddings keyed to demographic tokens that mask_then_llm
// removes; every off-diagonal divergence falls (or holds) after
// neutralization, with at least one drop of >= 50%.
void criterion_neutralization_mitigation() {
  auto cfg = fixtures::base_config("without_gt");
  cfg.mitigation.neutralize = config::NeutralizeMode::mask_then_llm;
  cfg.generation.m = 5;
  cfg.clustering.k = 4;
  cfg.clustering.n_init = 10;
  cfg.clustering.seeds = {0, 1, 2, 3, 4};
  cfg.metrics.names = std::vector<std::string>{"jsd", "kl"};
  cfg.metrics.alpha = 1e-6;
  auto tasks = fixtures::make_tasks(10, false);

  ScriptedBackend responder;
  const auto groups = cfg.subgroups;
  const uint64_t seed = cfg.generation.seed;
  responder.on_paraphrase = [groups, seed](const backend::GenerationRequest& req) {
    std::string style;
    for (const auto& g : groups) {
      if (req.prompt.find(g.persona_phrase) != std::string::npos) {
        for (const auto& token : g.lexicon) style += " " + token;
      }
    }
    return ScriptedBackend::block_of(req) + " [style:" + style + "] v" +
           std::to_string(fixtures::variant_of(req, seed));
  };
  responder.on_infer = [](const backend::GenerationRequest& req) {
    return "resp: " + req.prompt;
  };
  responder.on_embed = [](const std::string& text) {
    std::vector<double> v(8, 0.0);
    const std::vector<std::pair<std::string, size_t>> axes = {
        {" white", 0}, {" black", 1}, {" male", 2}, {" female", 3}};
    bool any = false;
    for (const auto& [token, axis] : axes) {
      if (text.find(token) != std::string::npos) {
        v[axis] = 1.0;
        any = true;
      }
    }
    if (!any) v[4 + util::fnv1a64(text) % 4] = 1.0;
    return v;
  };

  const auto report = pipeline::run_without_ground_truth(tasks, cfg, responder);

  std::map<std::string, const pipeline::MatrixEntry*> before, after;
  for (const auto& entry : report.matrices) {
    const std::string metric = metrics::metric_name(entry.matrix.metric);
    if (entry.phase == "before") before[metric] = &entry;
    if (entry.phase == "after_neutralize") after[metric] = &entry;
  }
  ACCEPT(before.size() == 2 && after.size() == 2);

  for (const auto& [metric, b] : before) {
    const auto* a = after.at(metric);
    bool strict_half_drop = false;
    const size_t k = b->matrix.group_ids.size();
    for (size_t i = 0; i < k; ++i) {
      for (size_t j = 0; j < k; ++j) {
        if (i == j) continue;
        const double vb = b->matrix.values[i][j];
        const double va = a->matrix.values[i][j];
        ACCEPT(va <= vb + 1e-12);
        if (vb > 0.0 && (vb - va) >= 0.5 * vb) strict_half_drop = true;
      }
    }
    ACCEPT(strict_half_drop);
  }
}

// Criterion 6: identical response behavior across groups gives exactly-zero
// matrices on the unsmoothed TV and JSD paths, in both evaluation modes.
void criterion_zero_bias_sanity() {
  // Labeled mode.
  auto cfg = fixtures::base_config("with_gt");
  cfg.metrics.names = std::vector<std::string>{"tv", "jsd"};
  cfg.metrics.alpha = 0.0;
  cfg.generation.m = 3;
  auto tasks = fixtures::make_tasks(6, true, "A");

  ScriptedBackend blind;
  const uint64_t seed = cfg.generation.seed;
  blind.on_paraphrase = [seed](const backend::GenerationRequest& req) {
    return ScriptedBackend::block_of(req) + " v" +
           std::to_string(fixtures::variant_of(req, seed));
  };
  blind.on_infer = [](const backend::GenerationRequest& req) {
    return std::string("the answer [") + (util::fnv1a64(req.prompt) % 2 ? "A" : "B") + "]";
  };

  const auto labeled = pipeline::run_with_ground_truth(tasks, cfg, blind);
  ACCEPT(labeled.matrices.size() == 2);
  for (const auto& entry : labeled.matrices) {
    for (const auto& row : entry.matrix.values) {
      for (double v : row) ACCEPT(v == 0.0);
    }
  }

  // Label-free mode.
  auto free_cfg = fixtures::base_config("without_gt");
  free_cfg.metrics.names = std::vector<std::string>{"tv", "jsd"};
  free_cfg.metrics.alpha = 0.0;
  free_cfg.generation.m = 3;
  free_cfg.clustering.k = 3;
  auto free_tasks = fixtures::make_tasks(6, false);
  blind.on_infer = [](const backend::GenerationRequest& req) { return "resp: " + req.prompt; };

  const auto label_free = pipeline::run_without_ground_truth(free_tasks, free_cfg, blind);
  for (const auto& entry : label_free.matrices) {
    for (const auto& row : entry.matrix.values) {
      for (double v : row) ACCEPT(v == 0.0);
    }
  }
}

// Criterion 7: masking exactness and idempotence over the shipped lexicon on
// a 100-sentence fixture corpus.
void criterion_masking_exactness() {
  const auto& lexicon = corpus::default_lexicon();
  ACCEPT(corpus::mask_demographic_terms("Jewish physicist", lexicon) == "physicist");

  const std::vector<std::string> subjects = {"physicist", "nurse",   "teacher", "engineer",
                                             "actor",     "senator", "chef",    "pilot"};
  const std::vector<std::string> verbs = {"published a paper", "won an award",
                                          "moved to Boston", "joined the team",
                                          "retired early"};
  oracle::Rng rng(9);
  std::vector<std::string> sentences;
  for (int i = 0; i < 100; ++i) {
    const auto& term = lexicon[rng.index(lexicon.size())];
    const auto& term2 = lexicon[rng.index(lexicon.size())];
    const auto& subject = subjects[rng.index(subjects.size())];
    const auto& verb = verbs[rng.index(verbs.size())];
    switch (i % 4) {
      case 0:
        sentences.push_back("The " + term + " " + subject + " " + verb + ".");
        break;
      case 1:
        sentences.push_back("A " + term + " " + term2 + " " + subject + " " + verb + ".");
        break;
      case 2:
        sentences.push_back(term + " voices say the " + subject + " " + verb + ".");
        break;
      default:
        sentences.push_back("The " + subject + ", a " + term + " parent, " + verb + ".");
    }
  }
  ACCEPT(sentences.size() == 100);
  for (const auto& sentence : sentences) {
    const std::string once = corpus::mask_demographic_terms(sentence, lexicon);
    const std::string twice = corpus::mask_demographic_terms(once, lexicon);
    ACCEPT(twice == once);
  }
}

// Criterion 8: over 20 responder seeds, mean ablation consistency is
// non-increasing in k=2,3,4 before mitigation, and the post-mitigation mean
// beats the pre-mitigation mean at every k.
void criterion_ablation_trend() {
  const std::vector<int> k_values = {2, 3, 4};
  const int n_seeds = 20;
  const std::vector<std::string> dialects = {"brooklynese",   "valleyspeak", "cockney",
                                             "southerndrawl", "surferslang", "bostonian"};

  auto cfg = fixtures::base_config("without_gt");
  cfg.generation.m = 5;
  cfg.clustering.n_init = 5;
  cfg.global_lexicon = dialects;  // maskable style markers
  cfg.label_alphabet = {"A", "B"};
  auto tasks = fixtures::make_tasks(25, false);

  std::vector<double> mean_before(k_values.size(), 0.0);
  std::vector<double> mean_after(k_values.size(), 0.0);

  for (int responder_seed = 0; responder_seed < n_seeds; ++responder_seed) {
    ScriptedBackend responder;
    const uint64_t base = cfg.generation.seed;
    const auto groups = cfg.subgroups;
    responder.on_paraphrase = [&, base](const backend::GenerationRequest& req) {
      const std::string group = fixtures::group_of_instruction(req.prompt, groups);
      const int variant = fixtures::variant_of(req, base);
      const uint64_t h =
          util::mix_seed(util::fnv1a64(group + "#" + std::to_string(variant)),
                         static_cast<uint64_t>(responder_seed));
      return ScriptedBackend::block_of(req) + " spoken in " + dialects[h % dialects.size()];
    };
    responder.on_infer = [&](const backend::GenerationRequest& req) {
      bool flip = false;
      for (const auto& dialect : dialects) {
        if (req.prompt.find(dialect) != std::string::npos) {
          const double u = util::unit_double(util::mix_seed(
              util::fnv1a64(req.prompt), 0xAB1A + static_cast<uint64_t>(responder_seed)));
          flip = u < 0.25;
          break;
        }
      }
      return std::string("conclusion [") + (flip ? "B" : "A") + "]";
    };
    responder.on_embed = [&](const std::string& text) {
      std::vector<double> v(8, 0.0);
      bool any = false;
      for (size_t d = 0; d < dialects.size(); ++d) {
        if (text.find(dialects[d]) != std::string::npos) {
          v[d] = 1.0;
          any = true;
        }
      }
      if (!any) v[6 + util::fnv1a64(text) % 2] = 1.0;
      return v;
    };

    const auto rows = reporting::ablation_clusters(tasks, cfg, k_values, responder);
    for (size_t i = 0; i < k_values.size(); ++i) {
      mean_before[i] += rows[i].consistency_before / n_seeds;
      mean_after[i] += rows[i].consistency_after / n_seeds;
    }
  }

  for (size_t i = 1; i < k_values.size(); ++i) {
    ACCEPT(mean_before[i] <= mean_before[i - 1] + 1e-12);
  }
  for (size_t i = 0; i < k_values.size(); ++i) {
    ACCEPT(mean_after[i] > mean_before[i]);
  }
  // The trend is meaningful only if the responder actually misbehaves before
  // mitigation.
  ACCEPT(mean_before[0] < 0.999);
}

struct Criterion {
  int number;
  const char* name;
  std::function<void()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "metric oracle suite (1e4 random pairs, 1e-9 abs)", criterion_metric_oracles},
      {2, "k-means inertia equals exhaustive optimum (200 instances)",
       criterion_kmeans_global_optimum},
      {3, "audit run --mock twice: byte-identical report.json and SVGs",
       criterion_cli_determinism},
      {4, "majority vote: binomial error 0.16308 +/- 0.02, lower entropy",
       criterion_majority_vote_binomial},
      {5, "neutralization shrinks every off-diagonal divergence",
       criterion_neutralization_mitigation},
      {6, "identical group behavior: exactly-zero TV/JSD matrices",
       criterion_zero_bias_sanity},
      {7, "masking exactness and idempotence on 100-sentence corpus",
       criterion_masking_exactness},
      {8, "ablation consistency trend over 20 seeds, k=2,3,4", criterion_ablation_trend},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    const auto start = std::chrono::steady_clock::now();
    std::string failure;
    try {
      criterion.run();
    } catch (const CriterionFailure& f) {
      failure = f.message;
    } catch (const std::exception& e) {
      failure = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (failure.empty()) {
      std::printf("[PASS] criterion %d: %s (%.2fs)\n", criterion.number, criterion.name, secs);
    } else {
      ++failures;
      std::printf("[FAIL] criterion %d: %s (%.2fs)\n       %s\n", criterion.number,
                  criterion.name, secs, failure.c_str());
    }
    std::fflush(stdout);
  }
  if (failures) {
    std::printf("%d of %zu acceptance criteria failed\n", failures, criteria.size());
    return 1;
  }
  std::printf("all %zu acceptance criteria passed\n", criteria.size());
  return 0;
}
