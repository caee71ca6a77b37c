#pragma once

#include <string>
#include <vector>

namespace audit::metrics {

// Normalized probability vector over named discrete outcomes (labels or
// cluster ids). Probabilities must be non-negative and sum to 1 within 1e-9;
// outcome names must be unique.
struct CategoricalDistribution {
  std::vector<std::string> outcomes;
  std::vector<double> probs;

  static CategoricalDistribution from_counts(const std::vector<std::string>& outcomes,
                                             const std::vector<double>& counts);
  static CategoricalDistribution uniform(const std::vector<std::string>& outcomes);

  void validate() const;
  size_t size() const { return outcomes.size(); }
  bool same_outcomes(const CategoricalDistribution& other) const {
    return outcomes == other.outcomes;
  }
};

// A family of outcome distributions indexed by prompt variant, plus a weight
// over the variants. All per-variant distributions share one outcome set.
struct ConditionalDistributionSet {
  std::vector<std::string> conditioners;
  std::vector<double> weights;
  std::vector<CategoricalDistribution> per_variant;

  void validate() const;
};

enum class Metric { kl, sym_kl, tv, jsd };

Metric metric_from_name(const std::string& name);
std::string metric_name(Metric m);
bool metric_is_symmetric(Metric m);

// K x K pairwise subgroup divergence under one metric. Diagonal is zero;
// symmetric metrics produce symmetric matrices.
struct DivergenceMatrix {
  std::vector<std::string> group_ids;
  Metric metric = Metric::jsd;
  std::vector<std::vector<double>> values;
  double log_base = 2.718281828459045;

  void validate() const;
  double at(size_t i, size_t j) const { return values[i][j]; }
  double max_value() const;
};

// Shannon entropy -sum p*log(p) in the given base, with 0*log(0) := 0.
double entropy(const CategoricalDistribution& d, double log_base);

// sum_x w(x) * H(outcomes | variant x): the plug-in subgroup-sensitivity
// estimate when several generations per variant are available.
double conditional_entropy(const ConditionalDistributionSet& c, double log_base);

// Mixture of the per-variant distributions under the variant weights.
CategoricalDistribution marginal_outcome_distribution(const ConditionalDistributionSet& c);

// Additive smoothing (p_i + alpha) / (1 + alpha*k). alpha = 0 is the identity.
CategoricalDistribution smooth(const CategoricalDistribution& d, double alpha);

// KL(p || q). Throws DivergenceError if q has zero mass where p > 0.
double kl(const CategoricalDistribution& p, const CategoricalDistribution& q, double log_base);

// KL(p||q) + KL(q||p).
double symmetric_kl(const CategoricalDistribution& p, const CategoricalDistribution& q,
                    double log_base);

// Total variation distance 0.5 * sum |p_i - q_i|, in [0, 1].
double tv(const CategoricalDistribution& p, const CategoricalDistribution& q);

// Jensen-Shannon divergence; finite without smoothing, bounded by log(2).
double jsd(const CategoricalDistribution& p, const CategoricalDistribution& q, double log_base);

double divergence(Metric m, const CategoricalDistribution& p, const CategoricalDistribution& q,
                  double log_base);

// Pairwise divergences between >= 2 group distributions over one outcome set.
// KL-family metrics see smoothed distributions (additive alpha); TV and JSD
// see the raw ones.
DivergenceMatrix divergence_matrix(
    const std::vector<std::pair<std::string, CategoricalDistribution>>& group_dists,
    Metric metric, double log_base, double alpha);

// Element-wise mean of matrices sharing group ids, metric, and log base.
DivergenceMatrix average_matrices(const std::vector<DivergenceMatrix>& ms);

}  // namespace audit::metrics
