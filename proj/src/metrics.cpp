#include "audit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "audit/errors.hpp"

namespace audit::metrics {

namespace {

constexpr double kProbSumTol = 1e-9;
constexpr double kSymTol = 1e-9;

void check_log_base(double log_base) {
  if (!(log_base > 1.0)) {
    throw ValidationError("log base must be > 1, got " + std::to_string(log_base));
  }
}

void check_same_outcomes(const CategoricalDistribution& p, const CategoricalDistribution& q) {
  if (!p.same_outcomes(q)) {
    throw ValidationError("distributions are over different outcome sets");
  }
}

}  // namespace

CategoricalDistribution CategoricalDistribution::from_counts(
    const std::vector<std::string>& outcomes, const std::vector<double>& counts) {
  if (outcomes.size() != counts.size()) {
    throw ValidationError("outcome/count length mismatch");
  }
  double total = 0.0;
  for (double c : counts) {
    if (c < 0.0) throw ValidationError("negative count");
    total += c;
  }
  if (total <= 0.0) throw ValidationError("cannot normalize all-zero counts");
  CategoricalDistribution d;
  d.outcomes = outcomes;
  d.probs.reserve(counts.size());
  for (double c : counts) d.probs.push_back(c / total);
  d.validate();
  return d;
}

CategoricalDistribution CategoricalDistribution::uniform(const std::vector<std::string>& outcomes) {
  if (outcomes.empty()) throw ValidationError("uniform distribution needs >= 1 outcome");
  CategoricalDistribution d;
  d.outcomes = outcomes;
  d.probs.assign(outcomes.size(), 1.0 / static_cast<double>(outcomes.size()));
  d.validate();
  return d;
}

void CategoricalDistribution::validate() const {
  if (outcomes.empty()) throw ValidationError("distribution has no outcomes");
  if (outcomes.size() != probs.size()) {
    throw ValidationError("outcome/probability length mismatch");
  }
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ValidationError("negative or NaN probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kProbSumTol) {
    throw ValidationError("probabilities sum to " + std::to_string(sum) + ", expected 1");
  }
  std::set<std::string> seen(outcomes.begin(), outcomes.end());
  if (seen.size() != outcomes.size()) throw ValidationError("duplicate outcome identifiers");
}

void ConditionalDistributionSet::validate() const {
  if (conditioners.empty()) throw ValidationError("conditional set has no variants");
  if (conditioners.size() != weights.size() || conditioners.size() != per_variant.size()) {
    throw ValidationError("conditioner/weight/distribution length mismatch");
  }
  CategoricalDistribution w{conditioners, weights};
  w.validate();
  for (const auto& d : per_variant) {
    d.validate();
    if (!d.same_outcomes(per_variant.front())) {
      throw ValidationError("per-variant distributions have mismatched outcome sets");
    }
  }
}

Metric metric_from_name(const std::string& name) {
  if (name == "kl") return Metric::kl;
  if (name == "sym_kl") return Metric::sym_kl;
  if (name == "tv") return Metric::tv;
  if (name == "jsd") return Metric::jsd;
  throw ValidationError("unknown metric name: " + name + " (expected kl|sym_kl|tv|jsd)");
}

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::kl: return "kl";
    case Metric::sym_kl: return "sym_kl";
    case Metric::tv: return "tv";
    case Metric::jsd: return "jsd";
  }
  return "?";
}

bool metric_is_symmetric(Metric m) { return m != Metric::kl; }

void DivergenceMatrix::validate() const {
  const size_t k = group_ids.size();
  if (k < 2) throw ValidationError("divergence matrix needs >= 2 groups");
  if (values.size() != k) throw ValidationError("matrix row count != group count");
  check_log_base(log_base);
  for (size_t i = 0; i < k; ++i) {
    if (values[i].size() != k) throw ValidationError("matrix is not square");
    if (values[i][i] != 0.0) throw ValidationError("matrix diagonal must be zero");
    for (size_t j = 0; j < k; ++j) {
      if (!(values[i][j] >= 0.0)) throw ValidationError("negative or NaN divergence value");
      if (metric_is_symmetric(metric) && std::abs(values[i][j] - values[j][i]) > kSymTol) {
        throw ValidationError("matrix not symmetric for metric " + metric_name(metric));
      }
    }
  }
  std::set<std::string> seen(group_ids.begin(), group_ids.end());
  if (seen.size() != k) throw ValidationError("duplicate group ids in matrix");
}

double DivergenceMatrix::max_value() const {
  double m = 0.0;
  for (const auto& row : values)
    for (double v : row) m = std::max(m, v);
  return m;
}

double entropy(const CategoricalDistribution& d, double log_base) {
  d.validate();
  check_log_base(log_base);
  double h = 0.0;
  for (double p : d.probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h / std::log(log_base);
}

double conditional_entropy(const ConditionalDistributionSet& c, double log_base) {
  c.validate();
  check_log_base(log_base);
  double h = 0.0;
  for (size_t i = 0; i < c.per_variant.size(); ++i) {
    if (c.weights[i] > 0.0) h += c.weights[i] * entropy(c.per_variant[i], log_base);
  }
  return h;
}

CategoricalDistribution marginal_outcome_distribution(const ConditionalDistributionSet& c) {
  c.validate();
  CategoricalDistribution out;
  out.outcomes = c.per_variant.front().outcomes;
  out.probs.assign(out.outcomes.size(), 0.0);
  for (size_t i = 0; i < c.per_variant.size(); ++i) {
    for (size_t j = 0; j < out.probs.size(); ++j) {
      out.probs[j] += c.weights[i] * c.per_variant[i].probs[j];
    }
  }
  out.validate();
  return out;
}

CategoricalDistribution smooth(const CategoricalDistribution& d, double alpha) {
  d.validate();
  if (alpha < 0.0) throw ValidationError("smoothing alpha must be >= 0");
  if (alpha == 0.0) return d;
  CategoricalDistribution out;
  out.outcomes = d.outcomes;
  const double denom = 1.0 + alpha * static_cast<double>(d.size());
  out.probs.reserve(d.size());
  for (double p : d.probs) out.probs.push_back((p + alpha) / denom);
  out.validate();
  return out;
}

double kl(const CategoricalDistribution& p, const CategoricalDistribution& q, double log_base) {
  p.validate();
  q.validate();
  check_same_outcomes(p, q);
  check_log_base(log_base);
  double sum = 0.0;
  for (size_t i = 0; i < p.probs.size(); ++i) {
    const double pi = p.probs[i];
    if (pi == 0.0) continue;
    const double qi = q.probs[i];
    if (qi == 0.0) {
      throw DivergenceError("kl undefined: outcome '" + p.outcomes[i] +
                            "' has zero q mass but positive p mass (enable smoothing)");
    }
    sum += pi * std::log(pi / qi);
  }
  return sum / std::log(log_base);
}

double symmetric_kl(const CategoricalDistribution& p, const CategoricalDistribution& q,
                    double log_base) {
  return kl(p, q, log_base) + kl(q, p, log_base);
}

double tv(const CategoricalDistribution& p, const CategoricalDistribution& q) {
  p.validate();
  q.validate();
  check_same_outcomes(p, q);
  double sum = 0.0;
  for (size_t i = 0; i < p.probs.size(); ++i) sum += std::abs(p.probs[i] - q.probs[i]);
  return 0.5 * sum;
}

double jsd(const CategoricalDistribution& p, const CategoricalDistribution& q, double log_base) {
  p.validate();
  q.validate();
  check_same_outcomes(p, q);
  check_log_base(log_base);
  double sum = 0.0;
  for (size_t i = 0; i < p.probs.size(); ++i) {
    const double pi = p.probs[i];
    const double qi = q.probs[i];
    const double mi = 0.5 * (pi + qi);
    if (pi > 0.0) sum += 0.5 * pi * std::log(pi / mi);
    if (qi > 0.0) sum += 0.5 * qi * std::log(qi / mi);
  }
  return sum / std::log(log_base);
}

double divergence(Metric m, const CategoricalDistribution& p, const CategoricalDistribution& q,
                  double log_base) {
  switch (m) {
    case Metric::kl: return kl(p, q, log_base);
    case Metric::sym_kl: return symmetric_kl(p, q, log_base);
    case Metric::tv: return tv(p, q);
    case Metric::jsd: return jsd(p, q, log_base);
  }
  throw ValidationError("unknown metric");
}

DivergenceMatrix divergence_matrix(
    const std::vector<std::pair<std::string, CategoricalDistribution>>& group_dists,
    Metric metric, double log_base, double alpha) {
  if (group_dists.size() < 2) {
    throw ValidationError("divergence matrix needs >= 2 groups, got " +
                          std::to_string(group_dists.size()));
  }
  check_log_base(log_base);
  const size_t k = group_dists.size();

  // KL-family metrics run on smoothed distributions; TV and JSD stay raw.
  const bool kl_family = (metric == Metric::kl || metric == Metric::sym_kl);
  std::vector<CategoricalDistribution> dists;
  dists.reserve(k);
  for (const auto& [id, d] : group_dists) {
    d.validate();
    if (!d.same_outcomes(group_dists.front().second)) {
      throw ValidationError("group '" + id + "' has a mismatched outcome set");
    }
    dists.push_back(kl_family ? smooth(d, alpha) : d);
  }

  DivergenceMatrix m;
  m.metric = metric;
  m.log_base = log_base;
  m.values.assign(k, std::vector<double>(k, 0.0));
  for (const auto& [id, d] : group_dists) m.group_ids.push_back(id);

  for (size_t i = 0; i < k; ++i) {
    for (size_t j = (metric_is_symmetric(metric) ? i + 1 : 0); j < k; ++j) {
      if (i == j) continue;
      const double v = divergence(metric, dists[i], dists[j], log_base);
      m.values[i][j] = v;
      if (metric_is_symmetric(metric)) m.values[j][i] = v;
    }
  }
  m.validate();
  return m;
}

DivergenceMatrix average_matrices(const std::vector<DivergenceMatrix>& ms) {
  if (ms.empty()) throw ValidationError("cannot average an empty matrix list");
  const DivergenceMatrix& first = ms.front();
  for (const auto& m : ms) {
    m.validate();
    if (m.group_ids != first.group_ids || m.metric != first.metric ||
        m.log_base != first.log_base) {
      throw ValidationError("cannot average heterogeneous matrices");
    }
  }
  DivergenceMatrix out = first;
  const size_t k = first.group_ids.size();
  const double n = static_cast<double>(ms.size());
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = 0; j < k; ++j) {
      double sum = 0.0;
      for (const auto& m : ms) sum += m.values[i][j];
      out.values[i][j] = sum / n;
    }
  }
  out.validate();
  return out;
}

}  // namespace audit::metrics
