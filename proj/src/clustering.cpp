#include "audit/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "audit/errors.hpp"
#include "audit/util.hpp"

namespace audit::clustering {

namespace {

constexpr int kMaxIterations = 300;
constexpr double kMoveTol = 1e-9;

double dist2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

int nearest_centroid(const std::vector<std::vector<double>>& centroids,
                     const std::vector<double>& p) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t c = 0; c < centroids.size(); ++c) {
    const double d = dist2(centroids[c], p);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

// k-means++ seeding from a deterministic word stream.
std::vector<std::vector<double>> kmeanspp_init(const std::vector<std::vector<double>>& pts, int k,
                                               uint64_t& rng_state) {
  const size_t n = pts.size();
  std::vector<std::vector<double>> centroids;
  centroids.reserve(static_cast<size_t>(k));
  const size_t first = static_cast<size_t>(util::splitmix64(rng_state) % n);
  centroids.push_back(pts[first]);

  std::vector<double> d2(n);
  for (size_t i = 0; i < n; ++i) d2[i] = dist2(pts[i], centroids[0]);

  while (centroids.size() < static_cast<size_t>(k)) {
    double total = 0.0;
    for (double d : d2) total += d;
    size_t pick;
    if (total <= 0.0) {
      // All remaining points coincide with chosen centroids.
      pick = static_cast<size_t>(util::splitmix64(rng_state) % n);
    } else {
      const double r = util::unit_double(util::splitmix64(rng_state)) * total;
      double cum = 0.0;
      pick = n - 1;
      for (size_t i = 0; i < n; ++i) {
        cum += d2[i];
        if (r < cum) {
          pick = i;
          break;
        }
      }
    }
    centroids.push_back(pts[pick]);
    for (size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], dist2(pts[i], centroids.back()));
  }
  return centroids;
}

struct LloydResult {
  std::vector<std::vector<double>> centroids;
  std::vector<int> assignments;
  double inertia = 0.0;
};

LloydResult lloyd(const std::vector<std::vector<double>>& pts,
                  std::vector<std::vector<double>> centroids) {
  const size_t n = pts.size();
  const size_t k = centroids.size();
  const size_t dim = pts[0].size();

  std::vector<int> assignments(n);
  for (size_t i = 0; i < n; ++i) assignments[i] = nearest_centroid(centroids, pts[i]);

  for (int iter = 0; iter < kMaxIterations; ++iter) {
    // Update step.
    std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
    std::vector<size_t> counts(k, 0);
    for (size_t i = 0; i < n; ++i) {
      const int c = assignments[i];
      ++counts[static_cast<size_t>(c)];
      for (size_t d = 0; d < dim; ++d) next[static_cast<size_t>(c)][d] += pts[i][d];
    }
    for (size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (size_t d = 0; d < dim; ++d) next[c][d] /= static_cast<double>(counts[c]);
    }

    // Re-seed each empty cluster to the point farthest from its assigned
    // centroid, stealing that point so a later empty cluster picks another.
    for (size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      double worst = -1.0;
      size_t worst_i = 0;
      for (size_t i = 0; i < n; ++i) {
        const size_t ac = static_cast<size_t>(assignments[i]);
        if (counts[ac] <= 1) continue;  // do not empty another cluster
        const double d = dist2(pts[i], next[ac]);
        if (d > worst) {
          worst = d;
          worst_i = i;
        }
      }
      if (worst < 0.0) continue;  // all clusters singletons; leave empty
      const size_t donor = static_cast<size_t>(assignments[worst_i]);
      --counts[donor];
      ++counts[c];
      assignments[worst_i] = static_cast<int>(c);
      next[c] = pts[worst_i];
    }

    double move2 = 0.0;
    for (size_t c = 0; c < k; ++c) move2 = std::max(move2, dist2(centroids[c], next[c]));
    centroids = std::move(next);

    std::vector<int> reassigned(n);
    bool changed = false;
    for (size_t i = 0; i < n; ++i) {
      reassigned[i] = nearest_centroid(centroids, pts[i]);
      changed |= (reassigned[i] != assignments[i]);
    }
    assignments = std::move(reassigned);
    if (!changed || move2 < kMoveTol * kMoveTol) break;
  }

  LloydResult r;
  r.inertia = 0.0;
  for (size_t i = 0; i < n; ++i) {
    r.inertia += dist2(pts[i], centroids[static_cast<size_t>(assignments[i])]);
  }
  r.centroids = std::move(centroids);
  r.assignments = std::move(assignments);
  return r;
}

}  // namespace

EmbeddingVector l2_normalize(const EmbeddingVector& v) {
  double n2 = 0.0;
  for (double x : v.values) n2 += x * x;
  const double norm = std::sqrt(n2);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw ValidationError("cannot l2-normalize zero or non-finite vector (response '" +
                          v.source_response_id + "')");
  }
  EmbeddingVector out = v;
  for (double& x : out.values) x /= norm;
  return out;
}

ClusterModel kmeans_fit(const std::vector<EmbeddingVector>& points, int k, int n_init,
                        uint64_t seed) {
  if (k < 1) throw ValidationError("k must be >= 1");
  if (n_init < 1) throw ValidationError("n_init must be >= 1");
  if (points.size() < static_cast<size_t>(k)) {
    throw ValidationError("k-means needs at least k points: have " +
                          std::to_string(points.size()) + ", k=" + std::to_string(k));
  }
  const size_t dim = points.front().values.size();
  if (dim == 0) throw ValidationError("zero-dimensional embedding");
  std::set<std::string> ids;
  std::vector<std::vector<double>> pts;
  pts.reserve(points.size());
  for (const auto& p : points) {
    if (p.values.size() != dim) {
      throw ValidationError("embedding dimension mismatch for response '" +
                            p.source_response_id + "'");
    }
    if (p.source_response_id.empty() || !ids.insert(p.source_response_id).second) {
      throw ValidationError("embedding response ids must be unique and non-empty");
    }
    pts.push_back(p.values);
  }

  LloydResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int restart = 0; restart < n_init; ++restart) {
    uint64_t rng = util::mix_seed(seed, static_cast<uint64_t>(restart));
    LloydResult r = lloyd(pts, kmeanspp_init(pts, k, rng));
    if (r.inertia < best.inertia) best = std::move(r);
  }

  ClusterModel model;
  model.k = k;
  model.centroids = std::move(best.centroids);
  model.inertia = best.inertia;
  model.seed = seed;
  model.n_init = n_init;
  for (size_t i = 0; i < points.size(); ++i) {
    model.assignments[points[i].source_response_id] = best.assignments[i];
  }
  return model;
}

int assign(const ClusterModel& model, const EmbeddingVector& v) {
  if (model.centroids.empty()) throw ValidationError("unfitted cluster model");
  if (v.values.size() != model.centroids.front().size()) {
    throw ValidationError("embedding dimension does not match cluster model");
  }
  return nearest_centroid(model.centroids, v.values);
}

std::vector<std::string> cluster_outcomes(int k) {
  std::vector<std::string> names;
  names.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) names.push_back("c" + std::to_string(i));
  return names;
}

std::map<std::string, metrics::CategoricalDistribution> group_cluster_distribution(
    const std::map<std::string, int>& assignments,
    const std::map<std::string, std::string>& group_of, int k) {
  if (k < 1) throw ValidationError("k must be >= 1");
  std::map<std::string, std::vector<double>> counts;
  for (const auto& [id, group] : group_of) counts[group].assign(static_cast<size_t>(k), 0.0);

  for (const auto& [id, cluster] : assignments) {
    auto it = group_of.find(id);
    if (it == group_of.end()) {
      throw ValidationError("response '" + id + "' has no subgroup");
    }
    if (cluster < 0 || cluster >= k) {
      throw ValidationError("cluster index out of range for response '" + id + "'");
    }
    counts[it->second][static_cast<size_t>(cluster)] += 1.0;
  }

  const auto outcomes = cluster_outcomes(k);
  std::map<std::string, metrics::CategoricalDistribution> result;
  for (const auto& [group, c] : counts) {
    double total = 0.0;
    for (double x : c) total += x;
    if (total <= 0.0) throw ValidationError("subgroup '" + group + "' has no responses");
    result.emplace(group, metrics::CategoricalDistribution::from_counts(outcomes, c));
  }
  return result;
}

metrics::DivergenceMatrix clustered_divergence_run(
    const std::vector<EmbeddingVector>& embeddings,
    const std::map<std::string, std::string>& group_of, int k, int n_init,
    const std::vector<uint64_t>& seeds, metrics::Metric metric, double log_base, double alpha,
    const std::vector<std::string>& group_order) {
  if (seeds.empty()) throw ValidationError("clustered divergence run needs >= 1 seed");

  std::vector<metrics::DivergenceMatrix> per_seed;
  per_seed.reserve(seeds.size());
  for (uint64_t seed : seeds) {
    ClusterModel model = kmeans_fit(embeddings, k, n_init, seed);
    auto dists = group_cluster_distribution(model.assignments, group_of, k);

    std::vector<std::string> order = group_order;
    if (order.empty()) {
      for (const auto& [g, d] : dists) order.push_back(g);
    }
    std::vector<std::pair<std::string, metrics::CategoricalDistribution>> ordered;
    ordered.reserve(order.size());
    for (const auto& g : order) {
      auto it = dists.find(g);
      if (it == dists.end()) throw ValidationError("group '" + g + "' has no responses");
      ordered.emplace_back(g, it->second);
    }
    per_seed.push_back(metrics::divergence_matrix(ordered, metric, log_base, alpha));
  }
  return metrics::average_matrices(per_seed);
}

}  // namespace audit::clustering
