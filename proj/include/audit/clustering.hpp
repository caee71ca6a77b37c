#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "audit/metrics.hpp"

namespace audit::clustering {

struct EmbeddingVector {
  std::vector<double> values;
  std::string source_response_id;
};

// Fitted k-means state: centroids plus the assignment of every input
// response id. Deterministic given (point order, k, n_init, seed).
struct ClusterModel {
  int k = 0;
  std::vector<std::vector<double>> centroids;
  std::map<std::string, int> assignments;
  double inertia = 0.0;
  uint64_t seed = 0;
  int n_init = 1;
};

// Scales to unit Euclidean norm. Zero vectors are a validation error.
EmbeddingVector l2_normalize(const EmbeddingVector& v);

// Best of n_init k-means++ initializations followed by Lloyd iterations
// (assignment fixpoint, centroid movement < 1e-9, or 300 iterations).
// Restart r draws its RNG stream from mix_seed(seed, r), so best-of-n is a
// prefix-stable refinement of best-of-1. Empty clusters are re-seeded to the
// point farthest from its assigned centroid.
ClusterModel kmeans_fit(const std::vector<EmbeddingVector>& points, int k, int n_init,
                        uint64_t seed);

// Index of the nearest centroid; ties break toward the smallest index.
int assign(const ClusterModel& model, const EmbeddingVector& v);

// Per-group empirical frequency over cluster ids c0..c{k-1}. Every group in
// group_of must receive at least one response.
std::map<std::string, metrics::CategoricalDistribution> group_cluster_distribution(
    const std::map<std::string, int>& assignments,
    const std::map<std::string, std::string>& group_of, int k);

// Outcome names used by group_cluster_distribution ("c0".."c{k-1}").
std::vector<std::string> cluster_outcomes(int k);

// One fit + one divergence matrix per seed, averaged. group_order fixes the
// matrix row order; empty means sorted group ids.
metrics::DivergenceMatrix clustered_divergence_run(
    const std::vector<EmbeddingVector>& embeddings,
    const std::map<std::string, std::string>& group_of, int k, int n_init,
    const std::vector<uint64_t>& seeds, metrics::Metric metric, double log_base, double alpha,
    const std::vector<std::string>& group_order = {});

}  // namespace audit::clustering
