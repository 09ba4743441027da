#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fang/numcore.hpp"

namespace fang {

using Labels = std::vector<Index>;

struct PcaResult {
  Matrix projected;  // r×T
  Matrix basis;      // d×r, orthonormal columns
  Vector mean;       // d
  Vector eigenvalues;  // top r of the covariance, descending
  double total_variance = 0.0;
  double captured_variance = 0.0;
};

// Projects the centered columns of x (d×T) onto the top-r principal axes of
// the covariance (1/T)·Xc·Xcᵀ.
PcaResult pca_reduce(const Matrix& x, Index r);

struct ContextClusters {
  Labels labels;
  Matrix centroids;  // K×r, in the clustered space
  std::vector<Index> counts;
  Vector objective_trace;  // within-cluster sum of squares, one entry per assignment pass
  Index iterations = 0;
};

inline constexpr Index kKmeansMaxIterations = 100;
inline constexpr double kKmeansTolerance = 1e-4;

// k-means++ seeding then Lloyd iterations over the columns of xr (r×T).
// Empty clusters are reseeded with the point farthest from its centroid.
ContextClusters kmeans(const Matrix& xr, Index k, std::uint64_t seed);

// Per-cluster column means of data (n×T) -> K×n. Empty clusters give zero rows.
Matrix cluster_means(const Matrix& data, const Labels& labels, Index k);
std::vector<Index> cluster_counts(const Labels& labels, Index k);

// S[k][j] = mean over tokens of cluster k of |h_{j,t}·G_{j,t}|; hidden and grad
// are N_n×T.
Matrix score_matrix(const Matrix& hidden, const Matrix& grad, const Labels& labels, Index k);

// Top-m neurons per cluster; multiply-selected neurons ranked by selection
// frequency, then by total score, then by index; the remaining slots are
// filled by total score. Result sorted ascending.
IndexList select_shared_group(const Matrix& s, Index m);

enum class AssignSolver { kExact, kGreedy };

// Partitions the neurons outside `shared` into k groups of m maximizing
// Σ_k Σ_{j∈G_k} S[k][j]. kExact solves the capacity-expanded assignment
// problem with the Hungarian method; kGreedy takes pairs by descending score.
std::vector<IndexList> assign_groups(const Matrix& s, const IndexList& shared, Index k, Index m,
                                     AssignSolver solver = AssignSolver::kExact);

// D[a][b] = ‖mean_h(C_a) - mean_h(C_b)‖₂. Throws InputError on an empty cluster.
Matrix centroid_distance_matrix(const Matrix& hidden, const Labels& labels, Index k);

enum class ReweightMode { kOurs, kReverse, kUniform, kOnlyMatched };

ReweightMode reweight_mode_from_string(std::string_view name);
std::string to_string(ReweightMode mode);

// Row k: softmax(-D[k]/tau) (ours), softmax(+D[k]/tau) (reverse), 1/K
// (uniform) or one-hot at k (only_matched).
Matrix alpha_weights(const Matrix& d, double tau, ReweightMode mode);

struct NeuronGrouping {
  std::vector<IndexList> groups;  // K functional groups, each sorted
  IndexList shared;               // exempt from pruning, sorted
  Matrix alpha;                   // K×K
  Matrix distances;               // K×K
};

// Seeded balanced partition into k+1 sets of n/(k+1) neurons; one set chosen
// at random becomes the shared group and absorbs the remainder.
NeuronGrouping random_grouping(Index n, Index k, std::uint64_t seed);

// Throws InputError unless groups ∪ shared is a partition of [0, n).
void check_partition(const NeuronGrouping& grouping, Index n);

nlohmann::json to_json(const NeuronGrouping& grouping);

}  // namespace fang
