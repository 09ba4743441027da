#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>

#include "fang/errors.hpp"
#include "fang/grouping.hpp"
#include "testing.hpp"

using namespace fang;
using namespace fang::testing;

namespace {

Labels random_labels(Index t, Index k, std::mt19937_64& rng) {
  Labels l(t);
  for (Index i = 0; i < t; ++i) l[i] = i < k ? i : rng() % k;  // every cluster non-empty
  return l;
}

double objective(const Matrix& s, const std::vector<IndexList>& groups) {
  double total = 0.0;
  for (Index k = 0; k < groups.size(); ++k)
    for (Index j : groups[k]) total += s(k, j);
  return total;
}

// Best Σ S[k][j] over all balanced partitions of `free` into k groups of m.
double exhaustive_best(const Matrix& s, const IndexList& free, Index k, Index m) {
  std::vector<Index> fill(k, 0);
  double best = -INFINITY;
  std::function<void(Index, double)> rec = [&](Index pos, double acc) {
    if (pos == free.size()) {
      best = std::max(best, acc);
      return;
    }
    for (Index g = 0; g < k; ++g) {
      if (fill[g] == m) continue;
      ++fill[g];
      rec(pos + 1, acc + s(g, free[pos]));
      --fill[g];
    }
  };
  rec(0, 0.0);
  return best;
}

// Direct transcription of the shared-group selection rule.
IndexList shared_oracle(const Matrix& s, Index m) {
  const Index k = s.rows(), n = s.cols();
  std::vector<Index> freq(n, 0);
  Vector total(n, 0.0);
  for (Index c = 0; c < k; ++c) {
    IndexList order(n);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return s(c, a) > s(c, b); });
    for (Index i = 0; i < m; ++i) ++freq[order[i]];
    for (Index j = 0; j < n; ++j) total[j] += s(c, j);
  }
  IndexList multi, rest;
  for (Index j = 0; j < n; ++j) (freq[j] >= 2 ? multi : rest).push_back(j);
  auto better = [&](Index a, Index b) {
    if (freq[a] != freq[b]) return freq[a] > freq[b];
    if (total[a] != total[b]) return total[a] > total[b];
    return a < b;
  };
  std::sort(multi.begin(), multi.end(), better);
  IndexList out(multi.begin(), multi.begin() + std::min(m, multi.size()));
  std::sort(rest.begin(), rest.end(), [&](Index a, Index b) {
    if (total[a] != total[b]) return total[a] > total[b];
    return a < b;
  });
  for (Index i = 0; out.size() < m; ++i) out.push_back(rest[i]);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Pca, ExactSubspaceReconstructs) {
  std::mt19937_64 rng(1);
  Matrix x(5, 40);
  for (Index t = 0; t < 40; ++t) {
    x(0, t) = std::normal_distribution<double>(0, 2)(rng);
    x(1, t) = std::normal_distribution<double>(0, 1)(rng);
  }
  const PcaResult p = pca_reduce(x, 2);
  // Reconstruct: mean + basis · projected.
  for (Index i = 0; i < 5; ++i)
    for (Index t = 0; t < 40; ++t) {
      double v = p.mean[i];
      for (Index r = 0; r < 2; ++r) v += p.basis(i, r) * p.projected(r, t);
      EXPECT_NEAR(v, x(i, t), 1e-10);
    }
  const Matrix gram = naive_matmul(naive_transpose(p.basis), p.basis);
  EXPECT_LE(max_abs_diff(gram, Matrix::identity(2)), 1e-10);
}

TEST(Pca, CollinearCapturesAllVariance) {
  Matrix x(2, 10);
  for (Index t = 0; t < 10; ++t) {
    x(0, t) = static_cast<double>(t);
    x(1, t) = 2.0 * static_cast<double>(t) + 1.0;
  }
  const PcaResult p = pca_reduce(x, 1);
  EXPECT_NEAR(p.captured_variance / p.total_variance, 1.0, 1e-12);
}

TEST(Pca, CapturedVarianceMatchesFullDecomposition) {
  std::mt19937_64 rng(2);
  const Matrix x = random_matrix(8, 30, rng);
  const PcaResult p = pca_reduce(x, 3);
  // Covariance built by loops; eigenvalues by Jacobi rotations.
  Matrix c(8, 8);
  Vector mean(8, 0.0);
  for (Index i = 0; i < 8; ++i) {
    for (Index t = 0; t < 30; ++t) mean[i] += x(i, t);
    mean[i] /= 30.0;
  }
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) {
      for (Index t = 0; t < 30; ++t) c(i, j) += (x(i, t) - mean[i]) * (x(j, t) - mean[j]);
      c(i, j) /= 30.0;
    }
  Matrix a = c;
  for (int sweep = 0; sweep < 100; ++sweep) {
    for (Index p_ = 0; p_ < 8; ++p_)
      for (Index q = p_ + 1; q < 8; ++q) {
        if (std::abs(a(p_, q)) < 1e-300) continue;
        const double theta = 0.5 * std::atan2(2 * a(p_, q), a(q, q) - a(p_, p_));
        const double cs = std::cos(theta), sn = std::sin(theta);
        for (Index k = 0; k < 8; ++k) {
          const double akp = a(k, p_), akq = a(k, q);
          a(k, p_) = cs * akp - sn * akq;
          a(k, q) = sn * akp + cs * akq;
        }
        for (Index k = 0; k < 8; ++k) {
          const double apk = a(p_, k), aqk = a(q, k);
          a(p_, k) = cs * apk - sn * aqk;
          a(q, k) = sn * apk + cs * aqk;
        }
      }
  }
  Vector eig(8);
  for (Index i = 0; i < 8; ++i) eig[i] = a(i, i);
  std::sort(eig.rbegin(), eig.rend());
  const double top3 = eig[0] + eig[1] + eig[2];
  EXPECT_NEAR(p.captured_variance / top3, 1.0, 1e-8);
  EXPECT_THROW(pca_reduce(x, 9), DimensionError);
}

TEST(Kmeans, SingleClusterIsMean) {
  std::mt19937_64 rng(3);
  const Matrix x = random_matrix(3, 25, rng);
  const ContextClusters c = kmeans(x, 1, 0);
  for (Index i = 0; i < 3; ++i) {
    double m = 0.0;
    for (Index t = 0; t < 25; ++t) m += x(i, t);
    EXPECT_NEAR(c.centroids(0, i), m / 25.0, 1e-12);
  }
}

TEST(Kmeans, RecoversPlantedClusters) {
  std::mt19937_64 rng(4);
  Matrix x(2, 60);
  Labels truth(60);
  for (Index t = 0; t < 60; ++t) {
    truth[t] = t % 2;
    const double cx = truth[t] ? 100.0 : -100.0;
    x(0, t) = cx + std::normal_distribution<double>(0, 1)(rng);
    x(1, t) = std::normal_distribution<double>(0, 1)(rng);
  }
  const ContextClusters c = kmeans(x, 2, 9);
  for (Index t = 0; t < 60; ++t) EXPECT_EQ(c.labels[t] == c.labels[0], truth[t] == truth[0]);
}

TEST(Kmeans, DeterministicMonotoneAndNoEmptyClusters) {
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(4, 200, rng);
  const ContextClusters a = kmeans(x, 7, 11), b = kmeans(x, 7, 11);
  EXPECT_EQ(a.labels, b.labels);
  for (Index i = 1; i < a.objective_trace.size(); ++i)
    EXPECT_LE(a.objective_trace[i], a.objective_trace[i - 1] * (1 + 1e-12));
  Index total = 0;
  for (Index n : a.counts) {
    EXPECT_GT(n, 0u);
    total += n;
  }
  EXPECT_EQ(total, 200u);
  EXPECT_THROW(kmeans(random_matrix(2, 3, rng), 4, 0), InputError);
}

TEST(Kmeans, DuplicatePointsStillFillEveryCluster) {
  Matrix x(1, 10);
  for (Index t = 0; t < 10; ++t) x(0, t) = t < 8 ? 0.0 : 1.0;
  const ContextClusters c = kmeans(x, 3, 0);
  for (Index n : c.counts) EXPECT_GT(n, 0u);
}

TEST(ScoreMatrix, ZeroGradAndUnitCases) {
  std::mt19937_64 rng(6);
  const Matrix h = random_matrix(5, 9, rng);
  const Labels labels = random_labels(9, 3, rng);
  EXPECT_EQ(max_abs(score_matrix(h, Matrix(5, 9), labels, 3)), 0.0);
  const Matrix ones(4, 3, 1.0);
  const Matrix s = score_matrix(ones, ones, Labels{0, 1, 2}, 3);
  for (double v : s.data()) EXPECT_EQ(v, 1.0);
}

TEST(ScoreMatrix, MatchesPerTokenLoop) {
  std::mt19937_64 rng(7);
  const Matrix h = random_matrix(5, 30, rng), g = random_matrix(5, 30, rng);
  const Labels labels = random_labels(30, 3, rng);
  const Matrix s = score_matrix(h, g, labels, 3);
  for (Index k = 0; k < 3; ++k)
    for (Index j = 0; j < 5; ++j) {
      double sum = 0.0;
      Index n = 0;
      for (Index t = 0; t < 30; ++t) {
        if (labels[t] != k) continue;
        sum += std::abs(h(j, t) * g(j, t));
        ++n;
      }
      EXPECT_NEAR(s(k, j), sum / static_cast<double>(n), 1e-15);
    }
}

TEST(ScoreMatrix, ScalingByConstantScalesScoresAndKeepsSelections) {
  std::mt19937_64 rng(8);
  const Matrix h = random_matrix(16, 40, rng), g = random_matrix(16, 40, rng);
  const Labels labels = random_labels(40, 3, rng);
  const Matrix s1 = score_matrix(h, g, labels, 3);
  const Matrix s2 = score_matrix(scale(h, 2.0), scale(g, 2.0), labels, 3);
  EXPECT_LE(max_abs_diff(s2, scale(s1, 4.0)), 1e-12);
  const IndexList sh1 = select_shared_group(s1, 4), sh2 = select_shared_group(s2, 4);
  EXPECT_EQ(sh1, sh2);
  EXPECT_EQ(assign_groups(s1, sh1, 3, 4), assign_groups(s2, sh2, 3, 4));
}

TEST(SharedGroup, DuplicatedRowsPickTopByScore) {
  const Matrix s = Matrix::from_rows({{5, 1, 4, 2, 3}, {5, 1, 4, 2, 3}});
  EXPECT_EQ(select_shared_group(s, 2), (IndexList{0, 2}));
}

TEST(SharedGroup, DisjointTopSetsFillByTotal) {
  const Matrix s = Matrix::from_rows({{9, 8, 0, 0, 1}, {0, 0, 7, 6, 1}});
  // No neuron is in both top-2 sets; totals are 9, 8, 7, 6, 2.
  EXPECT_EQ(select_shared_group(s, 2), (IndexList{0, 1}));
  EXPECT_THROW(select_shared_group(s, 6), InputError);
}

TEST(SharedGroup, MatchesProcedureOracle) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix s = random_matrix(3, 10, rng);
    for (double& v : s.data()) v = std::abs(v);
    if (trial % 4 == 0)
      for (double& v : s.data()) v = std::round(v * 2.0);  // ties
    EXPECT_EQ(select_shared_group(s, 4), shared_oracle(s, 4)) << "trial " << trial;
  }
}

TEST(AssignGroups, SeparableOptimum) {
  const Index k = 3, n = 12;
  Matrix s(k, n);
  for (Index j = 0; j < n; ++j) s(j % k, j) = 1.0;
  const auto groups = assign_groups(s, {}, k, 4);
  for (Index g = 0; g < k; ++g)
    for (Index j : groups[g]) EXPECT_EQ(j % k, g);
}

TEST(AssignGroups, AllEqualScores) {
  const Matrix s(3, 9, 2.5);
  const auto groups = assign_groups(s, IndexList{0, 4, 8}, 3, 2);
  EXPECT_DOUBLE_EQ(objective(s, groups), 2.0 * (2.5 * 3));
}

TEST(AssignGroups, MatchesExhaustiveSearch) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix s = random_matrix(3, 9, rng);
    for (double& v : s.data()) v = std::abs(v);
    const IndexList shared = select_shared_group(s, 3);
    IndexList free;
    for (Index j = 0; j < 9; ++j)
      if (!std::binary_search(shared.begin(), shared.end(), j)) free.push_back(j);
    const auto groups = assign_groups(s, shared, 3, 2);
    EXPECT_NEAR(objective(s, groups), exhaustive_best(s, free, 3, 2), 1e-12);
  }
}

TEST(AssignGroups, GreedyIsBalancedButNotBetter) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix s = random_matrix(4, 12, rng);
    for (double& v : s.data()) v = std::abs(v);
    const auto exact = assign_groups(s, {}, 4, 3, AssignSolver::kExact);
    const auto greedy = assign_groups(s, {}, 4, 3, AssignSolver::kGreedy);
    for (const auto& g : greedy) EXPECT_EQ(g.size(), 3u);
    EXPECT_LE(objective(s, greedy), objective(s, exact) + 1e-12);
  }
}

TEST(AssignGroups, InfeasibleSizesAreConfigErrors) {
  const Matrix s(2, 7, 1.0);
  EXPECT_THROW(assign_groups(s, IndexList{0}, 2, 2), ConfigError);
}

TEST(CentroidDistance, AxisCaseAndLoopOracle) {
  EXPECT_EQ(centroid_distance_matrix(Matrix(3, 4, 1.0), Labels(4, 0), 1), Matrix(1, 1));
  Matrix h(3, 2);
  h(0, 0) = 1.0;
  h(0, 1) = 2.0;
  const Matrix d = centroid_distance_matrix(h, Labels{0, 1}, 2);
  EXPECT_DOUBLE_EQ(d(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(d(1, 0), 1.0);

  std::mt19937_64 rng(12);
  const Matrix hr = random_matrix(6, 40, rng);
  const Labels labels = random_labels(40, 4, rng);
  const Matrix dr = centroid_distance_matrix(hr, labels, 4);
  Matrix means(4, 6);
  std::vector<double> n(4, 0.0);
  for (Index t = 0; t < 40; ++t) {
    n[labels[t]] += 1.0;
    for (Index j = 0; j < 6; ++j) means(labels[t], j) += hr(j, t);
  }
  for (Index a = 0; a < 4; ++a)
    for (Index b = 0; b < 4; ++b) {
      double sq = 0.0;
      for (Index j = 0; j < 6; ++j) {
        const double diff = means(a, j) / n[a] - means(b, j) / n[b];
        sq += diff * diff;
      }
      EXPECT_NEAR(dr(a, b), std::sqrt(sq), 1e-12);
    }
  EXPECT_THROW(centroid_distance_matrix(hr, Labels(40, 0), 2), InputError);
}

TEST(Alpha, ZeroDistancesGiveUniformRows) {
  const Matrix a = alpha_weights(Matrix(4, 4), 3.0, ReweightMode::kOurs);
  for (double v : a.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Alpha, ClosedFormSoftmax) {
  Matrix d(2, 2);
  d(0, 1) = d(1, 0) = std::log(3.0);
  const Matrix a = alpha_weights(d, 1.0, ReweightMode::kOurs);
  EXPECT_NEAR(a(0, 0), 0.75, 1e-15);
  EXPECT_NEAR(a(0, 1), 0.25, 1e-15);
  const Matrix r = alpha_weights(d, 1.0, ReweightMode::kReverse);
  EXPECT_NEAR(r(0, 0), 0.25, 1e-15);
}

TEST(Alpha, ModesRowsAndLimits) {
  std::mt19937_64 rng(13);
  const Matrix h = random_matrix(5, 50, rng);
  const Matrix d = centroid_distance_matrix(h, random_labels(50, 7, rng), 7);
  for (auto mode : {ReweightMode::kOurs, ReweightMode::kReverse, ReweightMode::kUniform,
                    ReweightMode::kOnlyMatched}) {
    const Matrix a = alpha_weights(d, 9.0, mode);
    for (Index k = 0; k < 7; ++k) {
      double s = 0.0;
      for (Index j = 0; j < 7; ++j) {
        EXPECT_GE(a(k, j), 0.0);
        s += a(k, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  const Matrix ours = alpha_weights(d, 9.0, ReweightMode::kOurs);
  for (Index k = 0; k < 7; ++k)
    for (Index a = 0; a < 7; ++a)
      for (Index b = 0; b < 7; ++b)
        if (d(k, a) <= d(k, b)) EXPECT_GE(ours(k, a), ours(k, b));
  EXPECT_EQ(alpha_weights(d, 1.0, ReweightMode::kOnlyMatched), Matrix::identity(7));
  const Matrix wide = alpha_weights(d, 1e9, ReweightMode::kOurs);
  for (double v : wide.data()) EXPECT_NEAR(v, 1.0 / 7.0, 1e-6);
  EXPECT_THROW(alpha_weights(d, 0.0, ReweightMode::kOurs), ParameterError);
  EXPECT_THROW(alpha_weights(d, -1.0, ReweightMode::kReverse), ParameterError);
  EXPECT_NO_THROW(alpha_weights(d, 0.0, ReweightMode::kUniform));
}

TEST(RandomGrouping, BalancedDeterministicPartition) {
  const NeuronGrouping a = random_grouping(50, 7, 3), b = random_grouping(50, 7, 3);
  EXPECT_EQ(a.groups, b.groups);
  EXPECT_EQ(a.shared, b.shared);
  for (const auto& g : a.groups) EXPECT_EQ(g.size(), 6u);
  EXPECT_EQ(a.shared.size(), 8u);
  EXPECT_NO_THROW(check_partition(a, 50));
}

TEST(RandomGrouping, SharedMembershipIsUniform) {
  const Index n = 48, k = 7, seeds = 500;
  std::vector<double> hits(n, 0.0);
  for (Index s = 0; s < seeds; ++s)
    for (Index j : random_grouping(n, k, s).shared) hits[j] += 1.0;
  const double p = 1.0 / static_cast<double>(k + 1);
  const double sigma = std::sqrt(seeds * p * (1 - p));
  for (double h : hits) EXPECT_LE(std::abs(h - seeds * p), 3.0 * sigma + 1.0);
}

TEST(CheckPartition, DetectsOverlapAndGaps) {
  NeuronGrouping g;
  g.groups = {{0, 1}, {2, 3}};
  g.shared = {4};
  EXPECT_NO_THROW(check_partition(g, 5));
  g.shared = {3};
  EXPECT_THROW(check_partition(g, 5), InputError);
}
