#include "fang/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "fang/errors.hpp"

namespace fang {

namespace {

double squared_distance(const Matrix& points, Index t, const Matrix& centroids, Index k) {
  double s = 0.0;
  for (Index i = 0; i < points.cols(); ++i) {
    const double diff = points(t, i) - centroids(k, i);
    s += diff * diff;
  }
  return s;
}

// Exact minimum-cost perfect assignment of n rows to n columns.
std::vector<Index> hungarian(const Matrix& cost) {
  const Index n = cost.rows();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Vector u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<Index> p(n + 1, 0), way(n + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    Vector minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const Index i0 = p[j0];
      double delta = kInf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> row_to_col(n);
  for (Index j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Indices sorted by descending key, ties by ascending index.
IndexList rank_descending(const Vector& key) {
  IndexList order(key.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return key[a] > key[b]; });
  return order;
}

}  // namespace

PcaResult pca_reduce(const Matrix& x, Index r) {
  const Index d = x.rows();
  const Index t_len = x.cols();
  if (r > std::min(d, t_len)) {
    throw DimensionError("pca_reduce: r=" + std::to_string(r) + " exceeds min(d, T)=" +
                         std::to_string(std::min(d, t_len)));
  }
  PcaResult out;
  out.mean.assign(d, 0.0);
  for (Index i = 0; i < d; ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v;
    out.mean[i] = s / static_cast<double>(t_len);
  }
  Matrix centered = x;
  for (Index i = 0; i < d; ++i)
    for (double& v : centered.row(i)) v -= out.mean[i];
  const Matrix cov = scale(matmul_bt(centered, centered), 1.0 / static_cast<double>(t_len));
  EigenPairs eig = eigh_topk(cov, r);
  out.total_variance = trace(cov);
  out.captured_variance = std::accumulate(eig.values.begin(), eig.values.end(), 0.0);
  out.basis = std::move(eig.vectors);
  out.eigenvalues = std::move(eig.values);
  out.projected = matmul_at(out.basis, centered);
  return out;
}

std::vector<Index> cluster_counts(const Labels& labels, Index k) {
  std::vector<Index> counts(k, 0);
  for (Index l : labels) {
    if (l >= k) throw InputError("cluster label " + std::to_string(l) + " out of range");
    ++counts[l];
  }
  return counts;
}

Matrix cluster_means(const Matrix& data, const Labels& labels, Index k) {
  if (labels.size() != data.cols()) {
    throw DimensionError("cluster_means: label count does not match token count");
  }
  const auto counts = cluster_counts(labels, k);
  Matrix means(k, data.rows());
  for (Index j = 0; j < data.rows(); ++j) {
    const auto row = data.row(j);
    for (Index t = 0; t < row.size(); ++t) means(labels[t], j) += row[t];
  }
  for (Index c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    for (double& v : means.row(c)) v /= static_cast<double>(counts[c]);
  }
  return means;
}

ContextClusters kmeans(const Matrix& xr, Index k, std::uint64_t seed) {
  const Index t_len = xr.cols();
  if (k == 0) throw InputError("kmeans: K must be positive");
  if (t_len < k) {
    throw InputError("kmeans: " + std::to_string(t_len) + " points cannot form " +
                     std::to_string(k) + " clusters");
  }
  const Matrix points = xr.transpose();  // T×r
  const Index dim = points.cols();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // k-means++ seeding
  Matrix centroids(k, dim);
  Vector best(t_len, std::numeric_limits<double>::infinity());
  Index first = std::min<Index>(static_cast<Index>(unit(rng) * static_cast<double>(t_len)), t_len - 1);
  std::copy(points.row(first).begin(), points.row(first).end(), centroids.row(0).begin());
  for (Index c = 1; c < k; ++c) {
    double total = 0.0;
    for (Index t = 0; t < t_len; ++t) {
      best[t] = std::min(best[t], squared_distance(points, t, centroids, c - 1));
      total += best[t];
    }
    Index pick = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      pick = t_len - 1;
      for (Index t = 0; t < t_len; ++t) {
        acc += best[t];
        if (acc > target && best[t] > 0.0) {
          pick = t;
          break;
        }
      }
    } else {
      pick = std::min<Index>(static_cast<Index>(unit(rng) * static_cast<double>(t_len)), t_len - 1);
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(c).begin());
  }

  ContextClusters out;
  out.labels.assign(t_len, 0);
  Vector dist(t_len, 0.0);

  auto assign_and_repair = [&] {
    for (Index t = 0; t < t_len; ++t) {
      Index arg = 0;
      double bd = squared_distance(points, t, centroids, 0);
      for (Index c = 1; c < k; ++c) {
        const double dc = squared_distance(points, t, centroids, c);
        if (dc < bd) {
          bd = dc;
          arg = c;
        }
      }
      out.labels[t] = arg;
      dist[t] = bd;
    }
    auto counts = cluster_counts(out.labels, k);
    for (Index c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      Index far = t_len;
      for (Index t = 0; t < t_len; ++t) {
        if (counts[out.labels[t]] < 2) continue;
        if (far == t_len || dist[t] > dist[far]) far = t;
      }
      --counts[out.labels[far]];
      ++counts[c];
      out.labels[far] = c;
      dist[far] = 0.0;
      std::copy(points.row(far).begin(), points.row(far).end(), centroids.row(c).begin());
    }
    out.objective_trace.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));
  };

  for (Index it = 0; it < kKmeansMaxIterations; ++it) {
    assign_and_repair();
    ++out.iterations;
    const Matrix updated = cluster_means(xr, out.labels, k);
    double shift = 0.0;
    for (Index c = 0; c < k; ++c) {
      double s = 0.0;
      for (Index i = 0; i < dim; ++i) {
        const double diff = updated(c, i) - centroids(c, i);
        s += diff * diff;
      }
      shift = std::max(shift, std::sqrt(s));
    }
    centroids = updated;
    if (shift < kKmeansTolerance) break;
  }
  assign_and_repair();
  out.centroids = cluster_means(xr, out.labels, k);
  out.counts = cluster_counts(out.labels, k);
  return out;
}

Matrix score_matrix(const Matrix& hidden, const Matrix& grad, const Labels& labels, Index k) {
  if (hidden.rows() != grad.rows() || hidden.cols() != grad.cols()) {
    throw DimensionError("score_matrix: hidden and grad shapes differ");
  }
  if (labels.size() != hidden.cols()) {
    throw DimensionError("score_matrix: label count does not match token count");
  }
  const auto counts = cluster_counts(labels, k);
  Matrix s(k, hidden.rows());
  for (Index j = 0; j < hidden.rows(); ++j) {
    const auto h = hidden.row(j);
    const auto g = grad.row(j);
    for (Index t = 0; t < h.size(); ++t) s(labels[t], j) += std::abs(h[t] * g[t]);
  }
  for (Index c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    for (double& v : s.row(c)) v /= static_cast<double>(counts[c]);
  }
  return s;
}

IndexList select_shared_group(const Matrix& s, Index m) {
  const Index n = s.cols();
  if (m > n) {
    throw InputError("select_shared_group: m=" + std::to_string(m) + " exceeds neuron count " +
                     std::to_string(n));
  }
  Vector total(n, 0.0);
  for (Index c = 0; c < s.rows(); ++c)
    for (Index j = 0; j < n; ++j) total[j] += s(c, j);

  std::vector<Index> freq(n, 0);
  for (Index c = 0; c < s.rows(); ++c) {
    const Vector row(s.row(c).begin(), s.row(c).end());
    const IndexList order = rank_descending(row);
    for (Index i = 0; i < m; ++i) ++freq[order[i]];
  }

  IndexList multi;
  for (Index j = 0; j < n; ++j) {
    if (freq[j] >= 2) multi.push_back(j);
  }
  std::stable_sort(multi.begin(), multi.end(), [&](Index a, Index b) {
    if (freq[a] != freq[b]) return freq[a] > freq[b];
    return total[a] > total[b];
  });
  if (multi.size() > m) multi.resize(m);

  IndexList shared = multi;
  if (shared.size() < m) {
    std::vector<char> taken(n, 0);
    for (Index j : shared) taken[j] = 1;
    for (Index j : rank_descending(total)) {
      if (shared.size() == m) break;
      if (!taken[j]) shared.push_back(j);
    }
  }
  std::sort(shared.begin(), shared.end());
  return shared;
}

std::vector<IndexList> assign_groups(const Matrix& s, const IndexList& shared, Index k, Index m,
                                     AssignSolver solver) {
  const Index n = s.cols();
  if (s.rows() != k) throw DimensionError("assign_groups: score rows != K");
  std::vector<char> excluded(n, 0);
  for (Index j : shared) {
    if (j >= n) throw InputError("assign_groups: shared index out of range");
    excluded[j] = 1;
  }
  IndexList avail;
  for (Index j = 0; j < n; ++j) {
    if (!excluded[j]) avail.push_back(j);
  }
  if (avail.size() != k * m) {
    throw ConfigError("assign_groups: " + std::to_string(avail.size()) +
                      " unshared neurons cannot fill " + std::to_string(k) + " groups of " +
                      std::to_string(m));
  }
  std::vector<IndexList> groups(k);
  if (avail.empty()) return groups;

  if (solver == AssignSolver::kExact) {
    const Index size = avail.size();
    Matrix cost(size, size);
    for (Index i = 0; i < size; ++i)
      for (Index slot = 0; slot < size; ++slot) cost(i, slot) = -s(slot / m, avail[i]);
    const auto assignment = hungarian(cost);
    for (Index i = 0; i < size; ++i) groups[assignment[i] / m].push_back(avail[i]);
  } else {
    struct Pair {
      double score;
      Index neuron;
      Index cluster;
    };
    std::vector<Pair> pairs;
    pairs.reserve(avail.size() * k);
    for (Index j : avail)
      for (Index c = 0; c < k; ++c) pairs.push_back({s(c, j), j, c});
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.neuron != b.neuron) return a.neuron < b.neuron;
      return a.cluster < b.cluster;
    });
    std::vector<char> placed(n, 0);
    for (const auto& p : pairs) {
      if (placed[p.neuron] || groups[p.cluster].size() == m) continue;
      groups[p.cluster].push_back(p.neuron);
      placed[p.neuron] = 1;
    }
  }
  for (auto& g : groups) std::sort(g.begin(), g.end());
  return groups;
}

Matrix centroid_distance_matrix(const Matrix& hidden, const Labels& labels, Index k) {
  if (k == 0) throw InputError("centroid_distance_matrix: K must be positive");
  const auto counts = cluster_counts(labels, k);
  for (Index c = 0; c < k; ++c) {
    if (counts[c] == 0) {
      throw InputError("centroid_distance_matrix: cluster " + std::to_string(c) + " is empty");
    }
  }
  const Matrix centers = cluster_means(hidden, labels, k);
  Matrix d(k, k);
  for (Index a = 0; a < k; ++a) {
    for (Index b = a + 1; b < k; ++b) {
      double s = 0.0;
      for (Index j = 0; j < centers.cols(); ++j) {
        const double diff = centers(a, j) - centers(b, j);
        s += diff * diff;
      }
      d(a, b) = d(b, a) = std::sqrt(s);
    }
  }
  return d;
}

ReweightMode reweight_mode_from_string(std::string_view name) {
  if (name == "ours") return ReweightMode::kOurs;
  if (name == "reverse") return ReweightMode::kReverse;
  if (name == "uniform") return ReweightMode::kUniform;
  if (name == "only_matched") return ReweightMode::kOnlyMatched;
  throw ConfigError("unknown reweight mode '" + std::string(name) + "'");
}

std::string to_string(ReweightMode mode) {
  switch (mode) {
    case ReweightMode::kOurs:
      return "ours";
    case ReweightMode::kReverse:
      return "reverse";
    case ReweightMode::kUniform:
      return "uniform";
    case ReweightMode::kOnlyMatched:
      return "only_matched";
  }
  return "ours";
}

Matrix alpha_weights(const Matrix& d, double tau, ReweightMode mode) {
  if (d.rows() != d.cols()) throw DimensionError("alpha_weights: D must be square");
  const Index k = d.rows();
  Matrix alpha(k, k);
  if (mode == ReweightMode::kUniform) {
    for (double& v : alpha.data()) v = 1.0 / static_cast<double>(k);
    return alpha;
  }
  if (mode == ReweightMode::kOnlyMatched) return Matrix::identity(k);
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ParameterError("alpha_weights: temperature must be positive and finite, got " +
                         std::to_string(tau));
  }
  const double sign = mode == ReweightMode::kOurs ? -1.0 : 1.0;
  for (Index a = 0; a < k; ++a) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index b = 0; b < k; ++b) mx = std::max(mx, sign * d(a, b) / tau);
    double sum = 0.0;
    for (Index b = 0; b < k; ++b) {
      alpha(a, b) = std::exp(sign * d(a, b) / tau - mx);
      sum += alpha(a, b);
    }
    for (Index b = 0; b < k; ++b) alpha(a, b) /= sum;
  }
  return alpha;
}

NeuronGrouping random_grouping(Index n, Index k, std::uint64_t seed) {
  if (k == 0 || n < k + 1) {
    throw ConfigError("random_grouping: need at least K+1=" + std::to_string(k + 1) +
                      " neurons, got " + std::to_string(n));
  }
  const Index m = n / (k + 1);
  IndexList perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const Index shared_slot = std::uniform_int_distribution<Index>(0, k)(rng);

  NeuronGrouping out;
  Index pos = 0;
  for (Index set = 0; set <= k; ++set) {
    IndexList members(perm.begin() + pos, perm.begin() + pos + m);
    pos += m;
    if (set == shared_slot) {
      out.shared = std::move(members);
    } else {
      out.groups.push_back(std::move(members));
    }
  }
  out.shared.insert(out.shared.end(), perm.begin() + pos, perm.end());
  std::sort(out.shared.begin(), out.shared.end());
  for (auto& g : out.groups) std::sort(g.begin(), g.end());
  return out;
}

void check_partition(const NeuronGrouping& grouping, Index n) {
  std::vector<int> seen(n, 0);
  auto visit = [&](const IndexList& set) {
    for (Index j : set) {
      if (j >= n) throw InputError("grouping: neuron index " + std::to_string(j) + " out of range");
      if (seen[j]++) throw InputError("grouping: neuron " + std::to_string(j) + " in two sets");
    }
  };
  for (const auto& g : grouping.groups) visit(g);
  visit(grouping.shared);
  for (Index j = 0; j < n; ++j) {
    if (!seen[j]) throw InputError("grouping: neuron " + std::to_string(j) + " unassigned");
  }
}

nlohmann::json to_json(const NeuronGrouping& g) {
  auto matrix_json = [](const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Index r = 0; r < m.rows(); ++r) rows.push_back(Vector(m.row(r).begin(), m.row(r).end()));
    return rows;
  };
  return {{"groups", g.groups},
          {"shared", g.shared},
          {"alpha", matrix_json(g.alpha)},
          {"distances", matrix_json(g.distances)}};
}

}  // namespace fang
