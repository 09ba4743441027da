#include "fang/pruners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fang/errors.hpp"

namespace fang {

namespace {

// Indices of the `count` smallest scores; ties go to the lower index.
IndexList lowest(const Vector& scores, Index count) {
  IndexList order(scores.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return scores[a] < scores[b]; });
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

UnitMask mask_from(const IndexList& pruned, Index n) {
  UnitMask mask(n, 0);
  for (Index j : pruned) mask[j] = 1;
  return mask;
}

void zero_columns(Matrix& w, const IndexList& cols) {
  for (Index r = 0; r < w.rows(); ++r)
    for (Index c : cols) w(r, c) = 0.0;
}

double column_sq_norm(const Matrix& w, Index c) {
  double s = 0.0;
  for (Index r = 0; r < w.rows(); ++r) s += w(r, c) * w(r, c);
  return s;
}

// Σ_t w_t ‖Σ_{c∈cols} W[:,c]·(x[rows[c], t] - center_c)‖²; x rows are indexed
// through `x_rows` (same length as cols).
double weighted_residual(const Matrix& w, const IndexList& cols, const Matrix& x,
                         const IndexList& x_rows, const Vector& center,
                         std::span<const double> token_weights) {
  if (cols.empty()) return 0.0;
  const Index d = w.rows();
  Vector r(d);
  double total = 0.0;
  for (Index t = 0; t < x.cols(); ++t) {
    const double wt = token_weights.empty() ? 1.0 : token_weights[t];
    if (wt == 0.0) continue;
    std::fill(r.begin(), r.end(), 0.0);
    for (Index i = 0; i < cols.size(); ++i) {
      const double v = x(x_rows[i], t) - center[i];
      if (v == 0.0) continue;
      for (Index o = 0; o < d; ++o) r[o] += w(o, cols[i]) * v;
    }
    double s = 0.0;
    for (double e : r) s += e * e;
    total += wt * s;
  }
  return total;
}

}  // namespace

Index prune_count(double sp, Index n) {
  if (!(sp >= 0.0) || sp >= 1.0) {
    throw ParameterError("sparsity must lie in [0, 1), got " + std::to_string(sp));
  }
  return static_cast<Index>(std::floor(sp * static_cast<double>(n) + 1e-9));
}

Matrix hessian(const Matrix& x, std::optional<std::span<const double>> token_weights) {
  if (!token_weights) return matmul_bt(x, x);
  if (token_weights->size() != x.cols()) {
    throw DimensionError("hessian: token weight count does not match token count");
  }
  Matrix scaled = x;
  for (Index r = 0; r < scaled.rows(); ++r) {
    auto row = scaled.row(r);
    for (Index t = 0; t < row.size(); ++t) {
      const double wt = (*token_weights)[t];
      if (wt < 0.0) throw ParameterError("hessian: token weights must be nonnegative");
      row[t] *= wt;
    }
  }
  return matmul_bt(scaled, x);
}

Matrix reweighted_hessian(const Matrix& hidden, const Labels& labels,
                          std::span<const double> alpha_row, const IndexList& group) {
  if (labels.size() != hidden.cols()) {
    throw DimensionError("reweighted_hessian: label count does not match token count");
  }
  Vector weights(labels.size());
  for (Index t = 0; t < labels.size(); ++t) {
    if (labels[t] >= alpha_row.size()) {
      throw DimensionError("reweighted_hessian: label exceeds alpha length");
    }
    weights[t] = alpha_row[labels[t]];
  }
  return hessian(select_rows(hidden, group), std::span<const double>(weights));
}

double reconstruction_error(const Matrix& delta_w, const Matrix& h) {
  if (delta_w.cols() != h.rows()) throw DimensionError("reconstruction_error: shape mismatch");
  const Matrix dh = matmul(delta_w, h);
  double s = 0.0;
  const auto a = dh.data();
  const auto b = delta_w.data();
  for (Index i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vector obc_importance(const Matrix& w, const Matrix& hinv) {
  if (hinv.rows() != w.cols() || hinv.cols() != w.cols()) {
    throw DimensionError("obc_importance: H^-1 must be " + std::to_string(w.cols()) + " square");
  }
  Vector e(w.cols(), 0.0);
  for (Index j = 0; j < w.cols(); ++j) {
    const double denom = hinv(j, j);
    if (!(denom > 0.0)) {
      throw NumericalError("obc_importance: [H^-1] diagonal at column " + std::to_string(j) +
                           " is not positive");
    }
    e[j] = column_sq_norm(w, j) / denom;
  }
  return e;
}

Matrix obc_compensate(const Matrix& w, const Matrix& hinv, const IndexList& pruned) {
  Matrix delta(w.rows(), w.cols());
  if (pruned.empty()) return delta;
  const Matrix hinv_mm = select_block(hinv, pruned, pruned);
  const Matrix inner = spd_inverse(hinv_mm, "obc_compensate: H^-1_MM");
  const Matrix w_m = select_columns(w, pruned);
  const Matrix hinv_m = select_rows(hinv, pruned);
  delta = scale(matmul(matmul(w_m, inner), hinv_m), -1.0);
  return delta;
}

PruneResult obc_variant_prune_count(const Matrix& w, const Matrix& h, Index count,
                                    double damping) {
  const Index n = w.cols();
  if (h.rows() != n || h.cols() != n) throw DimensionError("obc_variant_prune: H shape mismatch");
  if (count > n) throw ParameterError("obc_variant_prune: prune count exceeds channel count");
  PruneResult out;
  out.method = "obc";
  out.new_weights = w;
  out.mask.assign(n, 0);
  if (count == 0) return out;

  const Matrix hinv = sym_inverse_damped(h, damping, "obc_variant_prune");
  Vector e = obc_importance(w, hinv);
  for (Index j = 0; j < n; ++j) {
    if (h(j, j) == 0.0) e[j] = 0.0;
  }
  const IndexList pruned = lowest(e, count);
  IndexList live;
  for (Index j : pruned) {
    if (h(j, j) != 0.0) live.push_back(j);
  }
  out.mask = mask_from(pruned, n);
  out.new_weights = add(w, obc_compensate(w, hinv, live));
  zero_columns(out.new_weights, pruned);

  Matrix dropped(w.rows(), n);
  for (Index r = 0; r < w.rows(); ++r)
    for (Index c : pruned) dropped(r, c) = w(r, c);
  out.recon_error_before = reconstruction_error(dropped, h);
  out.recon_error_after = reconstruction_error(subtract(w, out.new_weights), h);
  return out;
}

PruneResult obc_variant_prune(const Matrix& w, const Matrix& h, double sp, double damping) {
  return obc_variant_prune_count(w, h, prune_count(sp, w.cols()), damping);
}

PruneResult obc_traditional_prune_count(const Matrix& w, const Matrix& h, Index count,
                                        double damping, std::vector<Matrix>* trace,
                                        IndexList* order) {
  const Index n = w.cols();
  if (h.rows() != n || h.cols() != n) {
    throw DimensionError("obc_traditional_prune: H shape mismatch");
  }
  if (count > n) throw ParameterError("obc_traditional_prune: prune count exceeds channel count");
  PruneResult out;
  out.method = "obc_traditional";
  out.new_weights = w;
  out.mask.assign(n, 0);
  if (count == 0) return out;

  Matrix hinv = sym_inverse_damped(h, damping, "obc_traditional_prune");
  Matrix& cur = out.new_weights;
  IndexList pruned;
  for (Index step = 0; step < count; ++step) {
    Index best = n;
    double best_e = 0.0;
    for (Index j = 0; j < n; ++j) {
      if (out.mask[j]) continue;
      double e = 0.0;
      if (h(j, j) != 0.0) {
        const double denom = hinv(j, j);
        if (!(denom > 0.0)) {
          throw NumericalError("obc_traditional_prune: [H^-1] diagonal at column " +
                               std::to_string(j) + " is not positive");
        }
        e = column_sq_norm(cur, j) / denom;
      }
      if (best == n || e < best_e) {
        best = j;
        best_e = e;
      }
    }
    const Index j = best;
    const double djj = hinv(j, j);
    if (h(j, j) != 0.0) {
      // W <- W - (W[:,j] / H^-1_jj) · H^-1[j,:]
      for (Index r = 0; r < cur.rows(); ++r) {
        const double f = cur(r, j) / djj;
        if (f == 0.0) continue;
        for (Index c = 0; c < n; ++c) cur(r, c) -= f * hinv(j, c);
      }
    }
    for (Index r = 0; r < cur.rows(); ++r) cur(r, j) = 0.0;
    // Gaussian elimination of row/column j from H^-1.
    const Vector hj(hinv.row(j).begin(), hinv.row(j).end());
    for (Index a = 0; a < n; ++a) {
      const double fa = hj[a] / djj;
      if (fa == 0.0) continue;
      for (Index b = 0; b < n; ++b) hinv(a, b) -= fa * hj[b];
    }
    for (Index a = 0; a < n; ++a) hinv(a, j) = hinv(j, a) = 0.0;
    out.mask[j] = 1;
    pruned.push_back(j);
    if (trace) trace->push_back(cur);
    if (order) order->push_back(j);
  }

  std::sort(pruned.begin(), pruned.end());
  Matrix dropped(w.rows(), n);
  for (Index r = 0; r < w.rows(); ++r)
    for (Index c : pruned) dropped(r, c) = w(r, c);
  out.recon_error_before = reconstruction_error(dropped, h);
  out.recon_error_after = reconstruction_error(subtract(w, cur), h);
  return out;
}

PruneResult obc_traditional_prune(const Matrix& w, const Matrix& h, double sp, double damping) {
  return obc_traditional_prune_count(w, h, prune_count(sp, w.cols()), damping);
}

FlapStats flap_stats(const Matrix& x) {
  if (x.cols() == 0) throw InputError("flap_stats: need at least one token");
  FlapStats s{Vector(x.rows(), 0.0), Vector(x.rows(), 0.0)};
  for (Index i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    if (*lo == *hi) {  // exact zero fluctuation; the summed mean can drift by an ulp
      s.mean[i] = *lo;
      continue;
    }
    double sum = 0.0;
    for (double v : row) sum += v;
    const double mean = sum / static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    s.mean[i] = mean;
    s.varsum[i] = var;
  }
  return s;
}

Vector flap_importance(const Matrix& w, const Matrix& x) {
  if (w.cols() != x.rows()) throw DimensionError("flap_importance: W columns != X rows");
  const FlapStats stats = flap_stats(x);
  Vector s(w.cols());
  for (Index i = 0; i < w.cols(); ++i) s[i] = stats.varsum[i] * column_sq_norm(w, i);
  return s;
}

Vector flap_group_importance(const Matrix& w, const Matrix& hidden, const Labels& labels,
                             std::span<const double> alpha_row, const IndexList& group) {
  if (w.cols() != hidden.rows()) throw DimensionError("flap_group_importance: W columns != rows");
  if (labels.size() != hidden.cols()) {
    throw DimensionError("flap_group_importance: label count does not match token count");
  }
  Vector s(group.size());
  for (Index g = 0; g < group.size(); ++g) {
    const auto row = hidden.row(group[g]);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    if (row.empty() || *lo == *hi) continue;
    double sum = 0.0;
    for (double v : row) sum += v;
    const double mean = sum / static_cast<double>(row.size());
    double acc = 0.0;
    for (Index t = 0; t < row.size(); ++t) {
      const double dv = row[t] - mean;
      acc += alpha_row[labels[t]] * dv * dv;
    }
    s[g] = acc * column_sq_norm(w, group[g]);
  }
  return s;
}

Vector flap_bias(const Matrix& w, const UnitMask& mask, std::span<const double> means) {
  if (mask.size() != w.cols() || means.size() != w.cols()) {
    throw DimensionError("flap_bias: mask/means length must equal W columns");
  }
  Vector masked(w.cols(), 0.0);
  for (Index i = 0; i < w.cols(); ++i) masked[i] = mask[i] ? means[i] : 0.0;
  return matvec(w, masked);
}

PruneResult flap_prune_count(const Matrix& w, const Matrix& x, Index count) {
  if (count > w.cols()) throw ParameterError("flap_prune: prune count exceeds channel count");
  const FlapStats stats = flap_stats(x);
  Vector scores(w.cols());
  for (Index i = 0; i < w.cols(); ++i) scores[i] = stats.varsum[i] * column_sq_norm(w, i);
  const IndexList pruned = lowest(scores, count);
  PruneResult out;
  out.method = "flap";
  out.mask = mask_from(pruned, w.cols());
  out.bias = flap_bias(w, out.mask, stats.mean);
  out.new_weights = w;
  zero_columns(out.new_weights, pruned);
  Vector zeros(pruned.size(), 0.0);
  Vector centers(pruned.size());
  for (Index i = 0; i < pruned.size(); ++i) centers[i] = stats.mean[pruned[i]];
  out.recon_error_before = weighted_residual(w, pruned, x, pruned, zeros, {});
  out.recon_error_after = weighted_residual(w, pruned, x, pruned, centers, {});
  return out;
}

std::vector<Index> group_prune_counts(const std::vector<IndexList>& groups, Index target) {
  const Index k = groups.size();
  std::vector<Index> counts(k, 0);
  Index total_size = 0;
  std::vector<Index> caps(k);
  for (Index g = 0; g < k; ++g) {
    total_size += groups[g].size();
    caps[g] = static_cast<Index>(std::floor(kMaxGroupSparsity * static_cast<double>(groups[g].size()) + 1e-9));
  }
  if (total_size == 0 || target == 0) return counts;
  Vector remainder(k, 0.0);
  Index assigned = 0;
  for (Index g = 0; g < k; ++g) {
    const double quota = static_cast<double>(target) * static_cast<double>(groups[g].size()) /
                         static_cast<double>(total_size);
    counts[g] = std::min(caps[g], static_cast<Index>(std::floor(quota + 1e-9)));
    remainder[g] = quota - static_cast<double>(counts[g]);
    assigned += counts[g];
  }
  // Hand out what is left one neuron at a time by largest remainder.
  while (assigned < target) {
    Index pick = k;
    for (Index g = 0; g < k; ++g) {
      if (counts[g] >= caps[g]) continue;
      if (pick == k || remainder[g] > remainder[pick] + 1e-12) pick = g;
    }
    if (pick == k) break;
    ++counts[pick];
    remainder[pick] -= 1.0;
    ++assigned;
  }
  return counts;
}

FfnPruneResult fang_prune_ffn(const Matrix& w_down, const Matrix& hidden, const Labels& labels,
                              const NeuronGrouping& grouping, Index target, BaseMethod method,
                              double damping) {
  const Index n = w_down.cols();
  if (hidden.rows() != n) throw DimensionError("fang_prune_ffn: hidden rows != W_down columns");
  check_partition(grouping, n);
  const Index k = grouping.groups.size();
  if (grouping.alpha.rows() != k || grouping.alpha.cols() != k) {
    throw DimensionError("fang_prune_ffn: alpha must be KxK");
  }

  FfnPruneResult out;
  out.target = target;
  out.result.method = method == BaseMethod::kObc ? "fang-obc" : "fang-flap";
  out.result.mask.assign(n, 0);
  out.result.new_weights = w_down;
  const auto counts = group_prune_counts(grouping.groups, target);

  Vector global_mean;
  if (method == BaseMethod::kFlap) global_mean = flap_stats(hidden).mean;

  for (Index g = 0; g < k; ++g) {
    const IndexList& members = grouping.groups[g];
    const auto alpha_row = grouping.alpha.row(g);
    GroupStats stats;
    stats.size = members.size();
    stats.pruned = counts[g];
    stats.sparsity = members.empty() ? 0.0
                                     : static_cast<double>(counts[g]) /
                                           static_cast<double>(members.size());
    if (counts[g] > 0) {
      const Matrix w_g = select_columns(w_down, members);
      if (method == BaseMethod::kObc) {
        const Matrix h_g = reweighted_hessian(hidden, labels, alpha_row, members);
        PruneResult pr;
        try {
          pr = obc_variant_prune_count(w_g, h_g, counts[g], damping);
        } catch (const SingularityError& e) {
          throw SingularityError(std::string(e.what()) + " in group " + std::to_string(g));
        }
        for (Index c = 0; c < members.size(); ++c) {
          out.result.mask[members[c]] = pr.mask[c];
          for (Index r = 0; r < w_down.rows(); ++r) {
            out.result.new_weights(r, members[c]) = pr.new_weights(r, c);
          }
        }
        stats.error_before = pr.recon_error_before;
        stats.error_after = pr.recon_error_after;
      } else {
        const Vector scores = flap_group_importance(w_down, hidden, labels, alpha_row, members);
        const IndexList local = lowest(scores, counts[g]);
        IndexList cols;
        Vector zeros(local.size(), 0.0), centers(local.size());
        for (Index i = 0; i < local.size(); ++i) {
          const Index col = members[local[i]];
          cols.push_back(col);
          centers[i] = global_mean[col];
          out.result.mask[col] = 1;
        }
        Vector token_w(labels.size());
        for (Index t = 0; t < labels.size(); ++t) token_w[t] = alpha_row[labels[t]];
        stats.error_before = weighted_residual(w_down, cols, hidden, cols, zeros, token_w);
        stats.error_after = weighted_residual(w_down, cols, hidden, cols, centers, token_w);
      }
    }
    out.result.recon_error_before += stats.error_before;
    out.result.recon_error_after += stats.error_after;
    out.groups.push_back(stats);
  }

  IndexList pruned;
  for (Index j = 0; j < n; ++j) {
    if (out.result.mask[j]) pruned.push_back(j);
  }
  if (method == BaseMethod::kFlap) {
    out.result.bias = flap_bias(w_down, out.result.mask, global_mean);
  }
  zero_columns(out.result.new_weights, pruned);
  out.shortfall = target > pruned.size() ? target - pruned.size() : 0;
  return out;
}

FfnPruneResult fang_prune_ffn(const Matrix& w_down, const Matrix& hidden, const Labels& labels,
                              const NeuronGrouping& grouping, double sp_layer, BaseMethod method,
                              double damping) {
  const Index n = w_down.cols();
  const Index k = grouping.groups.size();
  Index grouped = 0;
  for (const auto& g : grouping.groups) grouped += g.size();
  if (k == 0) throw ConfigError("fang_prune_ffn: grouping has no functional groups");
  prune_count(sp_layer, n);  // range check
  double sp_group = sp_layer;
  if (!grouping.shared.empty() && grouped > 0) {
    sp_group = std::min(sp_layer * static_cast<double>(n) / static_cast<double>(grouped),
                        kMaxGroupSparsity);
  }
  const Index target = static_cast<Index>(std::floor(sp_group * static_cast<double>(grouped) + 1e-9));
  return fang_prune_ffn(w_down, hidden, labels, grouping, target, method, damping);
}

HeadPruneResult prune_heads(const Matrix& w_o, const Matrix& attn_mix, Index d_head, Index count,
                            BaseMethod method, double damping) {
  if (d_head == 0 || w_o.cols() % d_head != 0) {
    throw DimensionError("prune_heads: W_o width is not a multiple of d_head");
  }
  if (attn_mix.rows() != w_o.cols()) throw DimensionError("prune_heads: input rows != W_o columns");
  const Index heads = w_o.cols() / d_head;
  if (count >= heads && heads > 0) {
    throw InputError("prune_heads: refusing to prune all " + std::to_string(heads) + " heads");
  }
  HeadPruneResult out;
  out.head_mask.assign(heads, 0);
  out.head_scores.assign(heads, 0.0);
  PruneResult& res = out.result;
  res.method = method == BaseMethod::kObc ? "obc" : "flap";
  res.mask.assign(w_o.cols(), 0);
  res.new_weights = w_o;

  auto head_columns = [&](Index h) {
    IndexList cols(d_head);
    std::iota(cols.begin(), cols.end(), h * d_head);
    return cols;
  };

  if (method == BaseMethod::kObc) {
    const Matrix h = hessian(attn_mix);
    if (count == 0) return out;
    const Matrix hinv = sym_inverse_damped(h, damping, "prune_heads");
    for (Index hd = 0; hd < heads; ++hd) {
      const IndexList cols = head_columns(hd);
      bool dead = true;
      for (Index c : cols) dead = dead && h(c, c) == 0.0;
      if (dead) continue;
      const Matrix w_b = select_columns(w_o, cols);
      const Matrix inner = spd_inverse(select_block(hinv, cols, cols), "prune_heads: H^-1_BB");
      out.head_scores[hd] = trace(matmul_bt(matmul(w_b, inner), w_b));
    }
    const IndexList chosen = lowest(out.head_scores, count);
    IndexList pruned_cols;
    IndexList live_cols;
    for (Index hd : chosen) {
      out.head_mask[hd] = 1;
      for (Index c : head_columns(hd)) {
        pruned_cols.push_back(c);
        if (h(c, c) != 0.0) live_cols.push_back(c);
      }
    }
    res.mask = mask_from(pruned_cols, w_o.cols());
    res.new_weights = add(w_o, obc_compensate(w_o, hinv, live_cols));
    zero_columns(res.new_weights, pruned_cols);
    Matrix dropped(w_o.rows(), w_o.cols());
    for (Index r = 0; r < w_o.rows(); ++r)
      for (Index c : pruned_cols) dropped(r, c) = w_o(r, c);
    res.recon_error_before = reconstruction_error(dropped, h);
    res.recon_error_after = reconstruction_error(subtract(w_o, res.new_weights), h);
    return out;
  }

  const FlapStats stats = flap_stats(attn_mix);
  for (Index hd = 0; hd < heads; ++hd) {
    for (Index c : head_columns(hd)) {
      out.head_scores[hd] += stats.varsum[c] * column_sq_norm(w_o, c);
    }
  }
  const IndexList chosen = lowest(out.head_scores, count);
  IndexList pruned_cols;
  for (Index hd : chosen) {
    out.head_mask[hd] = 1;
    for (Index c : head_columns(hd)) pruned_cols.push_back(c);
  }
  res.mask = mask_from(pruned_cols, w_o.cols());
  res.bias = flap_bias(w_o, res.mask, stats.mean);
  zero_columns(res.new_weights, pruned_cols);
  Vector zeros(pruned_cols.size(), 0.0), centers(pruned_cols.size());
  for (Index i = 0; i < pruned_cols.size(); ++i) centers[i] = stats.mean[pruned_cols[i]];
  res.recon_error_before = weighted_residual(w_o, pruned_cols, attn_mix, pruned_cols, zeros, {});
  res.recon_error_after = weighted_residual(w_o, pruned_cols, attn_mix, pruned_cols, centers, {});
  return out;
}

}  // namespace fang
