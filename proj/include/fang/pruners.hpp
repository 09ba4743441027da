#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fang/grouping.hpp"
#include "fang/model.hpp"
#include "fang/numcore.hpp"

namespace fang {

inline constexpr double kDefaultDamping = 0.01;
inline constexpr double kMaxGroupSparsity = 0.95;

// Result of pruning the input channels (columns) of one linear layer W
// (C_out×C_in) whose inputs are the rows of X (C_in×T).
struct PruneResult {
  UnitMask mask;  // over columns of W; 1 = pruned
  Matrix new_weights;
  std::optional<Vector> bias;  // FLAP compensation, length C_out
  // Weighted squared output residual Σ_t w_t‖(W - Ŵ)x_t‖² (minus the bias
  // for FLAP); "before" zeroes pruned columns without compensation.
  double recon_error_before = 0.0;
  double recon_error_after = 0.0;
  std::string method;
};

// ⌊sp·n⌋, robust to sp·n landing a hair below an integer.
Index prune_count(double sp, Index n);

// H = Σ_t w_t x_t x_tᵀ over the columns of x (w_t = 1 when absent).
Matrix hessian(const Matrix& x, std::optional<std::span<const double>> token_weights = std::nullopt);

// H_k = Σ_j α_{k,j} X_{G,C_j} X_{G,C_j}ᵀ: the Hessian of the rows `group` of
// hidden, with each token weighted by α of its cluster.
Matrix reweighted_hessian(const Matrix& hidden, const Labels& labels,
                          std::span<const double> alpha_row, const IndexList& group);

// tr(ΔW·H·ΔWᵀ)
double reconstruction_error(const Matrix& delta_w, const Matrix& h);

// e_j = Σ_i W²_{i,j} / [H⁻¹]_{j,j}
Vector obc_importance(const Matrix& w, const Matrix& hinv);

// δW = -W_M (H⁻¹_MM)⁻¹ H⁻¹_{M,:}; zeroes the columns in `pruned` and spreads
// the correction over the rest.
Matrix obc_compensate(const Matrix& w, const Matrix& hinv, const IndexList& pruned);

// One-shot prune: rank by importance, drop the `count` lowest (ties -> lower
// index), compensate once. Channels with a zero Hessian diagonal are treated
// as dead: importance 0, no compensation.
PruneResult obc_variant_prune_count(const Matrix& w, const Matrix& h, Index count,
                                    double damping = kDefaultDamping);
PruneResult obc_variant_prune(const Matrix& w, const Matrix& h, double sp,
                              double damping = kDefaultDamping);

// Greedy iterative OBC. When `trace` is given it receives W after each step.
PruneResult obc_traditional_prune_count(const Matrix& w, const Matrix& h, Index count,
                                        double damping = kDefaultDamping,
                                        std::vector<Matrix>* trace = nullptr,
                                        IndexList* order = nullptr);
PruneResult obc_traditional_prune(const Matrix& w, const Matrix& h, double sp,
                                  double damping = kDefaultDamping);

struct FlapStats {
  Vector mean;    // per row of X
  Vector varsum;  // Σ_t (x_t - mean)²
};
FlapStats flap_stats(const Matrix& x);

// S_i = varsum_i · ‖W_{:,i}‖²
Vector flap_importance(const Matrix& w, const Matrix& x);

// Reweighted fluctuation for the channels of `group`:
// S_i = Σ_t α_{k, c(t)} (x_{i,t} - x̄_i)² · ‖W_{:,i}‖², with x̄_i over all tokens.
Vector flap_group_importance(const Matrix& w, const Matrix& hidden, const Labels& labels,
                             std::span<const double> alpha_row, const IndexList& group);

// B₀ = W·(M ∘ x̄)
Vector flap_bias(const Matrix& w, const UnitMask& mask, std::span<const double> means);

// Plain FLAP on a whole layer: drop the `count` lowest-fluctuation channels,
// zero their columns, and return the mean-substitution bias.
PruneResult flap_prune_count(const Matrix& w, const Matrix& x, Index count);

enum class BaseMethod { kObc, kFlap };

struct GroupStats {
  Index size = 0;
  Index pruned = 0;
  double sparsity = 0.0;
  double error_before = 0.0;
  double error_after = 0.0;
};

struct FfnPruneResult {
  PruneResult result;
  std::vector<GroupStats> groups;
  Index target = 0;
  Index shortfall = 0;  // target minus neurons actually pruned
};

// Splits `target` pruned neurons across groups in proportion to their sizes
// (largest remainder, ties -> lower group index), capping each group at
// ⌊0.95·|G_k|⌋.
std::vector<Index> group_prune_counts(const std::vector<IndexList>& groups, Index target);

// Group-wise reweighted pruning of W_down (d×N_n). Each group G_k is pruned
// independently with Hessian H_k (OBC) or reweighted fluctuation (FLAP);
// shared-group columns are never pruned. FLAP applies one bias over the
// merged mask.
FfnPruneResult fang_prune_ffn(const Matrix& w_down, const Matrix& hidden, const Labels& labels,
                              const NeuronGrouping& grouping, Index target, BaseMethod method,
                              double damping = kDefaultDamping);
// Per-group sparsity min(sp_layer·(K+1)/K, 0.95) when a shared group exists,
// sp_layer otherwise.
FfnPruneResult fang_prune_ffn(const Matrix& w_down, const Matrix& hidden, const Labels& labels,
                              const NeuronGrouping& grouping, double sp_layer, BaseMethod method,
                              double damping = kDefaultDamping);

struct HeadPruneResult {
  UnitMask head_mask;
  PruneResult result;  // over W_o columns
  Vector head_scores;
};

// Head-level pruning of W_o (d×heads·d_head) from its inputs attn_mix. OBC
// scores a head by tr(W_B (H⁻¹_BB)⁻¹ W_Bᵀ) and compensates all pruned columns
// at once; FLAP sums the channel fluctuation scores and returns a bias.
HeadPruneResult prune_heads(const Matrix& w_o, const Matrix& attn_mix, Index d_head, Index count,
                            BaseMethod method, double damping = kDefaultDamping);

}  // namespace fang
