#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fang/calib.hpp"
#include "fang/numcore.hpp"

namespace fang {

enum class AllocMode { kUniform, kFc, kTaylor };

AllocMode alloc_mode_from_string(std::string_view name);
std::string to_string(AllocMode mode);

struct FunctionalComplexity {
  Vector fc;                        // per block, in [0, 2]
  std::vector<Index> skipped_columns;  // zero-norm columns ignored per block
};

// FC = 1 - mean_t cos(block_in[:,t], block_out[:,t]).
double functional_complexity(const Matrix& block_in, const Matrix& block_out,
                             Index* skipped = nullptr);
FunctionalComplexity functional_complexity(const std::vector<BlockCapture>& captures);

struct SparsityPlan {
  AllocMode mode = AllocMode::kUniform;
  double target = 0.0;
  Vector block_sparsity;  // sp^l
  Vector fc;              // metric the plan was derived from (FC or sensitivity)
  Vector block_weights;   // parameter counts used for the weighted mean
  Index renormalize_iterations = 0;
  double weighted_mean = 0.0;
};

inline constexpr double kPlanTolerance = 0.005;  // relative to the target
inline constexpr Index kPlanMaxIterations = 20;

// Maps `score` (higher = prune more) affinely onto [0.5sp, 1.5sp], then shifts
// and re-clamps until the weighted mean is within 0.5% of sp.
Vector allocate_from_scores(const Vector& score, double sp, const Vector& weights,
                            Index* iterations = nullptr);

// mode=fc uses 1 - FC as the score; uniform assigns sp everywhere. Empty
// `weights` means equal block sizes.
SparsityPlan sparsity_plan(const Vector& fc, double sp, AllocMode mode, Vector weights = {});

// Block sensitivity T^l = mean |h·G|; score = 1 - T^l / max T.
Vector taylor_sensitivity(const std::vector<BlockCapture>& captures);
SparsityPlan taylor_allocation(const std::vector<BlockCapture>& captures, double sp,
                               Vector weights = {});

nlohmann::json to_json(const SparsityPlan& plan);

}  // namespace fang
