#include "fang/allocate.hpp"

#include <algorithm>
#include <cmath>

#include "fang/errors.hpp"

namespace fang {

namespace {

double weighted_mean(const Vector& v, const Vector& w) {
  double num = 0.0;
  double den = 0.0;
  for (Index i = 0; i < v.size(); ++i) {
    num += w[i] * v[i];
    den += w[i];
  }
  return num / den;
}

Vector resolve_weights(Vector weights, Index n) {
  if (weights.empty()) return Vector(n, 1.0);
  if (weights.size() != n) throw DimensionError("sparsity plan: weight count != block count");
  for (double w : weights) {
    if (!(w > 0.0)) throw ParameterError("sparsity plan: block weights must be positive");
  }
  return weights;
}

void check_target(double sp, AllocMode mode) {
  const double upper = mode == AllocMode::kUniform ? 1.0 : 2.0 / 3.0;
  if (!(sp >= 0.0) || sp >= upper) {
    throw ParameterError("sparsity " + std::to_string(sp) + " outside [0, " +
                         std::to_string(upper) + ") for allocation mode " + to_string(mode));
  }
}

}  // namespace

AllocMode alloc_mode_from_string(std::string_view name) {
  if (name == "uniform") return AllocMode::kUniform;
  if (name == "fc") return AllocMode::kFc;
  if (name == "taylor") return AllocMode::kTaylor;
  throw ConfigError("unknown allocation mode '" + std::string(name) + "'");
}

std::string to_string(AllocMode mode) {
  switch (mode) {
    case AllocMode::kUniform:
      return "uniform";
    case AllocMode::kFc:
      return "fc";
    case AllocMode::kTaylor:
      return "taylor";
  }
  return "uniform";
}

double functional_complexity(const Matrix& block_in, const Matrix& block_out, Index* skipped) {
  if (block_in.rows() != block_out.rows() || block_in.cols() != block_out.cols()) {
    throw DimensionError("functional_complexity: block input/output shapes differ");
  }
  double cos_sum = 0.0;
  Index used = 0;
  Index skip = 0;
  for (Index t = 0; t < block_in.cols(); ++t) {
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (Index i = 0; i < block_in.rows(); ++i) {
      const double a = block_in(i, t);
      const double b = block_out(i, t);
      dot += a * b;
      nx += a * a;
      ny += b * b;
    }
    if (nx == 0.0 || ny == 0.0) {
      ++skip;
      continue;
    }
    double c;
    if (nx == ny && dot == nx) {
      c = 1.0;
    } else if (nx == ny && dot == -nx) {
      c = -1.0;
    } else {
      c = std::clamp(dot / (std::sqrt(nx) * std::sqrt(ny)), -1.0, 1.0);
    }
    cos_sum += c;
    ++used;
  }
  if (skipped) *skipped = skip;
  if (used == 0) throw InputError("functional_complexity: every token column has zero norm");
  return std::clamp(1.0 - cos_sum / static_cast<double>(used), 0.0, 2.0);
}

FunctionalComplexity functional_complexity(const std::vector<BlockCapture>& captures) {
  FunctionalComplexity out;
  for (const auto& cap : captures) {
    Index skipped = 0;
    out.fc.push_back(functional_complexity(cap.block_in, cap.block_out, &skipped));
    out.skipped_columns.push_back(skipped);
  }
  return out;
}

Vector allocate_from_scores(const Vector& score, double sp, const Vector& weights,
                            Index* iterations) {
  const Index n = score.size();
  Vector plan(n, sp);
  if (iterations) *iterations = 0;
  if (n == 0 || sp == 0.0) return plan;
  const auto [lo_it, hi_it] = std::minmax_element(score.begin(), score.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi - lo > 1e-15)) return plan;

  const double floor_sp = 0.5 * sp;
  const double ceil_sp = 1.5 * sp;
  for (Index i = 0; i < n; ++i) plan[i] = floor_sp + (score[i] - lo) / (hi - lo) * sp;

  for (Index it = 0; it < kPlanMaxIterations; ++it) {
    const double mean = weighted_mean(plan, weights);
    if (std::abs(mean - sp) <= kPlanTolerance * sp * 0.1) break;
    for (double& v : plan) v = std::clamp(v + (sp - mean), floor_sp, ceil_sp);
    if (iterations) ++*iterations;
  }
  return plan;
}

SparsityPlan sparsity_plan(const Vector& fc, double sp, AllocMode mode, Vector weights) {
  check_target(sp, mode);
  SparsityPlan plan;
  plan.mode = mode;
  plan.target = sp;
  plan.fc = fc;
  plan.block_weights = resolve_weights(std::move(weights), fc.size());
  if (mode == AllocMode::kUniform) {
    plan.block_sparsity.assign(fc.size(), sp);
  } else {
    Vector score(fc.size());
    for (Index i = 0; i < fc.size(); ++i) score[i] = 1.0 - fc[i];
    plan.block_sparsity =
        allocate_from_scores(score, sp, plan.block_weights, &plan.renormalize_iterations);
  }
  plan.weighted_mean = fc.empty() ? sp : weighted_mean(plan.block_sparsity, plan.block_weights);
  return plan;
}

Vector taylor_sensitivity(const std::vector<BlockCapture>& captures) {
  Vector out;
  for (const auto& cap : captures) {
    if (cap.hidden.rows() != cap.grad.rows() || cap.hidden.cols() != cap.grad.cols()) {
      throw DimensionError("taylor_sensitivity: hidden and grad shapes differ in layer " +
                           std::to_string(cap.layer));
    }
    double s = 0.0;
    const auto h = cap.hidden.data();
    const auto g = cap.grad.data();
    for (Index i = 0; i < h.size(); ++i) s += std::abs(h[i] * g[i]);
    out.push_back(h.empty() ? 0.0 : s / static_cast<double>(h.size()));
  }
  return out;
}

SparsityPlan taylor_allocation(const std::vector<BlockCapture>& captures, double sp,
                               Vector weights) {
  check_target(sp, AllocMode::kTaylor);
  const Vector sens = taylor_sensitivity(captures);
  SparsityPlan plan;
  plan.mode = AllocMode::kTaylor;
  plan.target = sp;
  plan.fc = sens;
  plan.block_weights = resolve_weights(std::move(weights), sens.size());
  const double top = sens.empty() ? 0.0 : *std::max_element(sens.begin(), sens.end());
  Vector score(sens.size(), 0.0);
  if (top > 0.0) {
    for (Index i = 0; i < sens.size(); ++i) score[i] = 1.0 - sens[i] / top;
  }
  plan.block_sparsity =
      allocate_from_scores(score, sp, plan.block_weights, &plan.renormalize_iterations);
  plan.weighted_mean = sens.empty() ? sp : weighted_mean(plan.block_sparsity, plan.block_weights);
  return plan;
}

nlohmann::json to_json(const SparsityPlan& plan) {
  return {{"mode", to_string(plan.mode)},
          {"target", plan.target},
          {"block_sparsity", plan.block_sparsity},
          {"metric", plan.fc},
          {"block_weights", plan.block_weights},
          {"renormalize_iterations", plan.renormalize_iterations},
          {"weighted_mean", plan.weighted_mean}};
}

}  // namespace fang
