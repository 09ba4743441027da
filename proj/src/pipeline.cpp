#include "fang/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "fang/errors.hpp"

namespace fang {

using nlohmann::json;

namespace {

[[noreturn]] void rethrow_with_context(const Error& e, const std::string& ctx) {
  const std::string msg = ctx + ": " + e.what();
  if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(msg);
  if (dynamic_cast<const ParameterError*>(&e)) throw ParameterError(msg);
  if (dynamic_cast<const SingularityError*>(&e)) throw SingularityError(msg);
  if (dynamic_cast<const NumericalError*>(&e)) throw NumericalError(msg);
  if (dynamic_cast<const DimensionError*>(&e)) throw DimensionError(msg);
  if (dynamic_cast<const FormatError*>(&e)) throw FormatError(msg);
  if (dynamic_cast<const InputError*>(&e)) throw InputError(msg);
  throw Error(msg);
}

// Runs f, prefixing any library error with the stage name and layer.
template <class F>
auto staged(const std::string& stage, std::optional<Index> layer, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    std::string ctx = "stage '" + stage + "'";
    if (layer) ctx += " layer " + std::to_string(*layer);
    rethrow_with_context(e, ctx);
  }
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("config section '" + section + "': unknown key '" + key + "'");
    }
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& section) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + section + "." + key + "': " + e.what());
  }
}

std::optional<std::string> optional_string(const json& j, const char* key,
                                           const std::string& section) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return get_or<std::string>(j, key, "", section);
}

Propagation propagation_from_string(std::string_view s) {
  if (s == "sequential") return Propagation::kSequential;
  if (s == "oneshot") return Propagation::kOneshot;
  throw ConfigError("unknown propagation '" + std::string(s) + "'");
}

std::string to_string(Propagation p) {
  return p == Propagation::kSequential ? "sequential" : "oneshot";
}

GroupingMode grouping_from_string(std::string_view s) {
  if (s == "fang") return GroupingMode::kFang;
  if (s == "random") return GroupingMode::kRandom;
  throw ConfigError("unknown grouping '" + std::string(s) + "'");
}

std::string to_string(GroupingMode g) { return g == GroupingMode::kFang ? "fang" : "random"; }

AssignSolver solver_from_string(std::string_view s) {
  if (s == "exact") return AssignSolver::kExact;
  if (s == "greedy") return AssignSolver::kGreedy;
  throw ConfigError("unknown assignment solver '" + std::string(s) + "'");
}

std::string to_string(AssignSolver s) { return s == AssignSolver::kExact ? "exact" : "greedy"; }

json mask_json(const UnitMask& mask) {
  json out = json::array();
  for (auto v : mask) out.push_back(static_cast<int>(v));
  return out;
}

Index count_pruned(const UnitMask& mask) {
  return static_cast<Index>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

json alpha_summary(const Matrix& alpha) {
  double lo = 0.0, hi = 0.0, diag = 0.0, row_err = 0.0;
  if (alpha.rows() > 0) {
    lo = hi = alpha(0, 0);
    for (Index r = 0; r < alpha.rows(); ++r) {
      double s = 0.0;
      for (Index c = 0; c < alpha.cols(); ++c) {
        lo = std::min(lo, alpha(r, c));
        hi = std::max(hi, alpha(r, c));
        s += alpha(r, c);
      }
      diag += alpha(r, r);
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
    diag /= static_cast<double>(alpha.rows());
  }
  return {{"min", lo}, {"max", hi}, {"diag_mean", diag}, {"max_row_sum_error", row_err}};
}

// K balanced groups of n/K neurons; the remainder forms the shared set.
NeuronGrouping random_grouping_unshared(Index n, Index k, std::uint64_t seed) {
  if (k == 0 || n < k) throw ConfigError("random grouping: need at least K neurons");
  const Index m = n / k;
  IndexList perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  NeuronGrouping out;
  for (Index g = 0; g < k; ++g) {
    IndexList members(perm.begin() + g * m, perm.begin() + (g + 1) * m);
    std::sort(members.begin(), members.end());
    out.groups.push_back(std::move(members));
  }
  out.shared.assign(perm.begin() + k * m, perm.end());
  std::sort(out.shared.begin(), out.shared.end());
  return out;
}

struct FfnStep {
  PruneResult result;
  json groups_json = json::array();
  Index target = 0;
  Index shortfall = 0;
  std::optional<NeuronGrouping> grouping;
  Labels labels;
  json grouping_json = nullptr;
};

FfnStep prune_ffn_layer(const PruneConfig& pc, const LayerWeights& layer, const BlockCapture& cap,
                        Index target, Index l) {
  FfnStep step;
  step.target = target;
  const BaseMethod base = base_method(pc.method);
  if (!is_fang(pc.method)) {
    step.result = staged("ffn-prune", l, [&] {
      return base == BaseMethod::kObc
                 ? obc_variant_prune_count(layer.w_down, hessian(cap.hidden), target, pc.damping)
                 : flap_prune_count(layer.w_down, cap.hidden, target);
    });
    return step;
  }

  const Index n = layer.n_ffn();
  const Index k = pc.k_groups;
  if (k == 0) throw ConfigError("prune.k_groups must be positive");
  const Index t_total = cap.ffn_input.cols();
  const Index r = std::min({pc.pca_dim, cap.ffn_input.rows(), t_total});

  Stopwatch clock;
  const PcaResult pca = staged("pca", l, [&] { return pca_reduce(cap.ffn_input, r); });
  const ContextClusters clusters =
      staged("cluster", l, [&] { return kmeans(pca.projected, k, pc.seed + l); });
  step.labels = clusters.labels;

  NeuronGrouping grouping;
  const Matrix s = staged("score", l, [&] { return score_matrix(cap.hidden, cap.grad, step.labels, k); });
  staged("assign", l, [&] {
    if (pc.grouping == GroupingMode::kRandom) {
      grouping = pc.shared_group ? random_grouping(n, k, pc.seed + l)
                                 : random_grouping_unshared(n, k, pc.seed + l);
      return;
    }
    const Index m = pc.shared_group ? n / (k + 1) : n / k;
    if (m == 0) throw ConfigError("prune.k_groups too large for " + std::to_string(n) + " neurons");
    const Index shared_size = n - k * m;
    grouping.shared = select_shared_group(s, shared_size);
    grouping.groups = assign_groups(s, grouping.shared, k, m, pc.assignment);
  });
  staged("reweight", l, [&] {
    grouping.distances = centroid_distance_matrix(cap.hidden, step.labels, k);
    grouping.alpha = alpha_weights(grouping.distances, pc.tau, pc.reweight);
  });
  check_partition(grouping, n);

  FfnPruneResult ffn = staged("ffn-prune", l, [&] {
    return fang_prune_ffn(layer.w_down, cap.hidden, step.labels, grouping, target, base,
                          pc.damping);
  });
  step.result = std::move(ffn.result);
  step.shortfall = ffn.shortfall;
  for (const auto& g : ffn.groups) {
    step.groups_json.push_back({{"size", g.size},
                                {"pruned", g.pruned},
                                {"sparsity", g.sparsity},
                                {"error_before", g.error_before},
                                {"error_after", g.error_after}});
  }
  step.grouping_json = {{"pca_dim", r},
                        {"pca_captured_variance", pca.captured_variance},
                        {"pca_total_variance", pca.total_variance},
                        {"kmeans_iterations", clusters.iterations},
                        {"cluster_counts", clusters.counts},
                        {"shared", grouping.shared},
                        {"group_sizes", [&] {
                           std::vector<Index> sizes;
                           for (const auto& g : grouping.groups) sizes.push_back(g.size());
                           return sizes;
                         }()},
                        {"alpha", alpha_summary(grouping.alpha)}};
  step.grouping = std::move(grouping);
  return step;
}

void flatten_into(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object()) {
    for (const auto& [key, value] : j.items()) {
      flatten_into(value, prefix.empty() ? key : prefix + "." + key, out);
    }
  } else {
    out[prefix] = j;
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

Method method_from_string(std::string_view name) {
  if (name == "obc") return Method::kObc;
  if (name == "flap") return Method::kFlap;
  if (name == "fang-obc") return Method::kFangObc;
  if (name == "fang-flap") return Method::kFangFlap;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

std::string to_string(Method method) {
  switch (method) {
    case Method::kObc:
      return "obc";
    case Method::kFlap:
      return "flap";
    case Method::kFangObc:
      return "fang-obc";
    case Method::kFangFlap:
      return "fang-flap";
  }
  return "obc";
}

BaseMethod base_method(Method method) {
  return method == Method::kObc || method == Method::kFangObc ? BaseMethod::kObc
                                                              : BaseMethod::kFlap;
}

bool is_fang(Method method) { return method == Method::kFangObc || method == Method::kFangFlap; }

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  check_keys(j, {"model", "calib", "prune", "eval"}, "root");

  const json model = j.value("model", json::object());
  check_keys(model,
             {"checkpoint", "init_seed", "fit_head_corpus", "n_layers", "d_model", "n_heads",
              "d_head", "n_ffn", "ffn_kind", "vocab", "norm_eps", "rope", "rope_theta"},
             "model");
  c.model.checkpoint = optional_string(model, "checkpoint", "model");
  c.model.fit_head_corpus = optional_string(model, "fit_head_corpus", "model");
  c.model.init_seed = get_or<std::uint64_t>(model, "init_seed", 0, "model");
  json arch = model;
  for (const char* key : {"checkpoint", "init_seed", "fit_head_corpus"}) arch.erase(key);
  c.model.config = model_config_from_json(arch);
  c.model.config.seed = c.model.init_seed;

  const json calib = j.value("calib", json::object());
  check_keys(calib, {"corpus", "n_seqs", "seq_len", "seed"}, "calib");
  c.calib.corpus = get_or(calib, "corpus", c.calib.corpus, "calib");
  c.calib.n_seqs = get_or(calib, "n_seqs", c.calib.n_seqs, "calib");
  c.calib.seq_len = get_or(calib, "seq_len", c.calib.seq_len, "calib");
  c.calib.seed = get_or(calib, "seed", c.calib.seed, "calib");

  const json prune = j.value("prune", json::object());
  check_keys(prune,
             {"sparsity", "method", "k_groups", "tau", "pca_dim", "alloc", "reweight", "grouping",
              "shared_group", "damping", "propagation", "assignment", "seed"},
             "prune");
  auto& p = c.prune;
  p.sparsity = get_or(prune, "sparsity", p.sparsity, "prune");
  p.method = method_from_string(get_or<std::string>(prune, "method", to_string(p.method), "prune"));
  p.k_groups = get_or(prune, "k_groups", p.k_groups, "prune");
  p.tau = get_or(prune, "tau", p.tau, "prune");
  p.pca_dim = get_or(prune, "pca_dim", p.pca_dim, "prune");
  p.alloc = alloc_mode_from_string(get_or<std::string>(prune, "alloc", to_string(p.alloc), "prune"));
  p.reweight = reweight_mode_from_string(
      get_or<std::string>(prune, "reweight", to_string(p.reweight), "prune"));
  p.grouping =
      grouping_from_string(get_or<std::string>(prune, "grouping", to_string(p.grouping), "prune"));
  p.shared_group = get_or(prune, "shared_group", p.shared_group, "prune");
  p.damping = get_or(prune, "damping", p.damping, "prune");
  p.propagation = propagation_from_string(
      get_or<std::string>(prune, "propagation", to_string(p.propagation), "prune"));
  p.assignment = solver_from_string(
      get_or<std::string>(prune, "assignment", to_string(p.assignment), "prune"));
  p.seed = get_or(prune, "seed", p.seed, "prune");

  const json eval = j.value("eval", json::object());
  check_keys(eval, {"corpus", "window"}, "eval");
  c.eval.corpus = get_or(eval, "corpus", c.eval.corpus, "eval");
  c.eval.window = get_or(eval, "window", c.eval.window, "eval");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, path.parent_path().empty() ? "." : path.parent_path());
}

json to_json(const RunConfig& c) {
  json model = to_json(c.model.config);
  model.erase("seed");
  model["init_seed"] = c.model.init_seed;
  model["checkpoint"] = c.model.checkpoint ? json(*c.model.checkpoint) : json(nullptr);
  model["fit_head_corpus"] =
      c.model.fit_head_corpus ? json(*c.model.fit_head_corpus) : json(nullptr);
  const auto& p = c.prune;
  return {{"model", model},
          {"calib",
           {{"corpus", c.calib.corpus},
            {"n_seqs", c.calib.n_seqs},
            {"seq_len", c.calib.seq_len},
            {"seed", c.calib.seed}}},
          {"prune",
           {{"sparsity", p.sparsity},
            {"method", to_string(p.method)},
            {"k_groups", p.k_groups},
            {"tau", p.tau},
            {"pca_dim", p.pca_dim},
            {"alloc", to_string(p.alloc)},
            {"reweight", to_string(p.reweight)},
            {"grouping", to_string(p.grouping)},
            {"shared_group", p.shared_group},
            {"damping", p.damping},
            {"propagation", to_string(p.propagation)},
            {"assignment", to_string(p.assignment)},
            {"seed", p.seed}}},
          {"eval", {{"corpus", c.eval.corpus}, {"window", c.eval.window}}}};
}

std::filesystem::path resolve_path(const RunConfig& config, const std::string& path) {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : config.base_dir / p;
}

Checkpoint build_model(const RunConfig& config) {
  if (config.model.checkpoint) {
    return load_checkpoint(resolve_path(config, *config.model.checkpoint));
  }
  validate(config.model.config);
  Checkpoint ckpt = init_model(config.model.config, config.model.init_seed);
  if (config.model.fit_head_corpus) {
    const Tokens corpus = load_corpus(resolve_path(config, *config.model.fit_head_corpus));
    ckpt = fit_output_head(ckpt, corpus);
  }
  return ckpt;
}

BlockBudget block_budget(const ModelConfig& config, Index n_heads, Index n_ffn, double sp) {
  BlockBudget b;
  if (sp <= 0.0) return b;
  const double p_head = static_cast<double>(params_per_head(config));
  const double p_neuron = static_cast<double>(params_per_neuron(config));
  const double target = sp * (static_cast<double>(n_heads) * p_head +
                              static_cast<double>(n_ffn) * p_neuron);
  double heads = std::round(sp * static_cast<double>(n_heads));
  if (heads * p_head > target) heads = std::floor(target / p_head);
  b.heads = std::min(static_cast<Index>(heads), n_heads > 0 ? n_heads - 1 : 0);
  const double rest = target - static_cast<double>(b.heads) * p_head;
  const double neurons = std::max(0.0, std::round(rest / p_neuron));
  b.neurons = std::min(static_cast<Index>(neurons), n_ffn > 0 ? n_ffn - 1 : 0);
  return b;
}

PruneOutcome run_prune(const RunConfig& config) {
  const Checkpoint dense = staged("model", std::nullopt, [&] { return build_model(config); });
  return run_prune(config, dense);
}

PruneOutcome run_prune(const RunConfig& config, const Checkpoint& dense) {
  Stopwatch total_clock;
  const PruneConfig& pc = config.prune;
  const ModelConfig& mc = dense.config;
  const Index n_layers = dense.layers.size();
  if (!(pc.damping >= 0.0)) throw ConfigError("prune.damping must be non-negative");
  if (pc.k_groups == 0) throw ConfigError("prune.k_groups must be positive");
  if (pc.pca_dim == 0) throw ConfigError("prune.pca_dim must be positive");

  PruneOutcome out;
  out.dense = dense;
  json timing = json::object();

  Stopwatch clock;
  const CalibSet calib = staged("calibration", std::nullopt, [&] {
    const Tokens corpus = load_corpus(resolve_path(config, config.calib.corpus));
    return sample_calibration(corpus, config.calib.n_seqs, config.calib.seq_len,
                              config.calib.seed, config.calib.corpus);
  });
  std::vector<BlockCapture> caps =
      staged("capture", std::nullopt, [&] { return capture_all(dense, calib); });
  timing["capture"] = clock.seconds();

  clock = Stopwatch();
  Vector weights;
  for (Index l = 0; l < n_layers; ++l) weights.push_back(static_cast<double>(dense.block_params(l)));
  FunctionalComplexity fc;
  out.plan = staged("allocation", std::nullopt, [&] {
    fc = functional_complexity(caps);
    if (pc.alloc == AllocMode::kTaylor) return taylor_allocation(caps, pc.sparsity, weights);
    return sparsity_plan(fc.fc, pc.sparsity, pc.alloc, weights);
  });
  timing["allocation"] = clock.seconds();

  Checkpoint working = dense;
  json layers_json = json::array();
  json layer_times = json::array();
  Index removed_total = 0;
  Index prunable_total = 0;
  Index shortfall_total = 0;
  const Index p_head = params_per_head(mc);
  const Index p_neuron = params_per_neuron(mc);
  const bool sequential = pc.propagation == Propagation::kSequential;

  for (Index l = 0; l < n_layers; ++l) {
    Stopwatch layer_clock;
    if (sequential && l > 0) {
      staged("refresh", l, [&] { refresh_forward(working, calib, l, caps); });
    }
    const Index n_heads = working.n_heads(l);
    const Index n_ffn = working.layers[l].n_ffn();
    const double sp_l = out.plan.block_sparsity[l];
    const BlockBudget budget = block_budget(mc, n_heads, n_ffn, sp_l);

    LayerOutcome lo;
    json row;
    row["layer"] = l;
    row["target_sparsity"] = sp_l;
    row["fc"] = fc.fc[l];
    row["fc_skipped_columns"] = fc.skipped_columns[l];

    HeadPruneResult heads = staged("head-prune", l, [&] {
      return prune_heads(working.layers[l].wo, caps[l].attn_mix, mc.d_head, budget.heads,
                         base_method(pc.method), pc.damping);
    });
    lo.head_mask = heads.head_mask;
    if (budget.heads > 0) {
      working.layers[l].wo = heads.result.new_weights;
      std::optional<std::span<const double>> bias;
      if (heads.result.bias) bias = std::span<const double>(*heads.result.bias);
      working = apply_head_mask(working, l, heads.head_mask, bias);
      if (sequential) staged("refresh", l, [&] { refresh_forward(working, calib, l, caps); });
    }

    FfnStep ffn = prune_ffn_layer(pc, working.layers[l], caps[l], budget.neurons, l);
    lo.neuron_mask = ffn.result.mask;
    lo.grouping = ffn.grouping;
    lo.labels = ffn.labels;
    if (budget.neurons > 0) {
      working.layers[l].w_down = ffn.result.new_weights;
      std::optional<std::span<const double>> bias;
      if (ffn.result.bias) bias = std::span<const double>(*ffn.result.bias);
      working = apply_neuron_mask(working, l, ffn.result.mask, bias);
    }

    const Index heads_pruned = count_pruned(lo.head_mask);
    const Index neurons_pruned = count_pruned(lo.neuron_mask);
    const Index removed = heads_pruned * p_head + neurons_pruned * p_neuron;
    const Index prunable = dense.block_params(l);
    removed_total += removed;
    prunable_total += prunable;
    shortfall_total += ffn.shortfall;

    row["heads_total"] = n_heads;
    row["heads_pruned"] = heads_pruned;
    row["neurons_total"] = n_ffn;
    row["neurons_target"] = ffn.target;
    row["neurons_pruned"] = neurons_pruned;
    row["shortfall"] = ffn.shortfall;
    row["realized_sparsity"] = static_cast<double>(removed) / static_cast<double>(prunable);
    row["head_scores"] = heads.head_scores;
    row["head_error_before"] = heads.result.recon_error_before;
    row["head_error_after"] = heads.result.recon_error_after;
    row["ffn_error_before"] = ffn.result.recon_error_before;
    row["ffn_error_after"] = ffn.result.recon_error_after;
    row["head_mask"] = mask_json(lo.head_mask);
    row["neuron_mask"] = mask_json(lo.neuron_mask);
    row["groups"] = ffn.groups_json;
    row["grouping"] = ffn.grouping_json;
    layers_json.push_back(std::move(row));
    layer_times.push_back(layer_clock.seconds());
    out.layers.push_back(std::move(lo));
  }
  timing["layers"] = layer_times;
  out.pruned = std::move(working);

  clock = Stopwatch();
  const Tokens eval_corpus = staged("eval", std::nullopt, [&] {
    return load_corpus(resolve_path(config, config.eval.corpus));
  });
  const PerplexityResult ppl_dense = staged("eval", std::nullopt, [&] {
    return perplexity(out.dense, eval_corpus, config.eval.window);
  });
  const PerplexityResult ppl_pruned = staged("eval", std::nullopt, [&] {
    return perplexity(out.pruned, eval_corpus, config.eval.window);
  });
  if (!std::isfinite(ppl_pruned.perplexity)) {
    throw NumericalError("stage 'eval': pruned perplexity is not finite");
  }
  timing["eval"] = clock.seconds();
  timing["total"] = total_clock.seconds();

  json& r = out.report;
  r["schema_version"] = kReportSchemaVersion;
  r["config"] = to_json(config);
  r["model_config"] = to_json(mc);
  json plan = to_json(out.plan);
  plan["metric_name"] = pc.alloc == AllocMode::kTaylor ? "taylor_sensitivity" : "fc";
  if (pc.alloc == AllocMode::kTaylor) {
    plan["note"] = "sensitivity T = mean|h * dL/dh| per block; low T prunes more";
  }
  r["plan"] = plan;
  r["fc"] = fc.fc;
  r["layers"] = layers_json;
  r["assignment_solver"] = to_string(pc.assignment);
  r["calibration"] = {{"source", calib.source},
                      {"n_seqs", calib.sequences.size()},
                      {"seq_len", calib.seq_len},
                      {"seed", calib.seed},
                      {"tokens", caps.empty() ? 0 : caps[0].hidden.cols()}};
  const Index dense_params = out.dense.total_params();
  const Index pruned_params = out.pruned.total_params();
  r["params"] = {{"dense", dense_params},
                 {"pruned", pruned_params},
                 {"reduction",
                  1.0 - static_cast<double>(pruned_params) / static_cast<double>(dense_params)},
                 {"prunable_dense", prunable_total},
                 {"prunable_removed", removed_total}};
  r["realized_sparsity"] =
      prunable_total == 0 ? 0.0
                          : static_cast<double>(removed_total) / static_cast<double>(prunable_total);
  r["shortfall"] = shortfall_total;
  r["perplexity"] = {{"dense", ppl_dense.perplexity},
                     {"pruned", ppl_pruned.perplexity},
                     {"tokens", ppl_pruned.predicted_tokens}};
  r["timing"] = timing;
  return out;
}

Checkpoint random_mask_control(const Checkpoint& dense, const PruneOutcome& reference,
                               std::uint64_t seed) {
  Checkpoint ckpt = dense;
  auto random_mask = [](Index n, Index count, std::mt19937_64& rng) {
    UnitMask mask(n, 0);
    IndexList perm(n);
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (Index i = 0; i < count; ++i) mask[perm[i]] = 1;
    return mask;
  };
  for (Index l = 0; l < reference.layers.size(); ++l) {
    std::mt19937_64 rng(seed * 1000003ULL + l);
    const auto& lo = reference.layers[l];
    const Index heads = count_pruned(lo.head_mask);
    const Index neurons = count_pruned(lo.neuron_mask);
    if (heads > 0) ckpt = apply_head_mask(ckpt, l, random_mask(ckpt.n_heads(l), heads, rng));
    if (neurons > 0) {
      ckpt = apply_neuron_mask(ckpt, l, random_mask(ckpt.layers[l].n_ffn(), neurons, rng));
    }
  }
  return ckpt;
}

void write_outputs(const PruneOutcome& outcome, const std::filesystem::path& out_dir) {
  const auto ckpt_path = out_dir / "pruned.fang";
  const auto report_path = out_dir / "report.json";
  try {
    std::filesystem::create_directories(out_dir);
    save_checkpoint(outcome.pruned, ckpt_path);
    std::ofstream out(report_path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + report_path.string() + "'");
    out << outcome.report.dump(2) << '\n';
    if (!out) throw InputError("failed writing '" + report_path.string() + "'");
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(ckpt_path, ec);
    std::filesystem::remove(report_path, ec);
    throw;
  }
}

json strip_timing(json report) {
  report.erase("timing");
  return report;
}

std::string render_report(const json& report) {
  if (!report.is_object() || !report.contains("schema_version")) {
    throw FormatError("report: missing schema_version");
  }
  const json& version = report.at("schema_version");
  if (!version.is_number_integer() || version.get<int>() != kReportSchemaVersion) {
    throw FormatError("report: schema_version " + version.dump() + " is not supported (expected " +
                      std::to_string(kReportSchemaVersion) + ")");
  }
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%5s %10s %10s %10s %7s %9s %12s %12s %12s %12s\n", "layer",
                "target_sp", "realized", "fc", "heads", "neurons", "head_err_b", "head_err_a",
                "ffn_err_b", "ffn_err_a");
  os << line;
  const json layers = report.value("layers", json::array());
  try {
    for (const auto& row : layers) {
      std::snprintf(line, sizeof(line), "%5s %10s %10s %10s %7s %9s %12s %12s %12s %12s\n",
                    std::to_string(row.at("layer").get<Index>()).c_str(),
                    fmt(row.at("target_sparsity").get<double>()).c_str(),
                    fmt(row.at("realized_sparsity").get<double>()).c_str(),
                    fmt(row.at("fc").get<double>()).c_str(),
                    (std::to_string(row.at("heads_pruned").get<Index>()) + "/" +
                     std::to_string(row.at("heads_total").get<Index>()))
                        .c_str(),
                    (std::to_string(row.at("neurons_pruned").get<Index>()) + "/" +
                     std::to_string(row.at("neurons_total").get<Index>()))
                        .c_str(),
                    fmt(row.at("head_error_before").get<double>()).c_str(),
                    fmt(row.at("head_error_after").get<double>()).c_str(),
                    fmt(row.at("ffn_error_before").get<double>()).c_str(),
                    fmt(row.at("ffn_error_after").get<double>()).c_str());
      os << line;
    }
    if (report.contains("realized_sparsity")) {
      os << "\nrealized sparsity: " << fmt(report.at("realized_sparsity").get<double>()) << '\n';
    }
    if (report.contains("params")) {
      const json& p = report.at("params");
      os << "params: " << p.at("dense").get<Index>() << " -> " << p.at("pruned").get<Index>()
         << " (reduction " << fmt(p.at("reduction").get<double>()) << ")\n";
    }
    if (report.contains("perplexity")) {
      const json& p = report.at("perplexity");
      os << "perplexity: dense " << fmt(p.at("dense").get<double>()) << ", pruned "
         << fmt(p.at("pruned").get<double>()) << '\n';
    }
    if (report.contains("config")) {
      std::map<std::string, json> actual, defaults;
      flatten_into(report.at("config"), "", actual);
      flatten_into(to_json(RunConfig{}), "", defaults);
      os << "\nconfig delta from defaults:\n";
      bool any = false;
      for (const auto& [key, value] : actual) {
        auto it = defaults.find(key);
        if (it != defaults.end() && it->second == value) continue;
        os << "  " << key << " = " << value.dump();
        if (it != defaults.end()) os << " (default " << it->second.dump() << ")";
        os << '\n';
        any = true;
      }
      if (!any) os << "  (none)\n";
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: malformed field: ") + e.what());
  }
  return os.str();
}

}  // namespace fang
