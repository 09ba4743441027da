#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fang/allocate.hpp"
#include "fang/calib.hpp"
#include "fang/grouping.hpp"
#include "fang/model.hpp"
#include "fang/pruners.hpp"

namespace fang {

enum class Method { kObc, kFlap, kFangObc, kFangFlap };
enum class Propagation { kSequential, kOneshot };
enum class GroupingMode { kFang, kRandom };

Method method_from_string(std::string_view name);
std::string to_string(Method method);
BaseMethod base_method(Method method);
bool is_fang(Method method);

struct ModelSource {
  std::optional<std::string> checkpoint;  // archive path; wins over init
  ModelConfig config;
  std::uint64_t init_seed = 0;
  // When set, lm_head is refit on this corpus after initialization.
  std::optional<std::string> fit_head_corpus;
};

struct CalibConfig {
  std::string corpus = "data/train.txt";
  Index n_seqs = 8;
  Index seq_len = 128;
  std::uint64_t seed = 0;
};

struct PruneConfig {
  double sparsity = 0.3;
  Method method = Method::kFangObc;
  Index k_groups = 7;
  double tau = 9.0;
  Index pca_dim = 64;
  AllocMode alloc = AllocMode::kFc;
  ReweightMode reweight = ReweightMode::kOurs;
  GroupingMode grouping = GroupingMode::kFang;
  bool shared_group = true;
  double damping = kDefaultDamping;
  Propagation propagation = Propagation::kSequential;
  AssignSolver assignment = AssignSolver::kExact;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  std::string corpus = "data/eval.txt";
  Index window = 128;
};

struct RunConfig {
  ModelSource model;
  CalibConfig calib;
  PruneConfig prune;
  EvalConfig eval;
  // Relative paths in the config resolve against this directory.
  std::filesystem::path base_dir = ".";
};

// Missing keys take the defaults above; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j,
                               const std::filesystem::path& base_dir = ".");
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);
std::filesystem::path resolve_path(const RunConfig& config, const std::string& path);

Checkpoint build_model(const RunConfig& config);

inline constexpr int kReportSchemaVersion = 1;

struct LayerOutcome {
  UnitMask head_mask;
  UnitMask neuron_mask;
  std::optional<NeuronGrouping> grouping;  // fang methods only
  Labels labels;
};

struct PruneOutcome {
  Checkpoint dense;
  Checkpoint pruned;
  SparsityPlan plan;
  std::vector<LayerOutcome> layers;
  nlohmann::json report;
};

// Head and neuron counts a block of the dense model gives up at sparsity sp:
// heads = round(sp·N_h) (at most N_h - 1); the FFN absorbs the rest of the
// block's parameter budget.
struct BlockBudget {
  Index heads = 0;
  Index neurons = 0;
};
BlockBudget block_budget(const ModelConfig& config, Index n_heads, Index n_ffn, double sp);

// capture -> allocation -> per block (head prune -> grouping -> FFN prune ->
// refresh) -> evaluation. Deterministic for a fixed config.
PruneOutcome run_prune(const RunConfig& config);
// Same as run_prune but on an already materialized dense checkpoint.
PruneOutcome run_prune(const RunConfig& config, const Checkpoint& dense);

// Random head/neuron masks with the per-layer counts of `reference`, no
// compensation. Used as the control for pruning quality.
Checkpoint random_mask_control(const Checkpoint& dense, const PruneOutcome& reference,
                               std::uint64_t seed);

// Writes pruned.fang and report.json into out_dir; removes both on failure.
void write_outputs(const PruneOutcome& outcome, const std::filesystem::path& out_dir);

// Report without wall-clock fields, for reproducibility comparisons.
nlohmann::json strip_timing(nlohmann::json report);

// Human-readable per-layer table plus the config delta from defaults.
// Throws FormatError on a schema version mismatch.
std::string render_report(const nlohmann::json& report);

}  // namespace fang
