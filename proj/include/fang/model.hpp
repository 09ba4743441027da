#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "fang/numcore.hpp"

namespace fang {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;
// Per-unit pruning mask; 1 = pruned.
using UnitMask = std::vector<std::uint8_t>;

enum class FfnKind { kPlain, kGated };

struct ModelConfig {
  Index n_layers = 4;
  Index d_model = 64;
  Index n_heads = 4;
  Index d_head = 16;
  Index n_ffn = 192;
  FfnKind ffn_kind = FfnKind::kGated;
  Index vocab = 259;
  double norm_eps = 1e-5;
  std::uint64_t seed = 0;
  bool rope = false;
  double rope_theta = 10000.0;
};

// Throws ConfigError when dimensions are inconsistent.
void validate(const ModelConfig& config);
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Weights of one pre-norm block. Head i of the attention owns rows
// [i·d_head, (i+1)·d_head) of wq/wk/wv and the same column block of wo.
struct LayerWeights {
  Vector attn_norm;  // d
  Matrix wq;         // (heads·d_head)×d
  Matrix wk;
  Matrix wv;
  Matrix wo;         // d×(heads·d_head)
  Vector b_o;        // d; compensation bias for pruned heads
  Vector ffn_norm;   // d
  Matrix w_gate;     // N_n×d, empty for the plain FFN
  Matrix w_up;       // N_n×d
  Matrix w_down;     // d×N_n
  Vector b_down;     // d; compensation bias for pruned neurons

  Index attn_width() const { return wo.cols(); }
  Index n_ffn() const { return w_up.rows(); }
};

struct Checkpoint {
  ModelConfig config;
  Matrix tok_emb;  // vocab×d
  std::vector<LayerWeights> layers;
  Vector final_norm;
  Matrix lm_head;  // vocab×d

  Index n_heads(Index layer) const;
  // Prunable parameters of a block: q/k/v/o for every head plus
  // up/(gate)/down for every neuron.
  Index block_params(Index layer) const;
  Index total_params() const;
  bool operator==(const Checkpoint& other) const;
};

Index params_per_head(const ModelConfig& config);
Index params_per_neuron(const ModelConfig& config);

// Scaled-Gaussian initialization; bit-identical for a fixed (config, seed).
Checkpoint init_model(const ModelConfig& config, std::uint64_t seed);

// Activations of one block for one sequence; columns are token positions.
struct BlockActivations {
  Matrix block_in;   // d×T, residual stream entering the block
  Matrix attn_mix;   // (heads·d_head)×T, concatenated head outputs (input of wo)
  Matrix ffn_input;  // d×T, normalized stream fed to w_up / w_gate
  Matrix hidden;     // N_n×T, input of w_down
  Matrix block_out;  // d×T
};

struct ForwardResult {
  Matrix logits;  // vocab×T
  std::vector<BlockActivations> blocks;  // filled when capture is requested
};

// Additive perturbation of one hidden activation, used to replay the
// remainder of the graph for finite-difference checks.
struct HiddenNudge {
  Index layer = 0;
  Index neuron = 0;
  Index position = 0;
  double delta = 0.0;
};

ForwardResult forward(const Checkpoint& ckpt, std::span<const TokenId> tokens, bool capture,
                      std::optional<HiddenNudge> nudge = std::nullopt);

// Mean next-token negative log-likelihood over positions 0..T-2.
double next_token_nll(const Matrix& logits, std::span<const TokenId> tokens);

struct LossGrads {
  double nll = 0.0;
  std::vector<Matrix> hidden_grads;  // per layer N_n×(T-1): dL/dh
};

LossGrads loss_and_grads(const Checkpoint& ckpt, std::span<const TokenId> tokens);

// Physically removes pruned heads (mask length = current head count).
Checkpoint apply_head_mask(const Checkpoint& ckpt, Index layer, const UnitMask& mask,
                           std::optional<std::span<const double>> bias = std::nullopt);
// Physically removes pruned neurons and adds `bias` into b_down.
Checkpoint apply_neuron_mask(const Checkpoint& ckpt, Index layer, const UnitMask& mask,
                             std::optional<std::span<const double>> bias = std::nullopt);

// exp(mean next-token NLL) over non-overlapping windows of `window` tokens; a
// trailing window shorter than 2 tokens is dropped.
struct PerplexityResult {
  double perplexity = 0.0;
  Index predicted_tokens = 0;
};
PerplexityResult perplexity(const Checkpoint& ckpt, std::span<const TokenId> corpus,
                            Index window = 128);

// Closed-form ridge fit of lm_head to smoothed bigram log-probabilities of
// `corpus`, measured on the model's final normalized states. Gives the
// randomly initialized reference model a non-trivial language-model head.
Checkpoint fit_output_head(const Checkpoint& ckpt, std::span<const TokenId> corpus,
                           Index window = 128, double ridge = 1e-3);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fang
