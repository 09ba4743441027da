#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fang/model.hpp"
#include "fang/numcore.hpp"

namespace fang {

// Byte-level tokenizer: ids 0..2 are reserved specials, byte b maps to b + 3.
inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kBosToken = 1;
inline constexpr TokenId kEosToken = 2;
inline constexpr TokenId kByteOffset = 3;
inline constexpr Index kByteVocab = 259;

Tokens tokenize(std::string_view text);
// Special tokens are dropped.
std::string detokenize(std::span<const TokenId> tokens);
Tokens load_corpus(const std::filesystem::path& path);

struct CalibSet {
  std::vector<Tokens> sequences;
  std::string source;
  std::uint64_t seed = 0;
  Index seq_len = 0;
};

// n_seqs windows at uniformly drawn start offsets in [0, corpus - seq_len].
CalibSet sample_calibration(std::span<const TokenId> corpus, Index n_seqs, Index seq_len,
                            std::uint64_t seed, std::string source = {});
// Start offsets the sampler would draw; exposed for distribution checks.
std::vector<Index> calibration_offsets(Index corpus_len, Index n_seqs, Index seq_len,
                                       std::uint64_t seed);

// One layer's calibration record. Every field has T_total = n_seqs·(seq_len-1)
// columns; column t of each field refers to the same (sequence, position).
struct BlockCapture {
  Index layer = 0;
  Matrix block_in;   // d×T
  Matrix attn_mix;   // (heads·d_head)×T, input of wo
  Matrix ffn_input;  // d×T
  Matrix hidden;     // N_n×T
  Matrix grad;       // N_n×T, dense-model dL/dh snapshot
  Matrix block_out;  // d×T
};

// Forward + backward captures on `ckpt`. The gradient of sequence s is taken
// from that sequence's own mean next-token loss.
std::vector<BlockCapture> capture_all(const Checkpoint& ckpt, const CalibSet& calib);

// Recomputes the forward fields of layers >= from_layer through the (partially
// pruned) checkpoint. Gradient snapshots are left untouched.
void refresh_forward(const Checkpoint& ckpt, const CalibSet& calib, Index from_layer,
                     std::vector<BlockCapture>& captures);

}  // namespace fang
