#include "fang/calib.hpp"

#include <fstream>
#include <iterator>
#include <random>

#include "fang/errors.hpp"
#include "fang/parallel.hpp"

namespace fang {

namespace {

// Copies the first `cols` columns of src into dst starting at column `offset`.
void place_columns(Matrix& dst, const Matrix& src, Index offset, Index cols) {
  for (Index r = 0; r < src.rows(); ++r)
    for (Index c = 0; c < cols; ++c) dst(r, offset + c) = src(r, c);
}

struct SequenceCapture {
  std::vector<BlockActivations> blocks;
  std::vector<Matrix> grads;
};

void check_calib(const CalibSet& calib) {
  if (calib.sequences.empty()) throw InputError("calibration set is empty");
  for (const auto& s : calib.sequences) {
    if (s.size() < 2 || s.size() != calib.sequences.front().size()) {
      throw InputError("calibration sequences must share a length of at least 2");
    }
  }
}

// Writes forward fields of layers >= from_layer into `out`, allocating them.
void assemble_forward(const std::vector<SequenceCapture>& per_seq, Index seq_len, Index from_layer,
                      std::vector<BlockCapture>& out) {
  const Index cols = seq_len - 1;
  const Index total = cols * per_seq.size();
  for (Index l = from_layer; l < out.size(); ++l) {
    const auto& first = per_seq.front().blocks[l];
    BlockCapture& cap = out[l];
    cap.layer = l;
    cap.block_in = Matrix(first.block_in.rows(), total);
    cap.attn_mix = Matrix(first.attn_mix.rows(), total);
    cap.ffn_input = Matrix(first.ffn_input.rows(), total);
    cap.hidden = Matrix(first.hidden.rows(), total);
    cap.block_out = Matrix(first.block_out.rows(), total);
    for (Index s = 0; s < per_seq.size(); ++s) {
      const auto& b = per_seq[s].blocks[l];
      place_columns(cap.block_in, b.block_in, s * cols, cols);
      place_columns(cap.attn_mix, b.attn_mix, s * cols, cols);
      place_columns(cap.ffn_input, b.ffn_input, s * cols, cols);
      place_columns(cap.hidden, b.hidden, s * cols, cols);
      place_columns(cap.block_out, b.block_out, s * cols, cols);
    }
  }
}

}  // namespace

Tokens tokenize(std::string_view text) {
  Tokens ids;
  ids.reserve(text.size());
  for (char ch : text) ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(ch)) + kByteOffset);
  return ids;
}

std::string detokenize(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId id : tokens) {
    if (id >= kByteOffset && id < static_cast<TokenId>(kByteVocab)) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id - kByteOffset)));
    }
  }
  return out;
}

Tokens load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read corpus '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw InputError("corpus '" + path.string() + "' is empty");
  return tokenize(text);
}

std::vector<Index> calibration_offsets(Index corpus_len, Index n_seqs, Index seq_len,
                                       std::uint64_t seed) {
  if (seq_len == 0 || corpus_len < seq_len) {
    throw InputError("calibration: corpus of " + std::to_string(corpus_len) +
                     " tokens is shorter than seq_len " + std::to_string(seq_len));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, corpus_len - seq_len);
  std::vector<Index> offsets(n_seqs);
  for (auto& o : offsets) o = pick(rng);
  return offsets;
}

CalibSet sample_calibration(std::span<const TokenId> corpus, Index n_seqs, Index seq_len,
                            std::uint64_t seed, std::string source) {
  if (n_seqs == 0) throw InputError("calibration: n_seqs must be positive");
  if (seq_len < 2) throw InputError("calibration: seq_len must be at least 2");
  CalibSet set;
  set.source = std::move(source);
  set.seed = seed;
  set.seq_len = seq_len;
  for (Index off : calibration_offsets(corpus.size(), n_seqs, seq_len, seed)) {
    set.sequences.emplace_back(corpus.begin() + off, corpus.begin() + off + seq_len);
  }
  return set;
}

std::vector<BlockCapture> capture_all(const Checkpoint& ckpt, const CalibSet& calib) {
  check_calib(calib);
  const Index seq_len = calib.sequences.front().size();
  std::vector<SequenceCapture> per_seq(calib.sequences.size());
  parallel_for(calib.sequences.size(), [&](Index s) {
    per_seq[s].blocks = forward(ckpt, calib.sequences[s], true).blocks;
    per_seq[s].grads = loss_and_grads(ckpt, calib.sequences[s]).hidden_grads;
  });

  std::vector<BlockCapture> out(ckpt.layers.size());
  assemble_forward(per_seq, seq_len, 0, out);
  const Index cols = seq_len - 1;
  for (Index l = 0; l < out.size(); ++l) {
    out[l].grad = Matrix(per_seq.front().grads[l].rows(), cols * per_seq.size());
    for (Index s = 0; s < per_seq.size(); ++s) {
      place_columns(out[l].grad, per_seq[s].grads[l], s * cols, cols);
    }
  }
  return out;
}

void refresh_forward(const Checkpoint& ckpt, const CalibSet& calib, Index from_layer,
                     std::vector<BlockCapture>& captures) {
  check_calib(calib);
  if (captures.size() != ckpt.layers.size()) {
    throw InputError("refresh_forward: capture count does not match layer count");
  }
  if (from_layer >= captures.size()) return;
  const Index seq_len = calib.sequences.front().size();
  std::vector<SequenceCapture> per_seq(calib.sequences.size());
  parallel_for(calib.sequences.size(), [&](Index s) {
    per_seq[s].blocks = forward(ckpt, calib.sequences[s], true).blocks;
  });
  assemble_forward(per_seq, seq_len, from_layer, captures);
}

}  // namespace fang
