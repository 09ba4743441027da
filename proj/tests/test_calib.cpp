#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "fang/calib.hpp"
#include "fang/errors.hpp"
#include "testing.hpp"

using namespace fang;
using namespace fang::testing;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
  const auto path = std::filesystem::temp_directory_path() / ("fang_test_" + name);
  std::ofstream(path, std::ios::binary) << text;
  return path;
}

// Hidden/forward fields of layer l for one sequence, with the last column dropped.
Matrix drop_last(const Matrix& m) {
  Matrix out(m.rows(), m.cols() - 1);
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c + 1 < m.cols(); ++c) out(r, c) = m(r, c);
  return out;
}

}  // namespace

TEST(Tokenizer, BytesOffsetBySpecials) {
  EXPECT_EQ(tokenize("ab"), (Tokens{97 + kByteOffset, 98 + kByteOffset}));
}

TEST(Tokenizer, RoundTripRandomBytes) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s(rng() % 64, '\0');
    for (char& c : s) c = static_cast<char>(rng() % 256);
    EXPECT_EQ(detokenize(tokenize(s)), s);
  }
}

TEST(LoadCorpus, DeterministicAndEmptyRejected) {
  const auto path = write_temp("corpus.txt", "hello corpus");
  EXPECT_EQ(load_corpus(path), load_corpus(path));
  EXPECT_EQ(load_corpus(path).size(), 12u);
  const auto empty = write_temp("empty.txt", "");
  EXPECT_THROW(load_corpus(empty), InputError);
  EXPECT_THROW(load_corpus("/nonexistent/fang/corpus.txt"), InputError);
}

TEST(SampleCalibration, ForcedWindowAndDeterminism) {
  const Tokens corpus = tokenize("abcdefghij");
  const CalibSet one = sample_calibration(corpus, 1, 10, 5);
  ASSERT_EQ(one.sequences.size(), 1u);
  EXPECT_EQ(one.sequences[0], corpus);

  std::mt19937_64 rng(2);
  const Tokens big = random_tokens(5000, 259, rng);
  const CalibSet a = sample_calibration(big, 8, 64, 42);
  const CalibSet b = sample_calibration(big, 8, 64, 42);
  EXPECT_EQ(a.sequences, b.sequences);
  for (const auto& s : a.sequences) EXPECT_EQ(s.size(), 64u);
  EXPECT_THROW(sample_calibration(corpus, 1, 11, 0), InputError);
}

TEST(SampleCalibration, OffsetsCoverCorpusDeciles) {
  const Index len = 10000, seq = 100;
  const auto offsets = calibration_offsets(len, 1000, seq, 7);
  std::set<Index> deciles;
  for (Index o : offsets) {
    ASSERT_LE(o, len - seq);
    deciles.insert(o * 10 / (len - seq + 1));
  }
  EXPECT_GE(deciles.size(), 8u);
}

TEST(CaptureAll, ShapesAndRecomputedHidden) {
  std::mt19937_64 rng(3);
  const Checkpoint ckpt = init_model(small_config(), 4);
  CalibSet calib;
  calib.sequences = {random_tokens(8, 259, rng)};
  calib.seq_len = 8;
  const auto caps = capture_all(ckpt, calib);
  ASSERT_EQ(caps.size(), 2u);
  for (const auto& c : caps) {
    EXPECT_EQ(c.hidden.cols(), 7u);
    EXPECT_EQ(c.grad.cols(), 7u);
    EXPECT_EQ(c.ffn_input.cols(), 7u);
    EXPECT_EQ(c.block_in.cols(), 7u);
    EXPECT_EQ(c.attn_mix.rows(), 32u);
  }
  const auto fwd = forward(ckpt, calib.sequences[0], true);
  EXPECT_EQ(caps[1].hidden, drop_last(fwd.blocks[1].hidden));
  const auto g = loss_and_grads(ckpt, calib.sequences[0]);
  EXPECT_EQ(caps[1].grad, g.hidden_grads[1]);
}

TEST(CaptureAll, TwoSequencesConcatenate) {
  std::mt19937_64 rng(4);
  const Checkpoint ckpt = init_model(small_config(), 5);
  CalibSet both;
  both.sequences = {random_tokens(6, 259, rng), random_tokens(6, 259, rng)};
  both.seq_len = 6;
  CalibSet first = both, second = both;
  first.sequences = {both.sequences[0]};
  second.sequences = {both.sequences[1]};
  const auto cb = capture_all(ckpt, both);
  const auto c1 = capture_all(ckpt, first);
  const auto c2 = capture_all(ckpt, second);
  for (Index l = 0; l < cb.size(); ++l) {
    EXPECT_EQ(cb[l].hidden, hconcat(c1[l].hidden, c2[l].hidden));
    EXPECT_EQ(cb[l].grad, hconcat(c1[l].grad, c2[l].grad));
    EXPECT_EQ(cb[l].block_out, hconcat(c1[l].block_out, c2[l].block_out));
  }
}

TEST(RefreshForward, NoOpOnUnprunedModel) {
  std::mt19937_64 rng(5);
  const Checkpoint ckpt = init_model(small_config(), 6);
  const CalibSet calib = sample_calibration(random_tokens(500, 259, rng), 3, 16, 1);
  const auto caps = capture_all(ckpt, calib);
  auto refreshed = caps;
  refresh_forward(ckpt, calib, 0, refreshed);
  for (Index l = 0; l < caps.size(); ++l) {
    EXPECT_EQ(refreshed[l].hidden, caps[l].hidden);
    EXPECT_EQ(refreshed[l].block_out, caps[l].block_out);
  }
}

TEST(RefreshForward, ZeroedBlockPassesResidualThrough) {
  std::mt19937_64 rng(6);
  Checkpoint ckpt = init_model(small_config(), 7);
  const CalibSet calib = sample_calibration(random_tokens(500, 259, rng), 2, 16, 2);
  auto caps = capture_all(ckpt, calib);
  auto& w = ckpt.layers[0];
  w.wo = Matrix(w.wo.rows(), w.wo.cols());
  w.w_down = Matrix(w.w_down.rows(), w.w_down.cols());
  refresh_forward(ckpt, calib, 0, caps);
  EXPECT_EQ(caps[1].block_in, caps[0].block_in);
}

TEST(RefreshForward, MatchesFullRecaptureAndKeepsGradients) {
  std::mt19937_64 rng(7);
  const Checkpoint dense = init_model(small_config(), 8);
  const CalibSet calib = sample_calibration(random_tokens(500, 259, rng), 3, 16, 3);
  auto caps = capture_all(dense, calib);
  const auto grads_before = caps[1].grad;
  UnitMask mask(48, 0);
  for (Index j = 0; j < 48; j += 3) mask[j] = 1;
  const Checkpoint pruned =
      apply_neuron_mask(apply_head_mask(dense, 0, UnitMask{0, 1, 0, 0}), 0, mask);
  refresh_forward(pruned, calib, 0, caps);
  const auto full = capture_all(pruned, calib);
  for (Index l = 0; l < caps.size(); ++l) {
    EXPECT_LE(max_abs_diff(caps[l].hidden, full[l].hidden), 1e-10);
    EXPECT_LE(max_abs_diff(caps[l].ffn_input, full[l].ffn_input), 1e-10);
    EXPECT_LE(max_abs_diff(caps[l].block_out, full[l].block_out), 1e-10);
    EXPECT_LE(max_abs_diff(caps[l].attn_mix, full[l].attn_mix), 1e-10);
  }
  EXPECT_EQ(caps[1].grad, grads_before);
}
