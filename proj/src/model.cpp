#include "fang/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "fang/archive.hpp"
#include "fang/errors.hpp"

namespace fang {

namespace {

using nlohmann::json;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu(double x) { return x * sigmoid(x); }
double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

// y[:,t] = g ∘ x[:,t] / rms(x[:,t]); returns y and stores 1/rms per column.
Matrix rms_norm(const Matrix& x, std::span<const double> gain, double eps, Vector* inv_rms) {
  const Index d = x.rows();
  const Index t_len = x.cols();
  Matrix y(d, t_len);
  if (inv_rms) inv_rms->assign(t_len, 0.0);
  for (Index t = 0; t < t_len; ++t) {
    double ss = 0.0;
    for (Index i = 0; i < d; ++i) ss += x(i, t) * x(i, t);
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    if (inv_rms) (*inv_rms)[t] = r;
    for (Index i = 0; i < d; ++i) y(i, t) = gain[i] * x(i, t) * r;
  }
  return y;
}

Matrix rms_norm_backward(const Matrix& x, std::span<const double> gain, const Vector& inv_rms,
                         const Matrix& dy) {
  const Index d = x.rows();
  Matrix dx(d, x.cols());
  for (Index t = 0; t < x.cols(); ++t) {
    const double r = inv_rms[t];
    double s = 0.0;
    for (Index i = 0; i < d; ++i) s += gain[i] * dy(i, t) * x(i, t);
    const double coef = r * r * r * s / static_cast<double>(d);
    for (Index i = 0; i < d; ++i) dx(i, t) = r * gain[i] * dy(i, t) - coef * x(i, t);
  }
  return dx;
}

// Rotates consecutive channel pairs within each head by position-dependent
// angles. `inverse` applies the transpose rotation (used by the backward pass).
void apply_rope(Matrix& m, Index d_head, double theta, bool inverse) {
  const Index heads = m.rows() / d_head;
  for (Index h = 0; h < heads; ++h) {
    for (Index p = 0; p + 1 < d_head; p += 2) {
      const double freq = std::pow(theta, -static_cast<double>(p) / static_cast<double>(d_head));
      const Index i0 = h * d_head + p;
      const Index i1 = i0 + 1;
      for (Index t = 0; t < m.cols(); ++t) {
        const double ang = static_cast<double>(t) * freq;
        const double c = std::cos(ang);
        const double s = inverse ? -std::sin(ang) : std::sin(ang);
        const double a = m(i0, t);
        const double b = m(i1, t);
        m(i0, t) = a * c - b * s;
        m(i1, t) = a * s + b * c;
      }
    }
  }
}

struct BlockCache {
  Matrix x_in;
  Vector attn_rms;
  Matrix a;  // normalized block input
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T×T lower-triangular
  Matrix z;
  Matrix x_mid;
  Vector ffn_rms;
  Matrix f;
  Matrix gate_pre;
  Matrix up_pre;
  Matrix h;
  Matrix x_out;
};

struct Trace {
  std::vector<BlockCache> blocks;
  Matrix x_final;
  Vector final_rms;
  Matrix y_final;
  Matrix logits;
};

void add_bias_columns(Matrix& m, std::span<const double> bias) {
  for (Index i = 0; i < m.rows(); ++i) {
    if (bias[i] == 0.0) continue;
    for (double& v : m.row(i)) v += bias[i];
  }
}

Trace run_forward(const Checkpoint& ckpt, std::span<const TokenId> tokens,
                  const std::optional<HiddenNudge>& nudge) {
  const auto& cfg = ckpt.config;
  const Index d = cfg.d_model;
  const Index t_len = tokens.size();
  for (Index t = 0; t < t_len; ++t) {
    if (tokens[t] < 0 || static_cast<Index>(tokens[t]) >= cfg.vocab) {
      throw InputError("forward: token id " + std::to_string(tokens[t]) + " at position " +
                       std::to_string(t) + " is outside vocab of " + std::to_string(cfg.vocab));
    }
  }
  if (nudge && (nudge->layer >= ckpt.layers.size() || nudge->position >= t_len ||
                nudge->neuron >= ckpt.layers[nudge->layer].n_ffn())) {
    throw InputError("forward: hidden nudge index out of range");
  }

  Trace tr;
  Matrix x(d, t_len);
  for (Index t = 0; t < t_len; ++t) {
    const auto emb = ckpt.tok_emb.row(static_cast<Index>(tokens[t]));
    for (Index i = 0; i < d; ++i) x(i, t) = emb[i];
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  tr.blocks.reserve(ckpt.layers.size());
  for (Index l = 0; l < ckpt.layers.size(); ++l) {
    const LayerWeights& w = ckpt.layers[l];
    BlockCache c;
    c.x_in = x;
    c.a = rms_norm(x, w.attn_norm, cfg.norm_eps, &c.attn_rms);
    c.q = matmul(w.wq, c.a);
    c.k = matmul(w.wk, c.a);
    c.v = matmul(w.wv, c.a);
    if (cfg.rope) {
      apply_rope(c.q, cfg.d_head, cfg.rope_theta, false);
      apply_rope(c.k, cfg.d_head, cfg.rope_theta, false);
    }
    const Index heads = ckpt.n_heads(l);
    c.z = Matrix(w.attn_width(), t_len);
    c.probs.assign(heads, Matrix(t_len, t_len));
    for (Index hd = 0; hd < heads; ++hd) {
      const Index base = hd * cfg.d_head;
      Matrix& p = c.probs[hd];
      for (Index t = 0; t < t_len; ++t) {
        double mx = -INFINITY;
        for (Index u = 0; u <= t; ++u) {
          double s = 0.0;
          for (Index ch = 0; ch < cfg.d_head; ++ch) s += c.q(base + ch, t) * c.k(base + ch, u);
          p(t, u) = s * inv_sqrt_dh;
          mx = std::max(mx, p(t, u));
        }
        double denom = 0.0;
        for (Index u = 0; u <= t; ++u) {
          p(t, u) = std::exp(p(t, u) - mx);
          denom += p(t, u);
        }
        for (Index u = 0; u <= t; ++u) p(t, u) /= denom;
        for (Index ch = 0; ch < cfg.d_head; ++ch) {
          double acc = 0.0;
          for (Index u = 0; u <= t; ++u) acc += p(t, u) * c.v(base + ch, u);
          c.z(base + ch, t) = acc;
        }
      }
    }
    c.x_mid = add(x, matmul(w.wo, c.z));
    add_bias_columns(c.x_mid, w.b_o);

    c.f = rms_norm(c.x_mid, w.ffn_norm, cfg.norm_eps, &c.ffn_rms);
    c.up_pre = matmul(w.w_up, c.f);
    c.h = Matrix(c.up_pre.rows(), t_len);
    if (cfg.ffn_kind == FfnKind::kGated) {
      c.gate_pre = matmul(w.w_gate, c.f);
      for (Index i = 0; i < c.h.size(); ++i) {
        c.h.data()[i] = silu(c.gate_pre.data()[i]) * c.up_pre.data()[i];
      }
    } else {
      for (Index i = 0; i < c.h.size(); ++i) c.h.data()[i] = silu(c.up_pre.data()[i]);
    }
    if (nudge && nudge->layer == l) c.h(nudge->neuron, nudge->position) += nudge->delta;

    c.x_out = add(c.x_mid, matmul(w.w_down, c.h));
    add_bias_columns(c.x_out, w.b_down);
    x = c.x_out;
    tr.blocks.push_back(std::move(c));
  }
  tr.x_final = x;
  tr.y_final = rms_norm(x, ckpt.final_norm, cfg.norm_eps, &tr.final_rms);
  tr.logits = matmul(ckpt.lm_head, tr.y_final);
  return tr;
}

void require_layer(const Checkpoint& ckpt, Index layer, const char* op) {
  if (layer >= ckpt.layers.size()) {
    throw InputError(std::string(op) + ": layer " + std::to_string(layer) + " out of range");
  }
}

const char* ffn_kind_name(FfnKind k) { return k == FfnKind::kGated ? "gated" : "plain"; }

}  // namespace

void validate(const ModelConfig& c) {
  if (c.n_layers == 0 || c.d_model == 0 || c.n_heads == 0 || c.d_head == 0 || c.n_ffn == 0 ||
      c.vocab == 0) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (c.d_model != c.n_heads * c.d_head) {
    throw ConfigError("model config: d_model (" + std::to_string(c.d_model) +
                      ") must equal n_heads·d_head (" + std::to_string(c.n_heads) + "·" +
                      std::to_string(c.d_head) + ")");
  }
  if (!(c.norm_eps > 0.0)) throw ConfigError("model config: norm_eps must be positive");
  if (c.rope && c.d_head % 2 != 0) throw ConfigError("model config: rope needs an even d_head");
}

json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
          {"d_head", c.d_head},     {"n_ffn", c.n_ffn},     {"ffn_kind", ffn_kind_name(c.ffn_kind)},
          {"vocab", c.vocab},       {"norm_eps", c.norm_eps}, {"seed", c.seed},
          {"rope", c.rope},         {"rope_theta", c.rope_theta}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_head = j.value("d_head", c.d_head);
    c.n_ffn = j.value("n_ffn", c.n_ffn);
    const std::string kind = j.value("ffn_kind", std::string("gated"));
    if (kind == "gated") {
      c.ffn_kind = FfnKind::kGated;
    } else if (kind == "plain") {
      c.ffn_kind = FfnKind::kPlain;
    } else {
      throw ConfigError("model config: unknown ffn_kind '" + kind + "'");
    }
    c.vocab = j.value("vocab", c.vocab);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.seed = j.value("seed", c.seed);
    c.rope = j.value("rope", c.rope);
    c.rope_theta = j.value("rope_theta", c.rope_theta);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

Index Checkpoint::n_heads(Index layer) const {
  return layers.at(layer).attn_width() / config.d_head;
}

Index params_per_head(const ModelConfig& c) { return 4 * c.d_model * c.d_head; }

Index params_per_neuron(const ModelConfig& c) {
  return (c.ffn_kind == FfnKind::kGated ? 3 : 2) * c.d_model;
}

Index Checkpoint::block_params(Index layer) const {
  return n_heads(layer) * params_per_head(config) +
         layers.at(layer).n_ffn() * params_per_neuron(config);
}

Index Checkpoint::total_params() const {
  Index total = tok_emb.size() + final_norm.size() + lm_head.size();
  for (const auto& w : layers) {
    total += w.attn_norm.size() + w.wq.size() + w.wk.size() + w.wv.size() + w.wo.size() +
             w.b_o.size() + w.ffn_norm.size() + w.w_gate.size() + w.w_up.size() +
             w.w_down.size() + w.b_down.size();
  }
  return total;
}

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (to_json(config) != to_json(o.config)) return false;
  if (!(tok_emb == o.tok_emb && final_norm == o.final_norm && lm_head == o.lm_head)) return false;
  if (layers.size() != o.layers.size()) return false;
  for (Index l = 0; l < layers.size(); ++l) {
    const auto& a = layers[l];
    const auto& b = o.layers[l];
    if (!(a.attn_norm == b.attn_norm && a.wq == b.wq && a.wk == b.wk && a.wv == b.wv &&
          a.wo == b.wo && a.b_o == b.b_o && a.ffn_norm == b.ffn_norm && a.w_gate == b.w_gate &&
          a.w_up == b.w_up && a.w_down == b.w_down && a.b_down == b.b_down)) {
      return false;
    }
  }
  return true;
}

Checkpoint init_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Index rows, Index cols, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = stddev * normal(rng);
    return m;
  };
  const Index d = config.d_model;
  const Index width = config.n_heads * config.d_head;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));

  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.config.seed = seed;
  ckpt.tok_emb = gaussian(config.vocab, d, 1.0);
  for (Index l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm.assign(d, 1.0);
    w.wq = gaussian(width, d, in_std);
    w.wk = gaussian(width, d, in_std);
    w.wv = gaussian(width, d, in_std);
    w.wo = gaussian(d, width, 1.0 / std::sqrt(static_cast<double>(width)));
    w.b_o.assign(d, 0.0);
    w.ffn_norm.assign(d, 1.0);
    if (config.ffn_kind == FfnKind::kGated) w.w_gate = gaussian(config.n_ffn, d, in_std);
    w.w_up = gaussian(config.n_ffn, d, in_std);
    w.w_down = gaussian(d, config.n_ffn, 1.0 / std::sqrt(static_cast<double>(config.n_ffn)));
    w.b_down.assign(d, 0.0);
    ckpt.layers.push_back(std::move(w));
  }
  ckpt.final_norm.assign(d, 1.0);
  ckpt.lm_head = gaussian(config.vocab, d, in_std);
  return ckpt;
}

ForwardResult forward(const Checkpoint& ckpt, std::span<const TokenId> tokens, bool capture,
                      std::optional<HiddenNudge> nudge) {
  Trace tr = run_forward(ckpt, tokens, nudge);
  ForwardResult out;
  out.logits = std::move(tr.logits);
  if (capture) {
    out.blocks.reserve(tr.blocks.size());
    for (auto& c : tr.blocks) {
      out.blocks.push_back({std::move(c.x_in), std::move(c.z), std::move(c.f), std::move(c.h),
                            std::move(c.x_out)});
    }
  }
  return out;
}

double next_token_nll(const Matrix& logits, std::span<const TokenId> tokens) {
  const Index t_len = tokens.size();
  if (t_len < 2) throw InputError("next_token_nll: need at least 2 tokens");
  double total = 0.0;
  for (Index t = 0; t + 1 < t_len; ++t) {
    double mx = -INFINITY;
    for (Index v = 0; v < logits.rows(); ++v) mx = std::max(mx, logits(v, t));
    double se = 0.0;
    for (Index v = 0; v < logits.rows(); ++v) se += std::exp(logits(v, t) - mx);
    total += mx + std::log(se) - logits(static_cast<Index>(tokens[t + 1]), t);
  }
  return total / static_cast<double>(t_len - 1);
}

LossGrads loss_and_grads(const Checkpoint& ckpt, std::span<const TokenId> tokens) {
  const Index t_len = tokens.size();
  if (t_len < 2) throw InputError("loss_and_grads: need at least 2 tokens, got " +
                                  std::to_string(t_len));
  const auto& cfg = ckpt.config;
  Trace tr = run_forward(ckpt, tokens, std::nullopt);

  LossGrads out;
  out.nll = next_token_nll(tr.logits, tokens);

  // dL/dlogits for the mean next-token loss; the last position carries no loss.
  const double inv_n = 1.0 / static_cast<double>(t_len - 1);
  Matrix dlogits(tr.logits.rows(), t_len);
  for (Index t = 0; t + 1 < t_len; ++t) {
    double mx = -INFINITY;
    for (Index v = 0; v < tr.logits.rows(); ++v) mx = std::max(mx, tr.logits(v, t));
    double se = 0.0;
    for (Index v = 0; v < tr.logits.rows(); ++v) se += std::exp(tr.logits(v, t) - mx);
    for (Index v = 0; v < tr.logits.rows(); ++v) {
      dlogits(v, t) = std::exp(tr.logits(v, t) - mx) / se * inv_n;
    }
    dlogits(static_cast<Index>(tokens[t + 1]), t) -= inv_n;
  }
  Matrix dx = rms_norm_backward(tr.x_final, ckpt.final_norm, tr.final_rms,
                                matmul_at(ckpt.lm_head, dlogits));

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  out.hidden_grads.resize(ckpt.layers.size());
  for (Index li = ckpt.layers.size(); li-- > 0;) {
    const LayerWeights& w = ckpt.layers[li];
    const BlockCache& c = tr.blocks[li];

    Matrix dh = matmul_at(w.w_down, dx);
    Matrix g(dh.rows(), t_len - 1);
    for (Index i = 0; i < dh.rows(); ++i)
      for (Index t = 0; t + 1 < t_len; ++t) g(i, t) = dh(i, t);
    out.hidden_grads[li] = std::move(g);

    Matrix df;
    if (cfg.ffn_kind == FfnKind::kGated) {
      Matrix dgate(dh.rows(), t_len);
      Matrix dup(dh.rows(), t_len);
      for (Index i = 0; i < dh.size(); ++i) {
        const double gp = c.gate_pre.data()[i];
        dup.data()[i] = dh.data()[i] * silu(gp);
        dgate.data()[i] = dh.data()[i] * c.up_pre.data()[i] * silu_grad(gp);
      }
      df = add(matmul_at(w.w_up, dup), matmul_at(w.w_gate, dgate));
    } else {
      Matrix dup(dh.rows(), t_len);
      for (Index i = 0; i < dh.size(); ++i) {
        dup.data()[i] = dh.data()[i] * silu_grad(c.up_pre.data()[i]);
      }
      df = matmul_at(w.w_up, dup);
    }
    Matrix dx_mid = add(dx, rms_norm_backward(c.x_mid, w.ffn_norm, c.ffn_rms, df));

    const Matrix dz = matmul_at(w.wo, dx_mid);
    Matrix dq(c.q.rows(), t_len);
    Matrix dk(c.k.rows(), t_len);
    Matrix dv(c.v.rows(), t_len);
    const Index heads = ckpt.n_heads(li);
    Vector dp(t_len);
    for (Index hd = 0; hd < heads; ++hd) {
      const Index base = hd * cfg.d_head;
      const Matrix& p = c.probs[hd];
      for (Index t = 0; t < t_len; ++t) {
        double weighted = 0.0;
        for (Index u = 0; u <= t; ++u) {
          double acc = 0.0;
          for (Index ch = 0; ch < cfg.d_head; ++ch) {
            acc += dz(base + ch, t) * c.v(base + ch, u);
            dv(base + ch, u) += p(t, u) * dz(base + ch, t);
          }
          dp[u] = acc;
          weighted += p(t, u) * acc;
        }
        for (Index u = 0; u <= t; ++u) {
          const double ds = p(t, u) * (dp[u] - weighted) * inv_sqrt_dh;
          if (ds == 0.0) continue;
          for (Index ch = 0; ch < cfg.d_head; ++ch) {
            dq(base + ch, t) += ds * c.k(base + ch, u);
            dk(base + ch, u) += ds * c.q(base + ch, t);
          }
        }
      }
    }
    if (cfg.rope) {
      apply_rope(dq, cfg.d_head, cfg.rope_theta, true);
      apply_rope(dk, cfg.d_head, cfg.rope_theta, true);
    }
    Matrix da = add(add(matmul_at(w.wq, dq), matmul_at(w.wk, dk)), matmul_at(w.wv, dv));
    dx = add(dx_mid, rms_norm_backward(c.x_in, w.attn_norm, c.attn_rms, da));
  }
  return out;
}

Checkpoint apply_head_mask(const Checkpoint& ckpt, Index layer, const UnitMask& mask,
                           std::optional<std::span<const double>> bias) {
  require_layer(ckpt, layer, "apply_head_mask");
  const Index heads = ckpt.n_heads(layer);
  if (mask.size() != heads) {
    throw InputError("apply_head_mask: mask length " + std::to_string(mask.size()) +
                     " != head count " + std::to_string(heads));
  }
  const Index pruned = static_cast<Index>(std::count(mask.begin(), mask.end(), 1));
  if (pruned == heads) {
    throw InputError("apply_head_mask: refusing to prune every head of layer " +
                     std::to_string(layer));
  }
  Checkpoint out = ckpt;
  LayerWeights& w = out.layers[layer];
  if (bias) {
    if (bias->size() != w.b_o.size()) throw InputError("apply_head_mask: bias length mismatch");
    for (Index i = 0; i < w.b_o.size(); ++i) w.b_o[i] += (*bias)[i];
  }
  if (pruned == 0) return out;
  const Index dh = ckpt.config.d_head;
  IndexList keep;
  for (Index h = 0; h < heads; ++h) {
    if (mask[h]) continue;
    for (Index c = 0; c < dh; ++c) keep.push_back(h * dh + c);
  }
  w.wq = select_rows(w.wq, keep);
  w.wk = select_rows(w.wk, keep);
  w.wv = select_rows(w.wv, keep);
  w.wo = select_columns(w.wo, keep);
  return out;
}

Checkpoint apply_neuron_mask(const Checkpoint& ckpt, Index layer, const UnitMask& mask,
                             std::optional<std::span<const double>> bias) {
  require_layer(ckpt, layer, "apply_neuron_mask");
  const Index n = ckpt.layers[layer].n_ffn();
  if (mask.size() != n) {
    throw InputError("apply_neuron_mask: mask length " + std::to_string(mask.size()) +
                     " != neuron count " + std::to_string(n));
  }
  const Index pruned = static_cast<Index>(std::count(mask.begin(), mask.end(), 1));
  if (pruned == n) {
    throw InputError("apply_neuron_mask: refusing to prune every neuron of layer " +
                     std::to_string(layer));
  }
  Checkpoint out = ckpt;
  LayerWeights& w = out.layers[layer];
  if (bias) {
    if (bias->size() != w.b_down.size()) {
      throw InputError("apply_neuron_mask: bias length mismatch");
    }
    for (Index i = 0; i < w.b_down.size(); ++i) w.b_down[i] += (*bias)[i];
  }
  if (pruned == 0) return out;
  IndexList keep;
  for (Index j = 0; j < n; ++j) {
    if (!mask[j]) keep.push_back(j);
  }
  w.w_up = select_rows(w.w_up, keep);
  if (!w.w_gate.empty()) w.w_gate = select_rows(w.w_gate, keep);
  w.w_down = select_columns(w.w_down, keep);
  return out;
}

PerplexityResult perplexity(const Checkpoint& ckpt, std::span<const TokenId> corpus,
                            Index window) {
  if (corpus.size() < 2) throw InputError("perplexity: corpus needs at least 2 tokens");
  if (window < 2) throw InputError("perplexity: window must be at least 2");
  double total = 0.0;
  Index count = 0;
  for (Index start = 0; start + 1 < corpus.size(); start += window) {
    const Index len = std::min(window, corpus.size() - start);
    if (len < 2) break;
    const auto chunk = corpus.subspan(start, len);
    const auto logits = forward(ckpt, chunk, false).logits;
    total += next_token_nll(logits, chunk) * static_cast<double>(len - 1);
    count += len - 1;
  }
  return {std::exp(total / static_cast<double>(count)), count};
}

Checkpoint fit_output_head(const Checkpoint& ckpt, std::span<const TokenId> corpus, Index window,
                           double ridge) {
  const Index vocab = ckpt.config.vocab;
  const Index d = ckpt.config.d_model;
  if (corpus.size() < 2) throw InputError("fit_output_head: corpus needs at least 2 tokens");

  constexpr double kSmoothing = 0.1;
  Matrix counts(vocab, vocab);
  for (Index t = 0; t + 1 < corpus.size(); ++t) {
    counts(static_cast<Index>(corpus[t]), static_cast<Index>(corpus[t + 1])) += 1.0;
  }
  Matrix target(vocab, vocab);  // row c: centered log P(.|c)
  for (Index c = 0; c < vocab; ++c) {
    double row_total = 0.0;
    for (Index v = 0; v < vocab; ++v) row_total += counts(c, v);
    double mean = 0.0;
    for (Index v = 0; v < vocab; ++v) {
      target(c, v) = std::log((counts(c, v) + kSmoothing) /
                              (row_total + kSmoothing * static_cast<double>(vocab)));
      mean += target(c, v);
    }
    mean /= static_cast<double>(vocab);
    for (Index v = 0; v < vocab; ++v) target(c, v) -= mean;
  }

  Matrix gram(d, d);
  Matrix cross(vocab, d);
  for (Index start = 0; start + 1 < corpus.size(); start += window) {
    const Index len = std::min(window, corpus.size() - start);
    if (len < 2) break;
    const auto chunk = corpus.subspan(start, len);
    const Trace tr = run_forward(ckpt, chunk, std::nullopt);
    for (Index t = 0; t + 1 < len; ++t) {
      const Index cur = static_cast<Index>(chunk[t]);
      for (Index i = 0; i < d; ++i) {
        const double yi = tr.y_final(i, t);
        for (Index j = 0; j < d; ++j) gram(i, j) += yi * tr.y_final(j, t);
        for (Index v = 0; v < vocab; ++v) cross(v, i) += target(cur, v) * yi;
      }
    }
  }
  Checkpoint out = ckpt;
  out.lm_head = matmul(cross, sym_inverse_damped(gram, ridge, "fit_output_head"));
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  NamedTensors tensors;
  tensors.emplace_back("tok_emb", tensor_from_matrix(ckpt.tok_emb));
  for (Index l = 0; l < ckpt.layers.size(); ++l) {
    const auto& w = ckpt.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    tensors.emplace_back(p + "attn_norm", tensor_from_vector(w.attn_norm));
    tensors.emplace_back(p + "wq", tensor_from_matrix(w.wq));
    tensors.emplace_back(p + "wk", tensor_from_matrix(w.wk));
    tensors.emplace_back(p + "wv", tensor_from_matrix(w.wv));
    tensors.emplace_back(p + "wo", tensor_from_matrix(w.wo));
    tensors.emplace_back(p + "b_o", tensor_from_vector(w.b_o));
    tensors.emplace_back(p + "ffn_norm", tensor_from_vector(w.ffn_norm));
    if (!w.w_gate.empty()) tensors.emplace_back(p + "w_gate", tensor_from_matrix(w.w_gate));
    tensors.emplace_back(p + "w_up", tensor_from_matrix(w.w_up));
    tensors.emplace_back(p + "w_down", tensor_from_matrix(w.w_down));
    tensors.emplace_back(p + "b_down", tensor_from_vector(w.b_down));
  }
  tensors.emplace_back("final_norm", tensor_from_vector(ckpt.final_norm));
  tensors.emplace_back("lm_head", tensor_from_matrix(ckpt.lm_head));
  archive_write(path, tensors,
                {{"format", "fang-checkpoint"}, {"version", 1}, {"config", to_json(ckpt.config)}});
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Archive ar = archive_read(path);
  if (!ar.metadata.contains("config")) {
    throw FormatError("checkpoint '" + path.string() + "' has no model config metadata");
  }
  Checkpoint ckpt;
  ckpt.config = model_config_from_json(ar.metadata.at("config"));
  validate(ckpt.config);
  auto get = [&](const std::string& name) -> const Tensor& {
    auto it = ar.tensors.find(name);
    if (it == ar.tensors.end()) {
      throw FormatError("checkpoint '" + path.string() + "' is missing tensor '" + name + "'");
    }
    return it->second;
  };
  const auto& cfg = ckpt.config;
  auto expect = [&](const std::string& name, const Matrix& m, Index rows, Index cols) {
    if (m.rows() != rows || m.cols() != cols) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + std::to_string(m.rows()) +
                        "x" + std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                        "x" + std::to_string(cols));
    }
  };
  auto expect_len = [&](const std::string& name, const Vector& v, Index n) {
    if (v.size() != n) throw FormatError("checkpoint tensor '" + name + "' has wrong length");
  };
  ckpt.tok_emb = tensor_to_matrix(get("tok_emb"));
  expect("tok_emb", ckpt.tok_emb, cfg.vocab, cfg.d_model);
  for (Index l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights w;
    w.attn_norm = tensor_to_vector(get(p + "attn_norm"));
    w.wq = tensor_to_matrix(get(p + "wq"));
    w.wk = tensor_to_matrix(get(p + "wk"));
    w.wv = tensor_to_matrix(get(p + "wv"));
    w.wo = tensor_to_matrix(get(p + "wo"));
    w.b_o = tensor_to_vector(get(p + "b_o"));
    w.ffn_norm = tensor_to_vector(get(p + "ffn_norm"));
    if (cfg.ffn_kind == FfnKind::kGated) w.w_gate = tensor_to_matrix(get(p + "w_gate"));
    w.w_up = tensor_to_matrix(get(p + "w_up"));
    w.w_down = tensor_to_matrix(get(p + "w_down"));
    w.b_down = tensor_to_vector(get(p + "b_down"));

    const Index width = w.wo.cols();
    const Index n = w.w_up.rows();
    if (width == 0 || width % cfg.d_head != 0) {
      throw FormatError("checkpoint tensor '" + p + "wo' width is not a multiple of d_head");
    }
    expect_len(p + "attn_norm", w.attn_norm, cfg.d_model);
    expect(p + "wq", w.wq, width, cfg.d_model);
    expect(p + "wk", w.wk, width, cfg.d_model);
    expect(p + "wv", w.wv, width, cfg.d_model);
    expect(p + "wo", w.wo, cfg.d_model, width);
    expect_len(p + "b_o", w.b_o, cfg.d_model);
    expect_len(p + "ffn_norm", w.ffn_norm, cfg.d_model);
    if (!w.w_gate.empty()) expect(p + "w_gate", w.w_gate, n, cfg.d_model);
    expect(p + "w_up", w.w_up, n, cfg.d_model);
    expect(p + "w_down", w.w_down, cfg.d_model, n);
    expect_len(p + "b_down", w.b_down, cfg.d_model);
    ckpt.layers.push_back(std::move(w));
  }
  ckpt.final_norm = tensor_to_vector(get("final_norm"));
  expect_len("final_norm", ckpt.final_norm, cfg.d_model);
  ckpt.lm_head = tensor_to_matrix(get("lm_head"));
  expect("lm_head", ckpt.lm_head, cfg.vocab, cfg.d_model);
  return ckpt;
}

}  // namespace fang
