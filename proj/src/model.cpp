#include "onerec/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "binary_io.hpp"
#include "json.hpp"
#include "onerec/kernels.hpp"

namespace onerec::model {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr std::string_view kMagic = "OR1C";
constexpr std::uint32_t kVersion = 1;

// ---- row primitives shared by the batch pass and the decoder ----

template <typename T>
void layer_norm_row(const T* x, const T* g, const T* b, int d, T* xhat, T* y, T& rstd) {
  T mean = 0;
  for (int j = 0; j < d; ++j) mean += x[j];
  mean /= static_cast<T>(d);
  T var = 0;
  for (int j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= static_cast<T>(d);
  rstd = T{1} / std::sqrt(var + static_cast<T>(kNormEps));
  for (int j = 0; j < d; ++j) {
    xhat[j] = (x[j] - mean) * rstd;
    y[j] = xhat[j] * g[j] + b[j];
  }
}

template <typename T>
void layer_norm_backward_row(const T* dy, const T* xhat, const T* g, T rstd, int d, T* dx, T* dg, T* db) {
  T mean_dxhat = 0, mean_dxhat_xhat = 0;
  for (int j = 0; j < d; ++j) {
    const T dxh = dy[j] * g[j];
    mean_dxhat += dxh;
    mean_dxhat_xhat += dxh * xhat[j];
    dg[j] += dy[j] * xhat[j];
    db[j] += dy[j];
  }
  mean_dxhat /= static_cast<T>(d);
  mean_dxhat_xhat /= static_cast<T>(d);
  for (int j = 0; j < d; ++j) dx[j] += rstd * (dy[j] * g[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T gelu(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  const T t = std::tanh(u);
  const T du = static_cast<T>(kGeluC) * (T{1} + static_cast<T>(3 * kGeluA) * x * x);
  return static_cast<T>(0.5) * (T{1} + t) + static_cast<T>(0.5) * x * (T{1} - t * t) * du;
}

/// Softmax attention of one query over keys j0..j1 (inclusive). Keys and
/// values are rows spaced `stride` apart. Writes the probabilities and the
/// head output.
template <typename T>
void attend_row(const T* q, const T* keys, const T* vals, std::size_t stride, int j0, int j1, int hd, T scale,
                T* probs, T* out) {
  T m = -std::numeric_limits<T>::infinity();
  for (int j = j0; j <= j1; ++j) {
    const T s = kernels::dot(q, keys + j * stride, hd) * scale;
    probs[j - j0] = s;
    m = std::max(m, s);
  }
  T sum = 0;
  for (int j = j0; j <= j1; ++j) {
    probs[j - j0] = std::exp(probs[j - j0] - m);
    sum += probs[j - j0];
  }
  for (int k = 0; k < hd; ++k) out[k] = 0;
  for (int j = j0; j <= j1; ++j) {
    probs[j - j0] /= sum;
    kernels::axpy(probs[j - j0], vals + j * stride, out, hd);
  }
}

struct Dims {
  int d, dff, H, hd, V, L;
  explicit Dims(const ModelConfig& c)
      : d(c.d_model), dff(c.d_ff), H(c.n_heads), hd(c.d_model / c.n_heads), V(c.vocab_size), L(c.n_layers) {}
};

template <typename T>
struct LayerCache {
  std::vector<T> x_in, ln1_hat, ln1_rstd, a, qkv, probs, att, x_mid, ln2_hat, ln2_rstd, c, f, g;
};

template <typename T>
struct SeqCache {
  int n = 0;
  std::vector<int> seg_start;  // first attendable position of each row
  std::vector<LayerCache<T>> layers;
  std::vector<T> x_last, lnf_hat, lnf_rstd, xf;
};

void validate_sequence(const ModelConfig& cfg, std::span<const int> tokens, std::span<const int> positions,
                       std::span<const int> segments) {
  const auto n = tokens.size();
  if (n == 0) throw InputError("sequence is empty");
  if (n > static_cast<std::size_t>(cfg.context_len)) {
    throw InputError("sequence length " + std::to_string(n) + " exceeds context_len " +
                     std::to_string(cfg.context_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(cfg.vocab_size));
    }
  }
  if (!positions.empty()) {
    if (positions.size() != n) throw InputError("positions length differs from tokens");
    for (int p : positions) {
      if (p < 0 || p >= cfg.context_len) throw InputError("position " + std::to_string(p) + " out of range");
    }
  }
  if (!segments.empty()) {
    if (segments.size() != n) throw InputError("segments length differs from tokens");
    for (std::size_t i = 1; i < n; ++i) {
      if (segments[i] < segments[i - 1]) throw InputError("segments must be contiguous and non-decreasing");
    }
  }
}

template <typename T>
SeqCache<T> run_forward(const Parameters<T>& P, std::span<const int> tokens, std::span<const int> positions,
                        std::span<const int> segments) {
  const Dims D(P.config);
  const auto& lay = P.layout;
  const int n = static_cast<int>(tokens.size());
  const std::size_t nd = static_cast<std::size_t>(n) * D.d;
  SeqCache<T> c;
  c.n = n;
  c.seg_start.resize(n);
  for (int t = 0; t < n; ++t) {
    if (segments.empty()) {
      c.seg_start[t] = 0;
    } else {
      c.seg_start[t] = (t == 0 || segments[t] != segments[t - 1]) ? t : c.seg_start[t - 1];
    }
  }

  std::vector<T> x(nd);
  for (int t = 0; t < n; ++t) {
    const int pos = positions.empty() ? t : positions[t];
    const T* e = P.at(lay.tok_emb) + static_cast<std::size_t>(tokens[t]) * D.d;
    const T* p = P.at(lay.pos_emb) + static_cast<std::size_t>(pos) * D.d;
    for (int j = 0; j < D.d; ++j) x[t * D.d + j] = e[j] + p[j];
  }

  const T scale = T{1} / std::sqrt(static_cast<T>(D.hd));
  c.layers.resize(D.L);
  for (int l = 0; l < D.L; ++l) {
    const auto& o = lay.layers[l];
    auto& lc = c.layers[l];
    lc.x_in = x;
    lc.ln1_hat.resize(nd);
    lc.ln1_rstd.resize(n);
    lc.a.resize(nd);
    for (int t = 0; t < n; ++t) {
      layer_norm_row(&x[t * D.d], P.at(o.ln1_g), P.at(o.ln1_b), D.d, &lc.ln1_hat[t * D.d], &lc.a[t * D.d],
                     lc.ln1_rstd[t]);
    }
    lc.qkv.resize(nd * 3);
    kernels::linear(lc.a.data(), n, D.d, P.at(o.w_qkv), P.at(o.b_qkv), 3 * D.d, lc.qkv.data());
    lc.probs.assign(static_cast<std::size_t>(D.H) * n * n, T{0});
    lc.att.assign(nd, T{0});
    const std::size_t stride = 3 * D.d;
    for (int h = 0; h < D.H; ++h) {
      const T* kbase = lc.qkv.data() + D.d + h * D.hd;
      const T* vbase = lc.qkv.data() + 2 * D.d + h * D.hd;
      for (int t = 0; t < n; ++t) {
        const int j0 = c.seg_start[t];
        T* probs = lc.probs.data() + (static_cast<std::size_t>(h) * n + t) * n + j0;
        attend_row(lc.qkv.data() + t * stride + h * D.hd, kbase, vbase, stride, j0, t, D.hd, scale, probs,
                   lc.att.data() + t * D.d + h * D.hd);
      }
    }
    std::vector<T> proj(nd);
    kernels::linear(lc.att.data(), n, D.d, P.at(o.w_o), P.at(o.b_o), D.d, proj.data());
    for (std::size_t k = 0; k < nd; ++k) x[k] += proj[k];
    lc.x_mid = x;

    lc.ln2_hat.resize(nd);
    lc.ln2_rstd.resize(n);
    lc.c.resize(nd);
    for (int t = 0; t < n; ++t) {
      layer_norm_row(&x[t * D.d], P.at(o.ln2_g), P.at(o.ln2_b), D.d, &lc.ln2_hat[t * D.d], &lc.c[t * D.d],
                     lc.ln2_rstd[t]);
    }
    const std::size_t nf = static_cast<std::size_t>(n) * D.dff;
    lc.f.resize(nf);
    kernels::linear(lc.c.data(), n, D.d, P.at(o.w_fc), P.at(o.b_fc), D.dff, lc.f.data());
    lc.g.resize(nf);
    for (std::size_t k = 0; k < nf; ++k) lc.g[k] = gelu(lc.f[k]);
    kernels::linear(lc.g.data(), n, D.dff, P.at(o.w_proj), P.at(o.b_proj), D.d, proj.data());
    for (std::size_t k = 0; k < nd; ++k) x[k] += proj[k];
  }
  c.x_last = x;
  c.lnf_hat.resize(nd);
  c.lnf_rstd.resize(n);
  c.xf.resize(nd);
  for (int t = 0; t < n; ++t) {
    layer_norm_row(&x[t * D.d], P.at(lay.lnf_g), P.at(lay.lnf_b), D.d, &c.lnf_hat[t * D.d], &c.xf[t * D.d],
                   c.lnf_rstd[t]);
  }
  return c;
}

/// Gradient of the loss given d(loss)/d(xf) at every row (dxf is n x d).
template <typename T>
void run_backward(const Parameters<T>& P, const SeqCache<T>& c, std::span<const int> tokens,
                  std::span<const int> positions, std::vector<T>& dxf, T* grad) {
  const Dims D(P.config);
  const auto& lay = P.layout;
  const int n = c.n;
  const std::size_t nd = static_cast<std::size_t>(n) * D.d;

  std::vector<T> dx(nd, T{0});
  for (int t = 0; t < n; ++t) {
    layer_norm_backward_row(&dxf[t * D.d], &c.lnf_hat[t * D.d], P.at(lay.lnf_g), c.lnf_rstd[t], D.d, &dx[t * D.d],
                            grad + lay.lnf_g, grad + lay.lnf_b);
  }

  const T scale = T{1} / std::sqrt(static_cast<T>(D.hd));
  std::vector<T> dg, dc(nd), datt(nd), dqkv(nd * 3), dprob(n);
  for (int l = D.L - 1; l >= 0; --l) {
    const auto& o = lay.layers[l];
    const auto& lc = c.layers[l];
    const std::size_t nf = static_cast<std::size_t>(n) * D.dff;

    // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
    kernels::linear_backward_weight(dx.data(), lc.g.data(), n, D.dff, D.d, grad + o.w_proj, grad + o.b_proj);
    dg.assign(nf, T{0});
    kernels::linear_backward_input(dx.data(), n, D.d, P.at(o.w_proj), D.dff, dg.data());
    for (std::size_t k = 0; k < nf; ++k) dg[k] *= gelu_grad(lc.f[k]);
    kernels::linear_backward_weight(dg.data(), lc.c.data(), n, D.d, D.dff, grad + o.w_fc, grad + o.b_fc);
    std::fill(dc.begin(), dc.end(), T{0});
    kernels::linear_backward_input(dg.data(), n, D.dff, P.at(o.w_fc), D.d, dc.data());
    for (int t = 0; t < n; ++t) {
      layer_norm_backward_row(&dc[t * D.d], &lc.ln2_hat[t * D.d], P.at(o.ln2_g), lc.ln2_rstd[t], D.d, &dx[t * D.d],
                              grad + o.ln2_g, grad + o.ln2_b);
    }

    // Attention branch: x_mid = x_in + o(attn(qkv(ln1(x_in))))
    kernels::linear_backward_weight(dx.data(), lc.att.data(), n, D.d, D.d, grad + o.w_o, grad + o.b_o);
    std::fill(datt.begin(), datt.end(), T{0});
    kernels::linear_backward_input(dx.data(), n, D.d, P.at(o.w_o), D.d, datt.data());
    std::fill(dqkv.begin(), dqkv.end(), T{0});
    const std::size_t stride = 3 * D.d;
    for (int h = 0; h < D.H; ++h) {
      for (int t = 0; t < n; ++t) {
        const int j0 = c.seg_start[t];
        const T* probs = lc.probs.data() + (static_cast<std::size_t>(h) * n + t) * n;
        const T* dout = datt.data() + t * D.d + h * D.hd;
        const T* q = lc.qkv.data() + t * stride + h * D.hd;
        T* dq = dqkv.data() + t * stride + h * D.hd;
        T dot_pd = 0;
        for (int j = j0; j <= t; ++j) {
          const T* v = lc.qkv.data() + j * stride + 2 * D.d + h * D.hd;
          dprob[j] = kernels::dot(dout, v, D.hd);
          dot_pd += probs[j] * dprob[j];
          kernels::axpy(probs[j], dout, dqkv.data() + j * stride + 2 * D.d + h * D.hd, D.hd);
        }
        for (int j = j0; j <= t; ++j) {
          const T ds = probs[j] * (dprob[j] - dot_pd) * scale;
          if (ds == T{0}) continue;
          const T* k = lc.qkv.data() + j * stride + D.d + h * D.hd;
          kernels::axpy(ds, k, dq, D.hd);
          kernels::axpy(ds, q, dqkv.data() + j * stride + D.d + h * D.hd, D.hd);
        }
      }
    }
    kernels::linear_backward_weight(dqkv.data(), lc.a.data(), n, D.d, 3 * D.d, grad + o.w_qkv, grad + o.b_qkv);
    std::fill(dc.begin(), dc.end(), T{0});
    kernels::linear_backward_input(dqkv.data(), n, 3 * D.d, P.at(o.w_qkv), D.d, dc.data());
    for (int t = 0; t < n; ++t) {
      layer_norm_backward_row(&dc[t * D.d], &lc.ln1_hat[t * D.d], P.at(o.ln1_g), lc.ln1_rstd[t], D.d, &dx[t * D.d],
                              grad + o.ln1_g, grad + o.ln1_b);
    }
  }

  for (int t = 0; t < n; ++t) {
    const int pos = positions.empty() ? t : positions[t];
    kernels::axpy(T{1}, &dx[t * D.d], grad + lay.tok_emb + static_cast<std::size_t>(tokens[t]) * D.d, D.d);
    kernels::axpy(T{1}, &dx[t * D.d], grad + lay.pos_emb + static_cast<std::size_t>(pos) * D.d, D.d);
  }
}

template <typename T>
void logits_row(const Parameters<T>& P, const T* xf, T* out) {
  kernels::linear(xf, 1, P.config.d_model, P.output_weights(), static_cast<const T*>(nullptr), P.config.vocab_size,
                  out);
}

struct TermOutcome {
  double loss = 0.0;
  double logprob = 0.0;
  double kl = 0.0;
};

/// Loss contribution of one term and its gradient with respect to the logits.
template <typename T>
TermOutcome apply_term(const TokenTerm& term, int target, std::span<const T> z, std::vector<double>& dz) {
  const int V = static_cast<int>(z.size());
  TermOutcome out;
  if (term.allowed.empty()) {
    const auto lp = log_softmax(z);
    out.logprob = lp[target];
    if (term.weight != 0.0) {
      for (int v = 0; v < V; ++v) dz[v] += term.weight * std::exp(lp[v]);
      dz[target] -= term.weight;
    }
  } else {
    double m = -std::numeric_limits<double>::infinity();
    bool found = false;
    for (int v : term.allowed) {
      if (v < 0 || v >= V) throw InputError("allowed token outside vocabulary");
      m = std::max(m, static_cast<double>(z[v]));
      found = found || v == target;
    }
    if (!found) throw InputError("target token " + std::to_string(target) + " not in the allowed set");
    double s = 0.0;
    for (int v : term.allowed) s += std::exp(static_cast<double>(z[v]) - m);
    const double lse = m + std::log(s);
    out.logprob = static_cast<double>(z[target]) - lse;
    if (term.weight != 0.0) {
      for (int v : term.allowed) dz[v] += term.weight * std::exp(static_cast<double>(z[v]) - lse);
      dz[target] -= term.weight;
    }
  }
  out.loss = -term.weight * out.logprob;

  if (term.kl_weight != 0.0) {
    if (static_cast<int>(term.ref_logprobs.size()) != V) throw InputError("reference logprobs have wrong length");
    const auto lp = log_softmax(z);
    double kl = 0.0;
    for (int v = 0; v < V; ++v) kl += std::exp(lp[v]) * (lp[v] - term.ref_logprobs[v]);
    out.kl = kl;
    out.loss += term.kl_weight * kl;
    for (int v = 0; v < V; ++v) dz[v] += term.kl_weight * std::exp(lp[v]) * (lp[v] - term.ref_logprobs[v] - kl);
  }
  return out;
}

template <typename T>
struct SeqOutcome {
  double loss = 0.0;
  std::vector<double> logprobs, kl;
  std::vector<T> grad;
};

template <typename T>
SeqOutcome<T> evaluate_one(const Parameters<T>& P, const SequenceObjective& s, bool want_grad) {
  const Dims D(P.config);
  const int n = static_cast<int>(s.tokens.size());
  SeqCache<T> c = run_forward(P, s.tokens, s.positions, s.segments);
  SeqOutcome<T> out;
  out.logprobs.reserve(s.terms.size());
  out.kl.reserve(s.terms.size());
  std::vector<T> dxf;
  if (want_grad) {
    dxf.assign(static_cast<std::size_t>(n) * D.d, T{0});
    out.grad.assign(P.values.size(), T{0});
  }
  std::vector<T> z(D.V);
  std::vector<double> dz(D.V);
  std::vector<T> dzt(D.V);
  for (const auto& term : s.terms) {
    if (term.index < 1 || term.index >= n) {
      throw InputError("term index " + std::to_string(term.index) + " outside [1, " + std::to_string(n) + ")");
    }
    const int row = term.index - 1;
    logits_row(P, &c.xf[static_cast<std::size_t>(row) * D.d], z.data());
    std::fill(dz.begin(), dz.end(), 0.0);
    const TermOutcome r = apply_term<T>(term, s.tokens[term.index], z, dz);
    out.loss += r.loss;
    out.logprobs.push_back(r.logprob);
    out.kl.push_back(r.kl);
    if (!want_grad || (term.weight == 0.0 && term.kl_weight == 0.0)) continue;
    for (int v = 0; v < D.V; ++v) dzt[v] = static_cast<T>(dz[v]);
    // logits = xf W^T: dW += dz^T xf, dxf += dz W
    const std::size_t out_off = P.config.tied_embeddings ? P.layout.tok_emb : P.layout.lm_head;
    kernels::linear_backward_weight(dzt.data(), &c.xf[static_cast<std::size_t>(row) * D.d], 1, D.d, D.V,
                                    out.grad.data() + out_off, static_cast<T*>(nullptr));
    kernels::linear_backward_input(dzt.data(), 1, D.V, P.output_weights(), D.d,
                                   &dxf[static_cast<std::size_t>(row) * D.d]);
  }
  if (want_grad) {
    run_backward(P, c, s.tokens, s.positions, dxf, out.grad.data());
  }
  return out;
}

std::uint64_t config_seed_stream(const ModelConfig& cfg) { return mix_seed(cfg.seed, 0x6d6f64656c); }

}  // namespace

// ---- config and layout ----

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
  if (n_heads < 1 || d_model < 1 || d_model % n_heads != 0) {
    throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
  }
  if (d_ff < 1) throw ConfigError("model.d_ff must be >= 1");
  if (context_len < 2) throw ConfigError("model.context_len must be >= 2");
  if (vocab_size < 1) throw ConfigError("model.vocab_size must be >= 1");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j{{"n_layers", n_layers},       {"n_heads", n_heads},   {"d_model", d_model},
                   {"d_ff", d_ff},               {"context_len", context_len}, {"vocab_size", vocab_size},
                   {"tied_embeddings", tied_embeddings}, {"seed", seed}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.tied_embeddings = j.at("tied_embeddings").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model config json: ") + e.what(), 0);
  }
}

std::string_view param_kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::embedding: return "embedding";
    case ParamKind::position: return "position";
    case ParamKind::attention: return "attention";
    case ParamKind::feedforward: return "feedforward";
    case ParamKind::norm: return "norm";
    case ParamKind::output_head: return "output_head";
  }
  return "?";
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  tok_emb = add("tok_emb", ParamKind::embedding, cfg.vocab_size, d);
  pos_emb = add("pos_emb", ParamKind::position, cfg.context_len, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = add(p + "ln1.gain", ParamKind::norm, 1, d);
    L.ln1_b = add(p + "ln1.bias", ParamKind::norm, 1, d);
    L.w_qkv = add(p + "attn.w_qkv", ParamKind::attention, 3 * d, d);
    L.b_qkv = add(p + "attn.b_qkv", ParamKind::attention, 1, 3 * d);
    L.w_o = add(p + "attn.w_o", ParamKind::attention, d, d);
    L.b_o = add(p + "attn.b_o", ParamKind::attention, 1, d);
    L.ln2_g = add(p + "ln2.gain", ParamKind::norm, 1, d);
    L.ln2_b = add(p + "ln2.bias", ParamKind::norm, 1, d);
    L.w_fc = add(p + "mlp.w_fc", ParamKind::feedforward, cfg.d_ff, d);
    L.b_fc = add(p + "mlp.b_fc", ParamKind::feedforward, 1, cfg.d_ff);
    L.w_proj = add(p + "mlp.w_proj", ParamKind::feedforward, d, cfg.d_ff);
    L.b_proj = add(p + "mlp.b_proj", ParamKind::feedforward, 1, d);
    layers.push_back(L);
  }
  lnf_g = add("lnf.gain", ParamKind::norm, 1, d);
  lnf_b = add("lnf.bias", ParamKind::norm, 1, d);
  if (!cfg.tied_embeddings) lm_head = add("lm_head", ParamKind::output_head, cfg.vocab_size, d);
}

std::size_t ParamLayout::add(std::string name, ParamKind kind, int rows, int cols) {
  const std::size_t off = size_;
  tensors_.push_back(TensorInfo{std::move(name), kind, off, rows, cols});
  size_ += static_cast<std::size_t>(rows) * cols;
  return off;
}

const TensorInfo& ParamLayout::at(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw IndexError("no parameter tensor named '" + std::string(name) + "'");
}

template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg) {
  Parameters<T> p{cfg, ParamLayout(cfg), {}};
  p.values.assign(p.layout.size(), T{0});
  Rng rng(config_seed_stream(cfg));
  std::normal_distribution<double> gauss(0.0, kInitStd);
  for (const auto& t : p.layout.tensors()) {
    T* v = p.values.data() + t.offset;
    if (t.kind == ParamKind::norm) {
      const bool gain = t.name.ends_with("gain");
      std::fill(v, v + t.size(), gain ? T{1} : T{0});
    } else if (t.rows == 1) {
      std::fill(v, v + t.size(), T{0});  // biases
    } else {
      for (std::size_t k = 0; k < t.size(); ++k) v[k] = static_cast<T>(gauss(rng));
    }
  }
  return p;
}

// ---- objective ----

template <typename T>
ObjectiveResult evaluate(const Parameters<T>& params, std::span<const SequenceObjective> batch,
                         std::vector<T>* grad) {
  for (const auto& s : batch) validate_sequence(params.config, s.tokens, s.positions, s.segments);
  const int B = static_cast<int>(batch.size());
  std::vector<SeqOutcome<T>> outs(B);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 1) if (B > 1)
  for (int b = 0; b < B; ++b) {
    try {
      outs[b] = evaluate_one(params, batch[b], grad != nullptr);
    } catch (...) {
#pragma omp critical(onerec_model_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  ObjectiveResult res;
  if (grad) grad->assign(params.values.size(), T{0});
  for (int b = 0; b < B; ++b) {
    res.loss += outs[b].loss;
    res.logprobs.push_back(std::move(outs[b].logprobs));
    res.kl.push_back(std::move(outs[b].kl));
    if (grad) {
      T* g = grad->data();
      const T* src = outs[b].grad.data();
      for (std::size_t k = 0; k < grad->size(); ++k) g[k] += src[k];
    }
  }
  return res;
}

template <typename T>
Mat<T> forward(const Parameters<T>& params, std::span<const int> tokens) {
  validate_sequence(params.config, tokens, {}, {});
  const SeqCache<T> c = run_forward(params, tokens, {}, {});
  Mat<T> logits(c.n, params.config.vocab_size);
  kernels::linear(c.xf.data(), c.n, params.config.d_model, params.output_weights(), static_cast<const T*>(nullptr),
                  params.config.vocab_size, logits.data.data());
  return logits;
}

template <typename T>
double nll_loss(const Parameters<T>& params, std::span<const int> tokens, std::span<const std::uint8_t> mask,
                std::vector<T>* grad) {
  if (mask.size() != tokens.size()) throw InputError("nll_loss: mask length differs from tokens");
  if (!mask.empty() && mask[0]) throw InputError("nll_loss: the first token has no prefix to predict it from");
  const auto count = std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
  if (count == 0) throw InputError("nll_loss: degenerate input, no supervised position");
  SequenceObjective s;
  s.tokens.assign(tokens.begin(), tokens.end());
  for (std::size_t i = 1; i < mask.size(); ++i) {
    if (mask[i]) s.terms.push_back(TokenTerm{static_cast<int>(i), 1.0 / static_cast<double>(count), {}, 0.0, {}});
  }
  return evaluate(params, std::span<const SequenceObjective>(&s, 1), grad).loss;
}

template <typename T>
std::vector<double> sequence_logprob(const Parameters<T>& params, std::span<const int> prompt,
                                     std::span<const int> response) {
  if (prompt.empty()) throw InputError("sequence_logprob: prompt must be non-empty");
  if (response.empty()) return {};
  SequenceObjective s;
  s.tokens.assign(prompt.begin(), prompt.end());
  s.tokens.insert(s.tokens.end(), response.begin(), response.end());
  for (std::size_t i = 0; i < response.size(); ++i) {
    s.terms.push_back(TokenTerm{static_cast<int>(prompt.size() + i), 0.0, {}, 0.0, {}});
  }
  return evaluate(params, std::span<const SequenceObjective>(&s, 1), static_cast<std::vector<T>*>(nullptr)).logprobs.front();
}

template <typename T>
std::vector<std::vector<double>> response_distributions(const Parameters<T>& params, std::span<const int> prompt,
                                                        std::span<const int> response) {
  if (prompt.empty()) throw InputError("response_distributions: prompt must be non-empty");
  std::vector<int> tokens(prompt.begin(), prompt.end());
  tokens.insert(tokens.end(), response.begin(), response.end());
  // The last token's logits are never needed.
  tokens.pop_back();
  if (tokens.empty()) return {};
  const Mat<T> logits = forward(params, tokens);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < response.size(); ++i) {
    out.push_back(log_softmax<T>(logits.row(static_cast<int>(prompt.size() - 1 + i))));
  }
  return out;
}

template <typename T>
std::vector<double> log_softmax(std::span<const T> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (T v : logits) m = std::max(m, static_cast<double>(v));
  double s = 0.0;
  for (T v : logits) s += std::exp(static_cast<double>(v) - m);
  const double lse = m + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

// ---- incremental decoder ----

template <typename T>
Decoder<T>::Decoder(const Parameters<T>& params)
    : params_(&params), keys_(params.config.n_layers), values_(params.config.n_layers) {}

template <typename T>
std::span<const T> Decoder<T>::step(int token) {
  const Parameters<T>& P = *params_;
  const Dims D(P.config);
  const auto& lay = P.layout;
  if (length_ >= P.config.context_len) throw InputError("decoder: context_len exceeded");
  if (token < 0 || token >= D.V) throw InputError("decoder: token id " + std::to_string(token) + " out of range");
  const int t = length_;
  std::vector<T> x(D.d), xhat(D.d), a(D.d), qkv(3 * D.d), att(D.d), proj(D.d), f(D.dff), g(D.dff);
  std::vector<T> probs(t + 1);
  T rstd;
  const T* e = P.at(lay.tok_emb) + static_cast<std::size_t>(token) * D.d;
  const T* p = P.at(lay.pos_emb) + static_cast<std::size_t>(t) * D.d;
  for (int j = 0; j < D.d; ++j) x[j] = e[j] + p[j];
  const T scale = T{1} / std::sqrt(static_cast<T>(D.hd));
  for (int l = 0; l < D.L; ++l) {
    const auto& o = lay.layers[l];
    layer_norm_row(x.data(), P.at(o.ln1_g), P.at(o.ln1_b), D.d, xhat.data(), a.data(), rstd);
    kernels::linear(a.data(), 1, D.d, P.at(o.w_qkv), P.at(o.b_qkv), 3 * D.d, qkv.data());
    auto& K = keys_[l];
    auto& Vv = values_[l];
    K.insert(K.end(), qkv.begin() + D.d, qkv.begin() + 2 * D.d);
    Vv.insert(Vv.end(), qkv.begin() + 2 * D.d, qkv.end());
    for (int h = 0; h < D.H; ++h) {
      attend_row(qkv.data() + h * D.hd, K.data() + h * D.hd, Vv.data() + h * D.hd, static_cast<std::size_t>(D.d), 0,
                 t, D.hd, scale, probs.data(), att.data() + h * D.hd);
    }
    kernels::linear(att.data(), 1, D.d, P.at(o.w_o), P.at(o.b_o), D.d, proj.data());
    for (int j = 0; j < D.d; ++j) x[j] += proj[j];
    layer_norm_row(x.data(), P.at(o.ln2_g), P.at(o.ln2_b), D.d, xhat.data(), a.data(), rstd);
    kernels::linear(a.data(), 1, D.d, P.at(o.w_fc), P.at(o.b_fc), D.dff, f.data());
    for (int k = 0; k < D.dff; ++k) g[k] = gelu(f[k]);
    kernels::linear(g.data(), 1, D.dff, P.at(o.w_proj), P.at(o.b_proj), D.d, proj.data());
    for (int j = 0; j < D.d; ++j) x[j] += proj[j];
  }
  layer_norm_row(x.data(), P.at(lay.lnf_g), P.at(lay.lnf_b), D.d, xhat.data(), a.data(), rstd);
  logits_.resize(D.V);
  logits_row(P, a.data(), logits_.data());
  ++length_;
  return logits_;
}

template <typename T>
SampleResult sample(const Parameters<T>& params, std::span<const int> prompt, double temperature, int max_new,
                    std::uint64_t seed, int stop_token) {
  if (!(temperature > 0.0)) throw ConfigError("sample: temperature must be > 0");
  if (prompt.empty()) throw InputError("sample: prompt must be non-empty");
  if (static_cast<int>(prompt.size()) > params.config.context_len) {
    throw InputError("sample: prompt of length " + std::to_string(prompt.size()) + " exceeds context_len " +
                     std::to_string(params.config.context_len));
  }
  Decoder<T> dec(params);
  for (int tok : prompt) dec.step(tok);
  Rng rng(seed);
  SampleResult out;
  const int V = params.config.vocab_size;
  std::vector<double> w(V);
  for (int k = 0; k < max_new; ++k) {
    const auto z = dec.logits();
    const auto lp = log_softmax(z);
    double m = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < V; ++v) m = std::max(m, lp[v]);
    double total = 0.0;
    for (int v = 0; v < V; ++v) {
      w[v] = std::exp((lp[v] - m) / temperature);
      total += w[v];
    }
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    int pick = -1;
    for (int v = 0; v < V; ++v) {
      if (w[v] <= 0.0) continue;
      acc += w[v];
      pick = v;
      if (acc > u) break;
    }
    out.tokens.push_back(pick);
    out.logprobs.push_back(lp[pick]);
    if (pick == stop_token || dec.length() >= params.config.context_len) break;
    dec.step(pick);
  }
  return out;
}

// ---- checkpoints ----

void save_checkpoint(const Parameters<float>& params, const std::filesystem::path& path,
                     const std::string& provenance_json) {
  io::ByteWriter w;
  w.put_bytes(kMagic);
  w.put(kVersion);
  w.put_string(params.config.to_json());
  w.put_string(provenance_json);
  w.put(static_cast<std::uint32_t>(params.layout.tensors().size()));
  for (const auto& t : params.layout.tensors()) {
    w.put_string(t.name);
    w.put(static_cast<std::uint32_t>(t.rows));
    w.put(static_cast<std::uint32_t>(t.cols));
    w.put_span(std::span<const float>(params.values.data() + t.offset, t.size()));
  }
  io::write_file_atomic(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path), path.filename().string());
  if (r.get_bytes(kMagic.size()) != kMagic) r.fail("bad magic (expected OR1C)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const ModelConfig cfg = ModelConfig::from_json(r.get_string());
  Checkpoint ck{Parameters<float>{cfg, ParamLayout(cfg), {}}, r.get_string()};
  ck.params.values.assign(ck.params.layout.size(), 0.0f);
  const auto count = r.get<std::uint32_t>();
  if (count != ck.params.layout.tensors().size()) r.fail("tensor count does not match the model config");
  for (const auto& t : ck.params.layout.tensors()) {
    if (r.get_string() != t.name) r.fail("unexpected tensor (wanted " + t.name + ")");
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (static_cast<int>(rows) != t.rows || static_cast<int>(cols) != t.cols) r.fail("shape mismatch for " + t.name);
    r.get_span(std::span<float>(ck.params.values.data() + t.offset, t.size()));
  }
  r.expect_end();
  return ck;
}

// ---- explicit instantiations ----

#define ONEREC_MODEL_INSTANTIATE(T)                                                                               \
  template Parameters<T> init_parameters<T>(const ModelConfig&);                                                 \
  template ObjectiveResult evaluate<T>(const Parameters<T>&, std::span<const SequenceObjective>, std::vector<T>*); \
  template Mat<T> forward<T>(const Parameters<T>&, std::span<const int>);                                        \
  template double nll_loss<T>(const Parameters<T>&, std::span<const int>, std::span<const std::uint8_t>,         \
                              std::vector<T>*);                                                                  \
  template std::vector<double> sequence_logprob<T>(const Parameters<T>&, std::span<const int>,                   \
                                                   std::span<const int>);                                        \
  template std::vector<std::vector<double>> response_distributions<T>(const Parameters<T>&,                      \
                                                                      std::span<const int>, std::span<const int>); \
  template std::vector<double> log_softmax<T>(std::span<const T>);                                               \
  template class Decoder<T>;                                                                                     \
  template SampleResult sample<T>(const Parameters<T>&, std::span<const int>, double, int, std::uint64_t, int);

ONEREC_MODEL_INSTANTIATE(float)
ONEREC_MODEL_INSTANTIATE(double)

}  // namespace onerec::model
