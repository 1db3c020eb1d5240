#pragma once

// Cross-attention built from two ingredients: scaled dot-product attention
// over encoder keys, and a Gaussian-mixture attention whose K component
// means/spreads/weights are predicted from the decoder query by small
// feed-forward nets. A per-position gate fuses the two rows. Three
// conversion layers turn raw predictor outputs into valid mixtures:
//
//   approximate  omega=softmax, mu=J*sigmoid, sigma clamped so +-3 sigma
//                stays inside the sentence, Z=sqrt(2 pi sigma^2)
//   strict       sigma=J*sigmoid, row renormalized to sum 1
//   synthesis    unnormalized, exp-parameterized, means accumulate over
//                target steps (Z=1)

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gma/tensor.hpp"

namespace gma {

enum class NormMode { approximate, strict, synthesis };

inline const char* to_string(NormMode m) {
  switch (m) {
    case NormMode::approximate: return "approximate";
    case NormMode::strict: return "strict";
    case NormMode::synthesis: return "synthesis";
  }
  return "?";
}
inline NormMode norm_mode_from_string(const std::string& s) {
  if (s == "approximate") return NormMode::approximate;
  if (s == "strict") return NormMode::strict;
  if (s == "synthesis") return NormMode::synthesis;
  throw ContractError("unknown norm_mode: " + s);
}

struct Gating {
  enum class Kind { learned, fixed, average, dot_only, gma_only };
  Kind kind = Kind::learned;
  double fixed_g = 0.5;  // only for Kind::fixed

  bool uses_gate_ffn() const { return kind == Kind::learned; }
  bool uses_gma() const { return kind != Kind::dot_only; }
};

inline const char* to_string(Gating::Kind k) {
  switch (k) {
    case Gating::Kind::learned: return "learned";
    case Gating::Kind::fixed: return "fixed";
    case Gating::Kind::average: return "average";
    case Gating::Kind::dot_only: return "dot_only";
    case Gating::Kind::gma_only: return "gma_only";
  }
  return "?";
}
inline Gating::Kind gating_kind_from_string(const std::string& s) {
  if (s == "learned") return Gating::Kind::learned;
  if (s == "fixed") return Gating::Kind::fixed;
  if (s == "average") return Gating::Kind::average;
  if (s == "dot_only") return Gating::Kind::dot_only;
  if (s == "gma_only") return Gating::Kind::gma_only;
  throw ContractError("unknown gating mode: " + s);
}

struct GmaConfig {
  int K = 4;
  NormMode norm_mode = NormMode::approximate;
  Gating gating;
  bool share_mean = false;
  bool share_var = false;
  bool share_weight = false;
  int d_model = 64;
  int n_heads = 4;

  int d_k() const { return d_model / n_heads; }
  void validate() const {
    if (K < 1) throw ContractError("GmaConfig: K must be >= 1");
    if (n_heads < 1 || d_model < 1 || d_model % n_heads != 0)
      throw ContractError("GmaConfig: d_model must be divisible by n_heads");
    if (gating.kind == Gating::Kind::fixed && (gating.fixed_g < 0.0 || gating.fixed_g > 1.0))
      throw ContractError("GmaConfig: fixed gate must lie in [0,1]");
  }
};

// Predictor FFN weights for one decoder layer, shared across its heads and
// applied to each head's query slice. The gate net is absent when the
// gating mode never reads it.
struct GmaHeadParams {
  Tensor w_omega, b_omega1, v_omega, b_omega2;
  Tensor w_mu, b_mu1, v_mu, b_mu2;
  Tensor w_sigma, b_sigma1, v_sigma, b_sigma2;
  std::optional<Tensor> w_g, b_g1, v_g, b_g2;
};

// Raw FFN outputs for all I target positions of one head.
struct Intermediate {
  Tensor omega_hat;  // [I x K]
  Tensor mu_hat;     // [I x K]
  Tensor sigma_hat;  // [I x K]
  std::optional<Tensor> gate_hat;  // [I x 1]
};

// Valid mixture parameters, one row per target position.
struct MixtureParams {
  Tensor omega;  // [I x K]
  Tensor mu;     // [I x K]
  Tensor sigma;  // [I x K]
  Tensor z;      // [I x K]
};

// Per-head attention matrices kept for analysis; matrices are row-major
// with true (unpadded) source length.
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  int tgt_len = 0;
  int src_len = 0;
  std::vector<double> alpha;
  std::vector<double> beta;
  std::vector<double> gamma;
  std::vector<double> gate;  // one value per target position
};

namespace detail {

inline size_t live_count(const Mask& mask, size_t J) {
  if (mask.empty()) return J;
  size_t n = 0;
  for (bool b : mask) n += b;
  return n;
}

inline Tensor mask_bias(const Mask& mask) {
  std::vector<double> b(mask.size());
  for (size_t j = 0; j < mask.size(); ++j) b[j] = mask[j] ? 0.0 : -1e30;
  return Tensor::from({mask.size()}, std::move(b));
}

inline Tensor mask_gate01(const Mask& mask) {
  std::vector<double> b(mask.size());
  for (size_t j = 0; j < mask.size(); ++j) b[j] = mask[j] ? 1.0 : 0.0;
  return Tensor::from({mask.size()}, std::move(b));
}

}  // namespace detail

// Scaled dot-product attention rows. Padded positions get score -inf and
// therefore weight exactly zero; rows normalize over live positions only.
inline Tensor dot_product_attention(const Tensor& queries, const Tensor& keys, const Mask& mask = {}) {
  if (queries.rank() != 2 || keys.rank() != 2 || queries.dim(1) != keys.dim(1))
    throw ShapeError("dot_product_attention: queries " + shape_str(queries.shape()) +
                     " vs keys " + shape_str(keys.shape()));
  size_t J = keys.dim(0);
  if (!mask.empty()) {
    if (mask.size() != J) throw ShapeError("mask length does not match key count");
    if (detail::live_count(mask, J) == 0)
      throw ContractError("dot_product_attention: all positions masked");
  }
  double scale = 1.0 / std::sqrt(double(queries.dim(1)));
  Tensor scores = mul_scalar(matmul(queries, transpose(keys)), scale);
  if (!mask.empty()) scores = add(scores, detail::mask_bias(mask));
  return softmax(scores, 1);
}

// omega/mu/sigma (and optionally the gate) from the per-head projected
// queries through the shared two-layer tanh nets.
inline Intermediate predict_intermediate(const Tensor& queries, const GmaHeadParams& p,
                                         bool want_gate) {
  auto ffn = [&](const Tensor& w, const Tensor& b1, const Tensor& v, const Tensor& b2) {
    return add(matmul(tanh(add(matmul(queries, w), b1)), v), b2);
  };
  Intermediate out;
  out.omega_hat = ffn(p.w_omega, p.b_omega1, p.v_omega, p.b_omega2);
  out.mu_hat = ffn(p.w_mu, p.b_mu1, p.v_mu, p.b_mu2);
  out.sigma_hat = ffn(p.w_sigma, p.b_sigma1, p.v_sigma, p.b_sigma2);
  if (want_gate) {
    if (!p.w_g) throw ContractError("gate requested but gate FFN parameters are absent");
    out.gate_hat = ffn(*p.w_g, *p.b_g1, *p.v_g, *p.b_g2);
  }
  return out;
}

namespace detail {

// [I x 1] column of the first component, broadcast back to K columns.
inline Tensor tie_to_first(const Tensor& m, int K) {
  Tensor col = slice_last(m, 0, 1);
  return matmul(col, Tensor::full({1, size_t(K)}, 1.0));
}

}  // namespace detail

// Conversion layer: raw predictor outputs -> valid mixture parameters.
// `prev_mu` seeds the synthesis recurrence (zero vector at the first step).
inline MixtureParams convert_params(const Intermediate& inter, size_t J, const GmaConfig& cfg,
                                    const Tensor* prev_mu = nullptr) {
  if (J < 1) throw ContractError("convert_params: source length must be >= 1");
  int K = cfg.K;
  Tensor omega_hat = cfg.share_weight ? detail::tie_to_first(inter.omega_hat, K) : inter.omega_hat;
  Tensor mu_hat = cfg.share_mean ? detail::tie_to_first(inter.mu_hat, K) : inter.mu_hat;
  Tensor sigma_hat = cfg.share_var ? detail::tie_to_first(inter.sigma_hat, K) : inter.sigma_hat;

  MixtureParams mp;
  switch (cfg.norm_mode) {
    case NormMode::approximate: {
      mp.omega = softmax(omega_hat, 1);
      mp.mu = mul_scalar(sigmoid(mu_hat), double(J));
      Tensor cand = mul_scalar(sigmoid(sigma_hat), double(J) / 6.0);
      Tensor lo = mul_scalar(mp.mu, 1.0 / 3.0);
      Tensor hi = mul_scalar(sub(Tensor::full(mp.mu.shape(), double(J)), mp.mu), 1.0 / 3.0);
      // Floor keeps sigma positive when mu collapses onto a boundary.
      mp.sigma = clamp_min(minimum(minimum(cand, lo), hi), 1e-6);
      mp.z = mul_scalar(mp.sigma, std::sqrt(2.0 * M_PI));
      break;
    }
    case NormMode::strict: {
      mp.omega = softmax(omega_hat, 1);
      mp.mu = mul_scalar(sigmoid(mu_hat), double(J));
      mp.sigma = mul_scalar(sigmoid(sigma_hat), double(J));
      mp.z = mul_scalar(mp.sigma, std::sqrt(2.0 * M_PI));
      break;
    }
    case NormMode::synthesis: {
      mp.omega = exp(omega_hat);
      Tensor steps = cumsum(exp(mu_hat), 0);
      mp.mu = prev_mu ? add(steps, *prev_mu) : steps;
      mp.sigma = sqrt(mul_scalar(exp(neg(sigma_hat)), 0.5));
      mp.z = Tensor::full(mp.sigma.shape(), 1.0);
      break;
    }
  }
  return mp;
}

// beta_ij = sum_k omega_ik / Z_ik * exp(-(j - mu_ik)^2 / (2 sigma_ik^2)),
// over the 1-based source grid j = 1..J. Strict mode renormalizes rows;
// the other modes leave them unnormalized. Padded positions are zeroed
// after evaluation.
inline Tensor gaussian_mixture_weights(const MixtureParams& mp, size_t J, const Mask& mask,
                                       NormMode mode) {
  size_t I = mp.mu.dim(0), K = mp.mu.dim(1);
  Tensor pos = Tensor::positions(J);                       // [J]
  Tensor mu3 = reshape(mp.mu, {I, K, 1});
  Tensor diff = sub(pos, mu3);                             // [I x K x J]
  Tensor twosig2 = reshape(mul_scalar(mul(mp.sigma, mp.sigma), 2.0), {I, K, 1});
  Tensor dens = exp(neg(div(mul(diff, diff), twosig2)));
  Tensor coef = reshape(div(mp.omega, mp.z), {I, K, 1});
  Tensor beta = sum(mul(coef, dens), 1);                   // [I x J]
  if (!mask.empty()) {
    if (mask.size() != J) throw ShapeError("mask length does not match source length");
    beta = mul(beta, detail::mask_gate01(mask));
  }
  if (mode == NormMode::strict) {
    Tensor row_sum = sum(beta, 1, true);
    for (size_t i = 0; i < I; ++i)
      if (row_sum.data()[i] < 1e-12)
        throw ContractError("strict normalization hit a degenerate mixture row (sum < 1e-12)");
    beta = div(beta, row_sum);
  }
  return beta;
}

// gamma_j = (1 - g) alpha_j + g beta_j. Returns the fused row and the gate
// actually applied, shaped [I x 1].
inline std::pair<Tensor, Tensor> gate_fuse(const Tensor& alpha, const Tensor& beta,
                                           const std::optional<Tensor>& gate_hat,
                                           const Gating& gating) {
  size_t I = alpha.dim(0);
  Tensor g;
  switch (gating.kind) {
    case Gating::Kind::learned:
      if (!gate_hat) throw ContractError("learned gating requires a predicted gate");
      g = sigmoid(*gate_hat);
      break;
    case Gating::Kind::fixed: g = Tensor::full({I, 1}, gating.fixed_g); break;
    case Gating::Kind::average: g = Tensor::full({I, 1}, 0.5); break;
    case Gating::Kind::dot_only: g = Tensor::zeros({I, 1}); break;
    case Gating::Kind::gma_only: g = Tensor::full({I, 1}, 1.0); break;
  }
  Tensor one_minus = add_scalar(neg(g), 1.0);
  Tensor gamma = add(mul(one_minus, alpha), mul(g, beta));
  return {gamma, g};
}

// Mixture probability mass falling inside the sentence span [0, J],
// evaluated in closed form per target position (diagnostic only).
inline std::vector<double> mixture_in_sentence_mass(const MixtureParams& mp, size_t J) {
  size_t I = mp.mu.dim(0), K = mp.mu.dim(1);
  auto Phi = [](double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); };
  std::vector<double> mass(I, 0.0);
  for (size_t i = 0; i < I; ++i)
    for (size_t k = 0; k < K; ++k) {
      double mu = mp.mu.at({i, k}), sig = mp.sigma.at({i, k}), w = mp.omega.at({i, k});
      mass[i] += w * (Phi((double(J) - mu) / sig) - Phi((0.0 - mu) / sig));
    }
  return mass;
}

// Projection weights of one cross-attention layer; `gma` is empty for a
// plain dot-product layer.
struct CrossAttentionParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  std::optional<GmaHeadParams> gma;
};

// Full fused cross-attention: per head, dot-product rows, mixture rows,
// gate fusion, context against the value projection; heads concatenated
// and output-projected. Appends one AttentionRecord per head when
// `records` is given.
inline Tensor cross_attention_forward(const Tensor& decoder_states, const Tensor& encoder_states,
                                      const CrossAttentionParams& p, const GmaConfig& cfg,
                                      const Mask& mask = {},
                                      std::vector<AttentionRecord>* records = nullptr,
                                      int layer_label = 0) {
  cfg.validate();
  size_t I = decoder_states.dim(0);
  size_t J = encoder_states.dim(0);
  size_t d_k = size_t(cfg.d_k());
  size_t true_J = detail::live_count(mask, J);

  Tensor q_all = add(matmul(decoder_states, p.w_q), p.b_q);
  Tensor k_all = add(matmul(encoder_states, p.w_k), p.b_k);
  Tensor v_all = add(matmul(encoder_states, p.w_v), p.b_v);

  bool use_gma = p.gma.has_value() && cfg.gating.uses_gma();
  std::vector<Tensor> head_ctx;
  head_ctx.reserve(cfg.n_heads);
  for (int h = 0; h < cfg.n_heads; ++h) {
    Tensor q = slice_last(q_all, h * d_k, d_k);
    Tensor k = slice_last(k_all, h * d_k, d_k);
    Tensor v = slice_last(v_all, h * d_k, d_k);
    Tensor alpha = dot_product_attention(q, k, mask);

    Tensor gamma = alpha, beta, gate;
    if (use_gma) {
      Intermediate inter = predict_intermediate(q, *p.gma, cfg.gating.uses_gate_ffn());
      MixtureParams mp = convert_params(inter, true_J, cfg);
      beta = gaussian_mixture_weights(mp, J, mask, cfg.norm_mode);
      auto fused = gate_fuse(alpha, beta, inter.gate_hat, cfg.gating);
      gamma = fused.first;
      gate = fused.second;
    } else {
      beta = Tensor::zeros({I, J});
      gate = Tensor::zeros({I, 1});
    }
    head_ctx.push_back(matmul(gamma, v));

    if (records) {
      AttentionRecord rec;
      rec.layer = layer_label;
      rec.head = h;
      rec.tgt_len = int(I);
      rec.src_len = int(true_J);
      rec.alpha.reserve(I * true_J);
      rec.beta.reserve(I * true_J);
      rec.gamma.reserve(I * true_J);
      for (size_t i = 0; i < I; ++i)
        for (size_t j = 0; j < true_J; ++j) {
          rec.alpha.push_back(alpha.at({i, j}));
          rec.beta.push_back(beta.at({i, j}));
          rec.gamma.push_back(gamma.at({i, j}));
        }
      for (size_t i = 0; i < I; ++i) rec.gate.push_back(gate.at({i, 0}));
      records->push_back(std::move(rec));
    }
  }
  return add(matmul(concat_last(head_ctx), p.w_o), p.b_o);
}

}  // namespace gma
