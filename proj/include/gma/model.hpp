#pragma once

// Toy Transformer encoder-decoder processed one sentence at a time. Each
// decoder layer's cross-attention either fuses in the Gaussian-mixture rows
// (layers listed in gma_layers) or stays plain dot-product. Forced decoding
// replays a reference target to harvest attention records for alignment
// work.

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gma/attention.hpp"
#include "gma/checkpoint.hpp"
#include "gma/data.hpp"
#include "gma/rng.hpp"

namespace gma {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 128;
  int src_vocab = 32;
  int tgt_vocab = 32;
  int max_len = 64;
  bool pre_norm = true;
  std::set<int> gma_layers = {1, 2};  // 1-based decoder layer indices
  GmaConfig gma;

  GmaConfig head_config() const {
    GmaConfig g = gma;
    g.d_model = d_model;
    g.n_heads = n_heads;
    return g;
  }
  void validate() const {
    if (n_layers < 1) throw ContractError("ModelConfig: n_layers must be >= 1");
    if (d_ffn < 1) throw ContractError("ModelConfig: d_ffn must be >= 1");
    if (src_vocab < data::kFirstContentId + 1 || tgt_vocab < data::kFirstContentId + 1)
      throw ContractError("ModelConfig: vocab must leave room for content tokens");
    if (max_len < 2) throw ContractError("ModelConfig: max_len must be >= 2");
    for (int l : gma_layers)
      if (l < 1 || l > n_layers)
        throw ContractError("ModelConfig: gma_layers entries must lie in 1.." +
                            std::to_string(n_layers));
    head_config().validate();
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"d_ffn", c.d_ffn},
                     {"src_vocab", c.src_vocab},
                     {"tgt_vocab", c.tgt_vocab},
                     {"max_len", c.max_len},
                     {"pre_norm", c.pre_norm},
                     {"gma_layers", c.gma_layers},
                     {"gma",
                      {{"k", c.gma.K},
                       {"norm_mode", to_string(c.gma.norm_mode)},
                       {"gating", to_string(c.gma.gating.kind)},
                       {"fixed_g", c.gma.gating.fixed_g},
                       {"share_mean", c.gma.share_mean},
                       {"share_var", c.gma.share_var},
                       {"share_weight", c.gma.share_weight}}}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.src_vocab = j.value("src_vocab", c.src_vocab);
  c.tgt_vocab = j.value("tgt_vocab", c.tgt_vocab);
  c.max_len = j.value("max_len", c.max_len);
  c.pre_norm = j.value("pre_norm", c.pre_norm);
  if (j.contains("gma_layers")) c.gma_layers = j.at("gma_layers").get<std::set<int>>();
  if (j.contains("gma")) {
    const auto& g = j.at("gma");
    c.gma.K = g.value("k", c.gma.K);
    if (g.contains("norm_mode")) c.gma.norm_mode = norm_mode_from_string(g.at("norm_mode"));
    if (g.contains("gating")) c.gma.gating.kind = gating_kind_from_string(g.at("gating"));
    c.gma.gating.fixed_g = g.value("fixed_g", c.gma.gating.fixed_g);
    c.gma.share_mean = g.value("share_mean", c.gma.share_mean);
    c.gma.share_var = g.value("share_var", c.gma.share_var);
    c.gma.share_weight = g.value("share_weight", c.gma.share_weight);
  }
}

enum class Init { xavier, zeros, ones, embedding };

// Single definition of the parameter layout; the model registers tensors
// through it and the count formulas walk it without allocating.
template <class F>
void for_each_model_param(const ModelConfig& cfg, F&& f) {
  size_t D = size_t(cfg.d_model), H = size_t(cfg.n_heads), dk = D / H;
  size_t K = size_t(cfg.gma.K), dff = size_t(cfg.d_ffn);
  auto attn = [&](const std::string& p) {
    f(p + ".wq", Shape{D, D}, Init::xavier);
    f(p + ".bq", Shape{D}, Init::zeros);
    f(p + ".wk", Shape{D, D}, Init::xavier);
    f(p + ".bk", Shape{D}, Init::zeros);
    f(p + ".wv", Shape{D, D}, Init::xavier);
    f(p + ".bv", Shape{D}, Init::zeros);
    f(p + ".wo", Shape{D, D}, Init::xavier);
    f(p + ".bo", Shape{D}, Init::zeros);
  };
  auto ln = [&](const std::string& p) {
    f(p + ".g", Shape{D}, Init::ones);
    f(p + ".b", Shape{D}, Init::zeros);
  };
  auto ffn = [&](const std::string& p) {
    f(p + ".w1", Shape{D, dff}, Init::xavier);
    f(p + ".b1", Shape{dff}, Init::zeros);
    f(p + ".w2", Shape{dff, D}, Init::xavier);
    f(p + ".b2", Shape{D}, Init::zeros);
  };
  auto predictor = [&](const std::string& p, size_t out) {
    f(p + "_w", Shape{dk, dk}, Init::xavier);
    f(p + "_b1", Shape{dk}, Init::zeros);
    f(p + "_v", Shape{dk, out}, Init::xavier);
    f(p + "_b2", Shape{out}, Init::zeros);
  };

  f("src_embed", Shape{size_t(cfg.src_vocab), D}, Init::embedding);
  f("tgt_embed", Shape{size_t(cfg.tgt_vocab), D}, Init::embedding);
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string p = "enc." + std::to_string(l);
    ln(p + ".ln1");
    attn(p + ".self");
    ln(p + ".ln2");
    ffn(p + ".ffn");
  }
  if (cfg.pre_norm) ln("enc.final_ln");
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string p = "dec." + std::to_string(l);
    ln(p + ".ln1");
    attn(p + ".self");
    ln(p + ".ln2");
    attn(p + ".cross");
    if (cfg.gma_layers.count(l + 1) && cfg.gma.gating.uses_gma()) {
      predictor(p + ".gma.omega", K);
      predictor(p + ".gma.mu", K);
      predictor(p + ".gma.sigma", K);
      if (cfg.gma.gating.uses_gate_ffn()) predictor(p + ".gma.gate", 1);
    }
    ln(p + ".ln3");
    ffn(p + ".ffn");
  }
  if (cfg.pre_norm) ln("dec.final_ln");
  f("out.w", Shape{D, size_t(cfg.tgt_vocab)}, Init::xavier);
  f("out.b", Shape{size_t(cfg.tgt_vocab)}, Init::zeros);
}

inline std::pair<size_t, size_t> model_param_counts(const ModelConfig& cfg) {
  size_t total = 0, gma_part = 0;
  for_each_model_param(cfg, [&](const std::string& name, const Shape& s, Init) {
    size_t n = numel(s);
    total += n;
    if (name.find(".gma.") != std::string::npos) gma_part += n;
  });
  return {total, gma_part};
}

// Extra parameters the mixture machinery adds, relative to the plain model.
inline double gma_overhead_ratio(const ModelConfig& cfg) {
  auto [total, gma_part] = model_param_counts(cfg);
  return double(gma_part) / double(total - gma_part);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& g, const Tensor& b) {
  Tensor m = mean(x, 1, true);
  Tensor c = sub(x, m);
  Tensor v = mean(mul(c, c), 1, true);
  return add(mul(div(c, sqrt(add_scalar(v, 1e-5))), g), b);
}

inline Tensor positional_encoding(size_t len, size_t d_model) {
  std::vector<double> pe(len * d_model);
  for (size_t pos = 0; pos < len; ++pos)
    for (size_t i = 0; i < d_model; ++i) {
      double angle = double(pos) / std::pow(10000.0, double(2 * (i / 2)) / double(d_model));
      pe[pos * d_model + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return Tensor::from({len, d_model}, std::move(pe));
}

class Model {
 public:
  struct Forward {
    Tensor logits;  // [len(tgt)+1 x V]; row i predicts tgt[i], last row EOS
    std::vector<AttentionRecord> records;
  };

  Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed, 0x6d6f64656cull);
    for_each_model_param(cfg_, [&](const std::string& name, const Shape& shape, Init init) {
      std::vector<double> v(numel(shape));
      switch (init) {
        case Init::xavier: {
          double a = std::sqrt(6.0 / double(shape[0] + shape[1]));
          for (auto& x : v) x = rng.uniform(-a, a);
          break;
        }
        case Init::zeros: break;
        case Init::ones: std::fill(v.begin(), v.end(), 1.0); break;
        case Init::embedding: {
          double s = 1.0 / std::sqrt(double(cfg_.d_model));
          for (auto& x : v) x = rng.normal() * s;
          break;
        }
      }
      params_.add(name, Tensor::from(shape, std::move(v), true));
    });
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  size_t param_count() const { return params_.scalar_count(); }
  size_t gma_param_count() const {
    size_t n = 0;
    for (const auto& [name, t] : params_.items())
      if (name.find(".gma.") != std::string::npos) n += t.size();
    return n;
  }

  // Copies values from a saved store; name sets and shapes must agree.
  void load_params(const ParamStore& saved) {
    if (saved.size() != params_.size())
      throw ContractError("checkpoint parameter set does not match the model");
    for (const auto& [name, t] : params_.items()) {
      const Tensor& s = saved.at(name);
      if (s.shape() != t.shape())
        throw ContractError("checkpoint shape mismatch for " + name);
      const auto sd = s.data();
      params_.at(name).mutable_data().assign(sd.begin(), sd.end());
    }
  }

  Tensor encode(const std::vector<int>& src) const {
    check_ids(src, cfg_.src_vocab, "source");
    Tensor x = embed(src, params_.at("src_embed"));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string p = "enc." + std::to_string(l);
      x = sublayer(x, p + ".ln1", [&](const Tensor& h) { return self_attention(h, p + ".self", false); });
      x = sublayer(x, p + ".ln2", [&](const Tensor& h) { return ffn(h, p + ".ffn"); });
    }
    if (cfg_.pre_norm) x = norm(x, "enc.final_ln");
    return x;
  }

  Forward forward_teacher_forced(const std::vector<int>& src, const std::vector<int>& tgt,
                                 bool want_records = false) const {
    check_ids(tgt, cfg_.tgt_vocab, "target");
    Tensor enc = encode(src);
    std::vector<int> tgt_in;
    tgt_in.reserve(tgt.size() + 1);
    tgt_in.push_back(data::kBosId);
    tgt_in.insert(tgt_in.end(), tgt.begin(), tgt.end());

    Forward out;
    Tensor x = embed(tgt_in, params_.at("tgt_embed"));
    GmaConfig head_cfg = cfg_.head_config();
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string p = "dec." + std::to_string(l);
      x = sublayer(x, p + ".ln1", [&](const Tensor& h) { return self_attention(h, p + ".self", true); });
      CrossAttentionParams cp = cross_params(l);
      x = sublayer(x, p + ".ln2", [&](const Tensor& h) {
        return cross_attention_forward(h, enc, cp, head_cfg, {},
                                       want_records ? &out.records : nullptr, l + 1);
      });
      x = sublayer(x, p + ".ln3", [&](const Tensor& h) { return ffn(h, p + ".ffn"); });
    }
    if (cfg_.pre_norm) x = norm(x, "dec.final_ln");
    out.logits = add(matmul(x, params_.at("out.w")), params_.at("out.b"));
    return out;
  }

  std::vector<int> greedy_decode(const std::vector<int>& src, size_t max_len) const {
    NoGradScope ng;
    size_t cap = std::min(max_len, size_t(cfg_.max_len));
    std::vector<int> out;
    while (out.size() < cap) {
      Tensor logits = forward_teacher_forced(src, out).logits;
      size_t last = logits.dim(0) - 1;
      int best = 0;
      double best_v = logits.at({last, 0});
      for (int v = 1; v < cfg_.tgt_vocab; ++v)
        if (logits.at({last, size_t(v)}) > best_v) {
          best_v = logits.at({last, size_t(v)});
          best = v;
        }
      if (best == data::kEosId) break;
      out.push_back(best);
    }
    return out;
  }

  std::vector<AttentionRecord> forced_decode_attention(const std::vector<int>& src,
                                                       const std::vector<int>& ref_tgt) const {
    NoGradScope ng;
    return forward_teacher_forced(src, ref_tgt, true).records;
  }

 private:
  void check_ids(const std::vector<int>& ids, int vocab, const char* side) const {
    if (int(ids.size()) > cfg_.max_len)
      throw ContractError(std::string(side) + " length " + std::to_string(ids.size()) +
                          " exceeds max_len " + std::to_string(cfg_.max_len));
    for (int id : ids)
      if (id < 0 || id >= vocab)
        throw ContractError(std::string(side) + " token id " + std::to_string(id) +
                            " outside vocab of " + std::to_string(vocab));
  }

  Tensor embed(const std::vector<int>& ids, const Tensor& table) const {
    Tensor x = mul_scalar(take_rows(table, ids), std::sqrt(double(cfg_.d_model)));
    return add(x, positional_encoding(ids.size(), size_t(cfg_.d_model)));
  }

  Tensor norm(const Tensor& x, const std::string& p) const {
    return layer_norm(x, params_.at(p + ".g"), params_.at(p + ".b"));
  }

  template <class Sub>
  Tensor sublayer(const Tensor& x, const std::string& ln_name, Sub&& sub) const {
    if (cfg_.pre_norm) return add(x, sub(norm(x, ln_name)));
    return layer_norm(add(x, sub(x)), params_.at(ln_name + ".g"), params_.at(ln_name + ".b"));
  }

  Tensor ffn(const Tensor& x, const std::string& p) const {
    Tensor h = relu(add(matmul(x, params_.at(p + ".w1")), params_.at(p + ".b1")));
    return add(matmul(h, params_.at(p + ".w2")), params_.at(p + ".b2"));
  }

  Tensor self_attention(const Tensor& x, const std::string& p, bool causal) const {
    size_t T = x.dim(0), H = size_t(cfg_.n_heads), dk = size_t(cfg_.d_model) / H;
    Tensor q_all = add(matmul(x, params_.at(p + ".wq")), params_.at(p + ".bq"));
    Tensor k_all = add(matmul(x, params_.at(p + ".wk")), params_.at(p + ".bk"));
    Tensor v_all = add(matmul(x, params_.at(p + ".wv")), params_.at(p + ".bv"));
    Tensor bias;
    if (causal) {
      std::vector<double> b(T * T, 0.0);
      for (size_t i = 0; i < T; ++i)
        for (size_t j = i + 1; j < T; ++j) b[i * T + j] = -1e30;
      bias = Tensor::from({T, T}, std::move(b));
    }
    std::vector<Tensor> heads;
    heads.reserve(H);
    for (size_t h = 0; h < H; ++h) {
      Tensor q = slice_last(q_all, h * dk, dk);
      Tensor k = slice_last(k_all, h * dk, dk);
      Tensor v = slice_last(v_all, h * dk, dk);
      Tensor scores = mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(double(dk)));
      if (causal) scores = add(scores, bias);
      heads.push_back(matmul(softmax(scores, 1), v));
    }
    return add(matmul(concat_last(heads), params_.at(p + ".wo")), params_.at(p + ".bo"));
  }

  CrossAttentionParams cross_params(int l) const {
    std::string p = "dec." + std::to_string(l);
    CrossAttentionParams cp;
    cp.w_q = params_.at(p + ".cross.wq");
    cp.b_q = params_.at(p + ".cross.bq");
    cp.w_k = params_.at(p + ".cross.wk");
    cp.b_k = params_.at(p + ".cross.bk");
    cp.w_v = params_.at(p + ".cross.wv");
    cp.b_v = params_.at(p + ".cross.bv");
    cp.w_o = params_.at(p + ".cross.wo");
    cp.b_o = params_.at(p + ".cross.bo");
    if (params_.has(p + ".gma.omega_w")) {
      GmaHeadParams g;
      g.w_omega = params_.at(p + ".gma.omega_w");
      g.b_omega1 = params_.at(p + ".gma.omega_b1");
      g.v_omega = params_.at(p + ".gma.omega_v");
      g.b_omega2 = params_.at(p + ".gma.omega_b2");
      g.w_mu = params_.at(p + ".gma.mu_w");
      g.b_mu1 = params_.at(p + ".gma.mu_b1");
      g.v_mu = params_.at(p + ".gma.mu_v");
      g.b_mu2 = params_.at(p + ".gma.mu_b2");
      g.w_sigma = params_.at(p + ".gma.sigma_w");
      g.b_sigma1 = params_.at(p + ".gma.sigma_b1");
      g.v_sigma = params_.at(p + ".gma.sigma_v");
      g.b_sigma2 = params_.at(p + ".gma.sigma_b2");
      if (params_.has(p + ".gma.gate_w")) {
        g.w_g = params_.at(p + ".gma.gate_w");
        g.b_g1 = params_.at(p + ".gma.gate_b1");
        g.v_g = params_.at(p + ".gma.gate_v");
        g.b_g2 = params_.at(p + ".gma.gate_b2");
      }
      cp.gma = std::move(g);
    }
    return cp;
  }

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace gma
