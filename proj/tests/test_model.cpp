#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "gma/model.hpp"
#include "gma/train.hpp"
#include "oracles.hpp"

using namespace gma;
using Catch::Matchers::ContainsSubstring;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ffn = 8;
  cfg.src_vocab = 8;
  cfg.tgt_vocab = 8;
  cfg.max_len = 16;
  cfg.gma_layers = {1};
  cfg.gma.K = 2;
  return cfg;
}

bool same_data(const Tensor& a, const Tensor& b) {
  const auto x = a.data();
  const auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(), y.end());
}

double max_row_diff(const Tensor& a, const Tensor& b, size_t row) {
  double m = 0.0;
  for (size_t v = 0; v < a.dim(1); ++v)
    m = std::max(m, std::abs(a.at({row, v}) - b.at({row, v})));
  return m;
}

}  // namespace

TEST_CASE("encoder output is shaped, deterministic, and order sensitive") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_ffn = 48;
  cfg.src_vocab = 16;
  cfg.tgt_vocab = 16;
  Model m(cfg, 7);

  std::vector<int> src{3, 4, 5, 6, 7};
  Tensor e1 = m.encode(src);
  Tensor e2 = m.encode(src);
  REQUIRE(e1.shape() == Shape{5, 32});
  REQUIRE(same_data(e1, e2));

  Tensor e3 = m.encode({4, 3, 5, 6, 7});
  double diff = 0.0;
  for (size_t i = 0; i < e1.size(); ++i) diff = std::max(diff, std::abs(e1.data()[i] - e3.data()[i]));
  REQUIRE(diff > 1e-6);
}

TEST_CASE("token ids and lengths are validated on both sides") {
  ModelConfig cfg = tiny_config();
  cfg.max_len = 4;
  Model m(cfg, 1);

  REQUIRE_THROWS_WITH(m.encode({3, 8}), ContainsSubstring("source token id 8"));
  REQUIRE_THROWS_WITH(m.forward_teacher_forced({3}, {3, -1}),
                      ContainsSubstring("target token id -1"));
  REQUIRE_THROWS_WITH(m.encode({3, 4, 5, 6, 7}), ContainsSubstring("exceeds max_len"));
}

TEST_CASE("decoder logits respect causal order") {
  ModelConfig cfg = tiny_config();
  Model m(cfg, 3);
  std::vector<int> src{3, 4, 5};
  std::vector<int> a{3, 4, 5, 6};
  std::vector<int> b{3, 4, 7, 6};  // differs at position 2

  Tensor la = m.forward_teacher_forced(src, a).logits;
  Tensor lb = m.forward_teacher_forced(src, b).logits;
  REQUIRE(la.dim(0) == 5);  // four target rows plus the end-of-sequence row

  // Row r sees decoder inputs up to target r-1, so rows 0..2 cannot change.
  for (size_t r = 0; r <= 2; ++r) REQUIRE(max_row_diff(la, lb, r) == 0.0);
  REQUIRE(max_row_diff(la, lb, 3) > 1e-9);
  REQUIRE(max_row_diff(la, lb, 4) > 1e-9);
}

TEST_CASE("plain cross-attention layers report empty mixture records") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 2;
  cfg.gma_layers = {};
  Model m(cfg, 5);

  auto records = m.forced_decode_attention({3, 4, 5}, {5, 4});
  REQUIRE(records.size() == size_t(cfg.n_layers * cfg.n_heads));
  for (const auto& r : records) {
    REQUIRE(r.alpha == r.gamma);
    REQUIRE(std::all_of(r.beta.begin(), r.beta.end(), [](double x) { return x == 0.0; }));
    REQUIRE(std::all_of(r.gate.begin(), r.gate.end(), [](double x) { return x == 0.0; }));
  }
}

TEST_CASE("backpropagation reaches every parameter tensor") {
  ModelConfig cfg = tiny_config();
  Model m(cfg, 11);
  std::vector<int> src{3, 4, 5};
  std::vector<int> tgt{5, 4, 3};
  std::vector<int> targets(tgt);
  targets.push_back(data::kEosId);

  auto loss_value = [&] {
    NoGradScope ng;
    return train::cross_entropy(m.forward_teacher_forced(src, tgt).logits, targets).item();
  };

  m.params().zero_grad_all();
  Tensor loss = train::cross_entropy(m.forward_teacher_forced(src, tgt).logits, targets);
  loss.backward();

  const double h = 1e-5;
  double worst = 0.0;
  for (const auto& [name, t] : m.params().items()) {
    Tensor& p = m.params().at(name);
    REQUIRE(p.grad().size() == p.size());
    const auto gs = p.grad();
    std::vector<double> g(gs.begin(), gs.end());
    auto& vals = p.mutable_data();
    bool touched = false;
    for (size_t i = 0; i < vals.size(); ++i) {
      double orig = vals[i];
      vals[i] = orig + h;
      double up = loss_value();
      vals[i] = orig - h;
      double dn = loss_value();
      vals[i] = orig;
      double fd = (up - dn) / (2.0 * h);
      double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-6});
      worst = std::max(worst, std::abs(fd - g[i]) / denom);
      touched = touched || fd != 0.0 || g[i] != 0.0;
    }
    INFO(name);
    CHECK(touched);
    REQUIRE(worst < 1e-4);
  }
}

TEST_CASE("model without mixture layers matches the scalar-loop reference") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.d_ffn = 24;
  cfg.src_vocab = 12;
  cfg.tgt_vocab = 12;
  cfg.gma_layers = {};

  std::vector<int> src{3, 5, 7, 9};
  std::vector<int> tgt{4, 6, 8};
  std::vector<int> tgt_in{data::kBosId, 4, 6, 8};
  std::vector<int> targets{4, 6, 8, data::kEosId};

  for (bool pre : {true, false}) {
    cfg.pre_norm = pre;
    Model m(cfg, 11);
    oracle::TCfg tc{cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.pre_norm};

    oracle::Mat want = oracle::transformer_logits(m.params(), tc, src, tgt_in);
    Tensor got = m.forward_teacher_forced(src, tgt).logits;
    INFO((pre ? "pre_norm" : "post_norm"));
    REQUIRE(oracle::max_abs_diff(want, got) < 1e-10);

    double nll = train::cross_entropy(got, targets).item();
    REQUIRE(std::abs(nll - oracle::mean_nll(want, targets)) < 1e-10);
  }
}

TEST_CASE("greedy decode caps length and is deterministic") {
  ModelConfig cfg = tiny_config();
  cfg.max_len = 6;
  Model m(cfg, 13);
  std::vector<int> src{3, 4, 5, 6};

  auto one = m.greedy_decode(src, 1);
  REQUIRE(one.size() <= 1);
  auto a = m.greedy_decode(src, 100);
  auto b = m.greedy_decode(src, 100);
  REQUIRE(a.size() <= 6);
  REQUIRE(a == b);
  for (int id : a) REQUIRE((id >= 0 && id < cfg.tgt_vocab && id != data::kEosId));
}

TEST_CASE("forced decoding yields one record per mixture layer and head") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 2;
  cfg.gma_layers = {1, 2};
  cfg.gma.norm_mode = NormMode::strict;
  cfg.gma.gating.kind = Gating::Kind::average;
  Model m(cfg, 17);

  std::vector<int> src{3, 4, 5, 6};
  std::vector<int> tgt{6, 5, 4};
  auto records = m.forced_decode_attention(src, tgt);
  REQUIRE(records.size() == size_t(cfg.n_layers * cfg.n_heads));

  std::set<std::pair<int, int>> seen;
  for (const auto& r : records) {
    seen.insert({r.layer, r.head});
    REQUIRE(r.src_len == 4);
    REQUIRE(r.tgt_len == int(tgt.size()) + 1);
    for (int i = 0; i < r.tgt_len; ++i) {
      double sa = 0.0, sb = 0.0, sg = 0.0;
      for (int j = 0; j < r.src_len; ++j) {
        sa += r.alpha[size_t(i * r.src_len + j)];
        sb += r.beta[size_t(i * r.src_len + j)];
        sg += r.gamma[size_t(i * r.src_len + j)];
      }
      REQUIRE_THAT(sa, Catch::Matchers::WithinAbs(1.0, 1e-9));
      REQUIRE_THAT(sb, Catch::Matchers::WithinAbs(1.0, 1e-9));  // strict rows renormalized
      REQUIRE_THAT(sg, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
  }
  REQUIRE(seen.size() == records.size());
  for (int l = 1; l <= 2; ++l)
    for (int h = 0; h < 2; ++h) REQUIRE(seen.count({l, h}) == 1);
}

TEST_CASE("mixture parameter overhead stays near a tenth of a percent at full scale") {
  ModelConfig cfg;
  cfg.n_layers = 6;
  cfg.d_model = 512;
  cfg.n_heads = 8;
  cfg.d_ffn = 2048;
  cfg.src_vocab = 37000;
  cfg.tgt_vocab = 37000;
  cfg.max_len = 256;
  cfg.gma_layers = {1, 2, 3, 4, 5, 6};
  cfg.gma.K = 4;
  cfg.gma.gating.kind = Gating::Kind::learned;

  auto [total, gma_part] = model_param_counts(cfg);
  REQUIRE(total > 100'000'000);

  // Per layer: three K-output predictor nets plus the gate net on d_k=64.
  size_t predictor = 64 * 64 + 64 + 64 * 4 + 4;
  size_t gate = 64 * 64 + 64 + 64 * 1 + 1;
  REQUIRE(gma_part == 6 * (3 * predictor + gate));

  double ratio = gma_overhead_ratio(cfg);
  REQUIRE(ratio > 0.0005);
  REQUIRE(ratio < 0.002);
}

TEST_CASE("dot-only gating allocates exactly the plain-transformer parameters") {
  ModelConfig plain = tiny_config();
  plain.gma_layers = {};

  ModelConfig dot = tiny_config();
  dot.gma.gating.kind = Gating::Kind::dot_only;

  Model a(plain, 29), b(dot, 29);
  REQUIRE(a.param_count() == b.param_count());
  REQUIRE(a.gma_param_count() == 0);
  REQUIRE(b.gma_param_count() == 0);

  auto ia = a.params().items().begin();
  for (const auto& [name, t] : b.params().items()) {
    REQUIRE(ia->first == name);
    REQUIRE(same_data(ia->second, t));
    ++ia;
  }

  ModelConfig avg = tiny_config();
  avg.gma.gating.kind = Gating::Kind::average;
  Model c(avg, 29);
  REQUIRE(c.params().has("dec.0.gma.omega_w"));
  REQUIRE_FALSE(c.params().has("dec.0.gma.gate_w"));

  Model d(tiny_config(), 29);  // learned gating
  REQUIRE(d.params().has("dec.0.gma.gate_w"));
}

TEST_CASE("parameter loading requires identical names and shapes") {
  ModelConfig cfg = tiny_config();
  Model a(cfg, 1), b(cfg, 2);
  REQUIRE_FALSE(same_data(a.params().at("out.w"), b.params().at("out.w")));

  b.load_params(a.params());
  std::vector<int> src{3, 4}, tgt{4, 3};
  REQUIRE(same_data(a.forward_teacher_forced(src, tgt).logits,
                    b.forward_teacher_forced(src, tgt).logits));

  ModelConfig other = tiny_config();
  other.d_ffn = 12;
  Model c(other, 1);
  REQUIRE_THROWS_WITH(a.load_params(c.params()), ContainsSubstring("shape mismatch"));

  ModelConfig fewer = tiny_config();
  fewer.gma_layers = {};
  Model e(fewer, 1);
  REQUIRE_THROWS_AS(a.load_params(e.params()), ContractError);
}

TEST_CASE("model config survives a JSON round trip") {
  ModelConfig cfg;
  cfg.n_layers = 3;
  cfg.pre_norm = false;
  cfg.gma_layers = {2, 3};
  cfg.gma.K = 8;
  cfg.gma.norm_mode = NormMode::synthesis;
  cfg.gma.gating.kind = Gating::Kind::fixed;
  cfg.gma.gating.fixed_g = 0.25;
  cfg.gma.share_var = true;

  nlohmann::json j = cfg;
  ModelConfig back = j.get<ModelConfig>();
  nlohmann::json j2 = back;
  REQUIRE(j == j2);
  REQUIRE(back.gma_layers == std::set<int>{2, 3});
  REQUIRE(back.gma.norm_mode == NormMode::synthesis);
  REQUIRE(back.gma.gating.kind == Gating::Kind::fixed);
  REQUIRE(back.gma.gating.fixed_g == 0.25);
  REQUIRE(back.gma.share_var);
  REQUIRE_FALSE(back.gma.share_mean);
}
