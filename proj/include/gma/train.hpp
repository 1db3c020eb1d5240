#pragma once

// Optimization loop: padding-aware cross-entropy, Adam with inverse-sqrt
// warmup, global-norm clipping (logged, so strict-mode instability stays
// visible as clip frequency), periodic held-out evaluation, and metrics CSV.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gma/analysis.hpp"
#include "gma/checkpoint.hpp"
#include "gma/data.hpp"
#include "gma/model.hpp"
#include "gma/rng.hpp"

namespace gma::train {

// Mean negative log-likelihood over non-pad positions, natural log.
// Fused forward/backward; row r of logits is scored against targets[r].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            int pad_id = data::kPadId) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  size_t I = logits.dim(0), V = logits.dim(1);
  std::vector<size_t> live;
  for (size_t r = 0; r < I; ++r) {
    if (targets[r] == pad_id) continue;
    if (targets[r] < 0 || size_t(targets[r]) >= V)
      throw ContractError("cross_entropy: target id " + std::to_string(targets[r]) +
                          " outside vocab of " + std::to_string(V));
    live.push_back(r);
  }
  if (live.empty()) throw ContractError("cross_entropy: all positions are padding");

  const auto x = logits.data();
  double nll = 0.0;
  for (size_t r : live) {
    double mx = x[r * V];
    for (size_t v = 1; v < V; ++v) mx = std::max(mx, x[r * V + v]);
    double lse = 0.0;
    for (size_t v = 0; v < V; ++v) lse += std::exp(x[r * V + v] - mx);
    nll += mx + std::log(lse) - x[r * V + size_t(targets[r])];
  }
  double inv_n = 1.0 / double(live.size());
  auto ln = logits.node();
  std::vector<int> tcopy(targets);
  return make_op("cross_entropy", Shape{}, {nll * inv_n}, {logits},
                 [ln, tcopy, live, V, inv_n](detail::Node& self) {
                   ln->ensure_grad();
                   double g = self.grad[0] * inv_n;
                   const auto& xv = ln->value;
                   for (size_t r : live) {
                     double mx = xv[r * V];
                     for (size_t v = 1; v < V; ++v) mx = std::max(mx, xv[r * V + v]);
                     double lse = 0.0;
                     for (size_t v = 0; v < V; ++v) lse += std::exp(xv[r * V + v] - mx);
                     for (size_t v = 0; v < V; ++v) {
                       double p = std::exp(xv[r * V + v] - mx) / lse;
                       ln->grad[r * V + v] += g * (p - (int(v) == tcopy[r] ? 1.0 : 0.0));
                     }
                   }
                 });
}

inline double token_accuracy(const Tensor& logits, const std::vector<int>& targets,
                             int pad_id = data::kPadId) {
  size_t I = logits.dim(0), V = logits.dim(1);
  size_t hit = 0, n = 0;
  for (size_t r = 0; r < I && r < targets.size(); ++r) {
    if (targets[r] == pad_id) continue;
    size_t best = 0;
    for (size_t v = 1; v < V; ++v)
      if (logits.at({r, v}) > logits.at({r, best})) best = v;
    hit += int(best) == targets[r];
    ++n;
  }
  return n ? double(hit) / double(n) : 0.0;
}

inline double lr_schedule(int64_t step, int d_model, int64_t warmup) {
  if (step < 1) throw ContractError("lr_schedule: step must be >= 1");
  double s = double(step), w = double(warmup);
  return std::pow(double(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

struct TrainConfig {
  int64_t steps = 2000;
  int batch_size = 16;
  int64_t warmup_steps = 400;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 1.0;
  uint64_t seed = 1;
  int64_t eval_every = 200;
  int eval_size = 64;
  bool log_alignment_metrics = false;

  void validate() const {
    if (steps < 1) throw ContractError("TrainConfig: steps must be > 0");
    if (warmup_steps < 1) throw ContractError("TrainConfig: warmup_steps must be > 0");
    if (batch_size < 1) throw ContractError("TrainConfig: batch_size must be > 0");
    if (eval_every < 1) throw ContractError("TrainConfig: eval_every must be > 0");
    if (eval_size < 1) throw ContractError("TrainConfig: eval_size must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"warmup_steps", c.warmup_steps},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"clip_norm", c.clip_norm},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"eval_size", c.eval_size},
                     {"log_alignment_metrics", c.log_alignment_metrics}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_size = j.value("eval_size", c.eval_size);
  c.log_alignment_metrics = j.value("log_alignment_metrics", c.log_alignment_metrics);
}

class Adam {
 public:
  Adam(ParamStore& params, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9)
      : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params.items()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    size_t idx = 0;
    for (const auto& [name, t] : params_->items()) {
      auto node = t.node();
      auto& m = m_[idx];
      auto& v = v_[idx];
      ++idx;
      bool has_grad = !node->grad.empty();
      for (size_t i = 0; i < node->value.size(); ++i) {
        double g = has_grad ? node->grad[i] : 0.0;
        if (!std::isfinite(g))
          throw ContractError("non-finite gradient in " + name + " at optimizer step " +
                              std::to_string(t_));
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        node->value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

  int64_t step_count() const { return t_; }

  ParamStore export_state() const {
    ParamStore st;
    size_t idx = 0;
    for (const auto& [name, t] : params_->items()) {
      st.add("adam.m." + name, Tensor::from(t.shape(), m_[idx]));
      st.add("adam.v." + name, Tensor::from(t.shape(), v_[idx]));
      ++idx;
    }
    st.add("adam.t", Tensor::from({1}, {double(t_)}));
    return st;
  }

  void import_state(const ParamStore& st) {
    size_t idx = 0;
    for (const auto& [name, t] : params_->items()) {
      const auto ms = st.at("adam.m." + name).data();
      const auto vs = st.at("adam.v." + name).data();
      m_[idx].assign(ms.begin(), ms.end());
      v_[idx].assign(vs.begin(), vs.end());
      if (m_[idx].size() != t.size() || v_[idx].size() != t.size())
        throw ContractError("optimizer state size mismatch for " + name);
      ++idx;
    }
    t_ = int64_t(st.at("adam.t").item());
  }

 private:
  ParamStore* params_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

// Global-norm clip across all parameter gradients; returns (norm, clipped).
inline std::pair<double, bool> clip_gradients(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params.items()) {
    auto node = t.node();
    for (double g : node->grad) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return {norm, false};
  double scale = max_norm / norm;
  for (const auto& [name, t] : params.items()) {
    auto node = t.node();
    for (double& g : node->grad) g *= scale;
  }
  return {norm, true};
}

struct StepRow {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double token_acc = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  double clip_frac = 0.0;  // cumulative fraction of clipped steps so far
  std::optional<double> aer;
  std::optional<double> h_alpha, h_beta, h_gamma;
};

struct EvalRow {
  int64_t step = 0;
  double loss = 0.0;
  double token_acc = 0.0;
};

struct TrainResult {
  std::vector<StepRow> rows;
  std::vector<EvalRow> evals;
  double clip_fraction = 0.0;
  double final_eval_loss = 0.0;
  double final_eval_acc = 0.0;
  int64_t steps_run = 0;
};

// Held-out loss (mean NLL per non-pad token) and token accuracy.
inline std::pair<double, double> evaluate(const Model& model,
                                          const std::vector<data::AlignedExample>& corpus) {
  NoGradScope ng;
  double nll_total = 0.0, acc_total = 0.0;
  size_t tokens = 0;
  for (const auto& ex : corpus) {
    std::vector<int> targets(ex.tgt);
    targets.push_back(data::kEosId);
    Tensor logits = model.forward_teacher_forced(ex.src, ex.tgt).logits;
    size_t n = targets.size();
    nll_total += cross_entropy(logits, targets).item() * double(n);
    acc_total += token_accuracy(logits, targets) * double(n);
    tokens += n;
  }
  if (!tokens) throw ContractError("evaluate: empty corpus");
  return {nll_total / double(tokens), acc_total / double(tokens)};
}

inline data::TaskSpec holdout_spec(const data::TaskSpec& task, int eval_size) {
  data::TaskSpec spec = task;
  spec.corpus_size = eval_size;
  spec.map_seed = task.effective_map_seed();  // fresh sentences, same mapping
  spec.seed = mix64(task.seed ^ 0x4556414cull);
  return spec;
}

// Passing an Adam lets the caller checkpoint optimizer state afterwards;
// it must have been built over this model's parameters.
inline TrainResult train(Model& model, const data::TaskSpec& task, const TrainConfig& tc,
                         Adam* external_adam = nullptr) {
  tc.validate();
  auto corpus = data::generate(task);
  auto holdout = data::generate(holdout_spec(task, tc.eval_size));

  Adam local_adam(model.params(), tc.beta1, tc.beta2, tc.eps);
  Adam& adam = external_adam ? *external_adam : local_adam;
  TrainResult result;
  size_t clipped_steps = 0;
  size_t cursor = 0;
  uint64_t epoch = 0;
  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto reshuffle = [&] {
    Rng rng(tc.seed, 0x45504f43ull + epoch);
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.range(0, int(i - 1))]);
    ++epoch;
    cursor = 0;
  };
  reshuffle();

  for (int64_t step = 1; step <= tc.steps; ++step) {
    model.params().zero_grad_all();
    Tensor batch_loss;
    double batch_acc = 0.0;
    size_t batch_tokens = 0;
    for (int b = 0; b < tc.batch_size; ++b) {
      if (cursor >= order.size()) reshuffle();
      const auto& ex = corpus[order[cursor++]];
      std::vector<int> targets(ex.tgt);
      targets.push_back(data::kEosId);
      Tensor logits = model.forward_teacher_forced(ex.src, ex.tgt).logits;
      Tensor weighted = mul_scalar(cross_entropy(logits, targets), double(targets.size()));
      batch_loss = b == 0 ? weighted : add(batch_loss, weighted);
      batch_acc += token_accuracy(logits, targets) * double(targets.size());
      batch_tokens += targets.size();
    }
    batch_loss = mul_scalar(batch_loss, 1.0 / double(batch_tokens));
    double loss = batch_loss.item();
    if (!std::isfinite(loss))
      throw ContractError("training diverged (non-finite loss) at step " + std::to_string(step));
    batch_loss.backward();

    auto [norm, was_clipped] = clip_gradients(model.params(), tc.clip_norm);
    clipped_steps += was_clipped;
    double lr = lr_schedule(step, model.config().d_model, tc.warmup_steps);
    adam.step(lr);

    StepRow row;
    row.step = step;
    row.loss = loss;
    row.lr = lr;
    row.token_acc = batch_acc / double(batch_tokens);
    row.grad_norm = norm;
    row.clipped = was_clipped;
    row.clip_frac = double(clipped_steps) / double(step);

    if (step % tc.eval_every == 0 || step == tc.steps) {
      auto [eloss, eacc] = evaluate(model, holdout);
      result.evals.push_back({step, eloss, eacc});
      result.final_eval_loss = eloss;
      result.final_eval_acc = eacc;
      if (tc.log_alignment_metrics) {
        NoGradScope ng;
        auto score = analysis::corpus_aer(model, holdout);
        row.aer = score.aer;
        std::vector<AttentionRecord> records;
        for (const auto& ex : holdout) {
          auto recs = model.forced_decode_attention(ex.src, ex.tgt);
          records.insert(records.end(), recs.begin(), recs.end());
        }
        row.h_alpha = analysis::record_entropy(records, analysis::AttnKind::alpha).mean;
        row.h_beta = analysis::record_entropy(records, analysis::AttnKind::beta).mean;
        row.h_gamma = analysis::record_entropy(records, analysis::AttnKind::gamma).mean;
      }
    }
    result.rows.push_back(std::move(row));
    result.steps_run = step;
  }
  result.clip_fraction = double(clipped_steps) / double(tc.steps);
  return result;
}

inline void write_metrics_csv(const std::string& path, const TrainResult& result) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write metrics CSV: " + path);
  out << "step,loss,lr,token_acc,clip_frac,aer,mean_entropy_alpha,mean_entropy_beta,mean_entropy_gamma\n";
  out << std::setprecision(17);
  auto opt = [&out](const std::optional<double>& v) -> std::ofstream& {
    if (v) out << *v;
    return out;
  };
  for (const auto& r : result.rows) {
    out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.token_acc << ',' << r.clip_frac
        << ',';
    opt(r.aer) << ',';
    opt(r.h_alpha) << ',';
    opt(r.h_beta) << ',';
    opt(r.h_gamma) << '\n';
  }
}

// Bundles model weights, optimizer state, and config echo for saving.
inline Checkpoint make_checkpoint(const Model& model, const Adam& adam, int64_t step,
                                  nlohmann::json config_echo) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.config = std::move(config_echo);
  for (const auto& [name, t] : model.params().items()) {
    const auto d = t.data();
    ckpt.params.add(name, Tensor::from(t.shape(), {d.begin(), d.end()}));
  }
  ckpt.opt_state = adam.export_state();
  return ckpt;
}

}  // namespace gma::train
