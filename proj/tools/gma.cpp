// Command-line front end: generate / train / evaluate / analyze / sweep.
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gma/analysis.hpp"
#include "gma/config.hpp"
#include "gma/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0, kUsage = 1, kRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Runs the configuration phase of a command; any failure there is the
// user's input, not ours, so it maps to exit code 1.
template <class F>
auto usage_phase(F&& f) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::string timestamp_name(const char* prefix) {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
#if defined(_WIN32)
  gmtime_s(&tm, &t);
#else
  gmtime_r(&t, &tm);
#endif
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return std::string(prefix) + "-" + buf;
}

// Precedence: --out-dir flag, then config paths.out_dir, then OUTPUT_DIR.
std::string pick_out_dir(const std::string& flag_dir, const gma::config::RunConfig* rc) {
  if (!flag_dir.empty()) return flag_dir;
  std::string dflt = gma::config::RunConfig{}.out_dir;
  if (rc && rc->out_dir != dflt) return rc->out_dir;
  if (const char* env = std::getenv("OUTPUT_DIR"); env && *env) return env;
  return dflt;
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw gma::ContractError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " path is required");
  if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

gma::config::RunConfig load_run_config(const std::string& config_path,
                                       const std::vector<std::string>& overrides) {
  return usage_phase([&] {
    if (config_path.empty()) return gma::config::parse_config(json::object(), overrides);
    require_file(config_path, "config file");
    return gma::config::load_config(config_path, overrides);
  });
}

struct TrainedRun {
  gma::train::TrainResult result;
  bool diverged = false;
  std::string error;
};

TrainedRun run_training(const gma::config::RunConfig& rc, const fs::path& dir) {
  fs::create_directories(dir);
  write_json_file(dir / "config.json", json(rc));

  gma::Model model(rc.model, rc.train.seed);
  gma::train::Adam adam(model.params(), rc.train.beta1, rc.train.beta2, rc.train.eps);
  TrainedRun run;
  try {
    run.result = gma::train::train(model, rc.task, rc.train, &adam);
  } catch (const gma::ContractError& e) {
    run.diverged = true;
    run.error = e.what();
    write_json_file(dir / "report.json", json{{"status", "diverged"}, {"error", run.error}});
    return run;
  }

  gma::train::write_metrics_csv((dir / "metrics.csv").string(), run.result);
  json echo{{"model", rc.model}, {"train", rc.train}, {"task", rc.task}};
  gma::save_checkpoint((dir / "final.ckpt").string(),
                       gma::train::make_checkpoint(model, adam, run.result.steps_run, echo));
  write_json_file(dir / "report.json", json{{"status", "ok"},
                                            {"steps", run.result.steps_run},
                                            {"final_eval_loss", run.result.final_eval_loss},
                                            {"final_eval_acc", run.result.final_eval_acc},
                                            {"clip_fraction", run.result.clip_fraction}});
  return run;
}

struct LoadedModel {
  gma::ModelConfig config;
  std::unique_ptr<gma::Model> model;
  json ckpt_config;
};

LoadedModel load_model(const std::string& ckpt_path) {
  usage_phase([&] { require_file(ckpt_path, "checkpoint"); return 0; });
  gma::Checkpoint ckpt = gma::load_checkpoint(ckpt_path);
  LoadedModel lm;
  if (!ckpt.config.contains("model"))
    throw gma::ContractError("checkpoint has no model config: " + ckpt_path);
  lm.config = ckpt.config.at("model").get<gma::ModelConfig>();
  lm.model = std::make_unique<gma::Model>(lm.config, 1);
  lm.model->load_params(ckpt.params);
  lm.ckpt_config = std::move(ckpt.config);
  return lm;
}

// Corpus from --corpus if given, else the held-out split of the task the
// checkpoint was trained on.
std::vector<gma::data::AlignedExample> load_eval_corpus(const std::string& corpus_path,
                                                        const json& ckpt_config) {
  if (!corpus_path.empty()) {
    usage_phase([&] { require_file(corpus_path, "corpus"); return 0; });
    return gma::data::read_corpus(corpus_path);
  }
  if (!ckpt_config.contains("task"))
    throw UsageError("checkpoint carries no task; pass --corpus");
  auto task = ckpt_config.at("task").get<gma::data::TaskSpec>();
  int eval_size = 64;
  if (ckpt_config.contains("train"))
    eval_size = ckpt_config.at("train").get<gma::train::TrainConfig>().eval_size;
  return gma::data::generate(gma::train::holdout_spec(task, eval_size));
}

json evaluate_model(const gma::Model& model, const std::vector<gma::data::AlignedExample>& corpus,
                    gma::analysis::AttnKind kind) {
  auto [loss, acc] = gma::train::evaluate(model, corpus);
  std::vector<std::vector<int>> hyps, refs;
  for (const auto& ex : corpus) {
    hyps.push_back(model.greedy_decode(ex.src, size_t(model.config().max_len)));
    refs.push_back(ex.tgt);
  }
  json out{{"examples", corpus.size()},
           {"eval_loss", loss},
           {"token_accuracy", acc},
           {"bleu", gma::analysis::corpus_bleu(hyps, refs)}};
  try {
    auto score = gma::analysis::corpus_aer(model, corpus, kind);
    out["aer"] = score.aer;
    out["alignment_precision"] = score.precision;
    out["alignment_recall"] = score.recall;
  } catch (const gma::ContractError&) {
    out["aer"] = nullptr;  // single-layer decoders have no penultimate layer
  }
  return out;
}

// ---- sweep axes ----

std::set<int> named_layer_set(const std::string& name, int n_layers) {
  if (name == "none") return {};
  if (name == "all") {
    std::set<int> s;
    for (int l = 1; l <= n_layers; ++l) s.insert(l);
    return s;
  }
  if (n_layers < 2) throw UsageError("layer sweep needs n_layers >= 2");
  if (name == "bottom2") return {1, 2};
  if (name == "middle2") return {n_layers / 2, n_layers / 2 + 1};
  if (name == "top2") return {n_layers - 1, n_layers};
  throw UsageError("unknown gma_layers value '" + name +
                   "' (expected none, bottom2, middle2, top2, or all)");
}

struct SweepRun {
  std::string value;
  gma::config::RunConfig rc;
};

std::vector<SweepRun> expand_axis(const gma::config::RunConfig& base, const std::string& axis,
                                  std::vector<std::string>& values_out, std::string& name_out) {
  auto eq = axis.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == axis.size())
    throw UsageError("--axis must look like name=v1,v2,..., got '" + axis + "'");
  std::string name = axis.substr(0, eq);
  std::vector<std::string> values;
  std::stringstream ss(axis.substr(eq + 1));
  std::string tok;
  while (std::getline(ss, tok, ',')) values.push_back(tok);
  if (values.empty()) throw UsageError("axis has no values: " + axis);

  std::vector<SweepRun> runs;
  for (size_t i = 0; i < values.size(); ++i) {
    SweepRun run;
    run.value = values[i];
    run.rc = base;
    if (name == "K") {
      try {
        run.rc.model.gma.K = std::stoi(values[i]);
      } catch (const std::exception&) {
        throw UsageError("axis K values must be integers, got '" + values[i] + "'");
      }
    } else if (name == "gating") {
      run.rc.model.gma.gating.kind = gma::gating_kind_from_string(values[i]);
    } else if (name == "gma_layers") {
      run.rc.model.gma_layers = named_layer_set(values[i], base.model.n_layers);
    } else if (name == "share") {
      if (values[i] == "none") {
        run.rc.model.gma.share_mean = run.rc.model.gma.share_var =
            run.rc.model.gma.share_weight = false;
      } else if (values[i] == "mean") {
        run.rc.model.gma.share_mean = true;
      } else if (values[i] == "var") {
        run.rc.model.gma.share_var = true;
      } else if (values[i] == "weight") {
        run.rc.model.gma.share_weight = true;
      } else if (values[i] == "all") {
        run.rc.model.gma.share_mean = run.rc.model.gma.share_var =
            run.rc.model.gma.share_weight = true;
      } else {
        throw UsageError("unknown share value '" + values[i] +
                         "' (expected none, mean, var, weight, or all)");
      }
    } else {
      throw UsageError("unknown sweep axis '" + name +
                       "' (expected K, gating, gma_layers, or share)");
    }
    run.rc.train.seed = gma::mix64(base.train.seed ^ (0x53574550ull + i));
    usage_phase([&] {
      run.rc.validate();
      return 0;
    });
    runs.push_back(std::move(run));
  }
  values_out = values;
  name_out = name;
  return runs;
}

// ---- subcommands ----

int cmd_generate(const gma::data::TaskSpec& spec, const std::string& out_path) {
  usage_phase([&] {
    spec.validate();
    if (out_path.empty()) throw UsageError("--out is required");
    return 0;
  });
  auto corpus = gma::data::generate(spec);
  gma::data::write_corpus(out_path, corpus);
  std::cout << "wrote " << corpus.size() << " " << to_string(spec.kind) << " examples to "
            << out_path << "\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir_flag, const std::string& run_name) {
  auto rc = load_run_config(config_path, overrides);
  fs::path dir = fs::path(pick_out_dir(out_dir_flag, &rc)) /
                 (run_name.empty() ? timestamp_name("train") : run_name);

  TrainedRun run = run_training(rc, dir);
  if (run.diverged) {
    std::cerr << "error: " << run.error << "\n";
    return kRuntime;
  }
  std::cout << "run dir: " << dir.string() << "\n"
            << "steps: " << run.result.steps_run << "\n"
            << "final eval loss: " << run.result.final_eval_loss << "\n"
            << "final eval token accuracy: " << run.result.final_eval_acc << "\n"
            << "clip fraction: " << run.result.clip_fraction << "\n";
  return kOk;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& corpus_path,
                 const std::string& out_path, const std::string& attn_kind) {
  auto kind = usage_phase([&] { return gma::analysis::attn_kind_from_string(attn_kind); });
  LoadedModel lm = load_model(ckpt_path);
  auto corpus = load_eval_corpus(corpus_path, lm.ckpt_config);
  json report = evaluate_model(*lm.model, corpus, kind);
  std::cout << report.dump(2) << "\n";
  if (!out_path.empty()) write_json_file(out_path, report);
  return kOk;
}

int cmd_analyze(const std::string& ckpt_path, const std::string& corpus_path,
                const std::string& report_arg, const std::string& out_dir_flag,
                const std::string& run_name, const std::string& attn_kind, bool dump_attention) {
  auto kind = usage_phase([&] { return gma::analysis::attn_kind_from_string(attn_kind); });
  std::vector<std::string> reports = usage_phase([&] {
    std::vector<std::string> r;
    std::stringstream ss(report_arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) r.push_back(tok);
    gma::config::RunConfig probe;
    probe.reports = r;
    probe.validate();
    return r;
  });

  LoadedModel lm = load_model(ckpt_path);
  auto corpus = load_eval_corpus(corpus_path, lm.ckpt_config);
  fs::path dir = fs::path(pick_out_dir(out_dir_flag, nullptr)) /
                 (run_name.empty() ? timestamp_name("analyze") : run_name);
  fs::create_directories(dir);

  std::vector<gma::AttentionRecord> records;
  for (const auto& ex : corpus) {
    auto recs = lm.model->forced_decode_attention(ex.src, ex.tgt);
    records.insert(records.end(), recs.begin(), recs.end());
  }

  json summary{{"examples", corpus.size()}, {"records", records.size()}};
  auto wants = [&](const char* r) {
    return std::find(reports.begin(), reports.end(), r) != reports.end();
  };

  if (wants("entropy")) {
    auto rep = gma::analysis::entropy_report(records);
    std::ofstream csv(dir / "entropy.csv");
    csv << "bucket,rows,alpha,beta,gamma\n";
    json jrep = json::array();
    for (const auto& b : rep.buckets) {
      csv << b.label << ',';
      if (b.present)
        csv << b.rows << ',' << b.alpha << ',' << b.beta << ',' << b.gamma;
      else
        csv << ",,,";
      csv << '\n';
      jrep.push_back(json{{"bucket", b.label},
                          {"present", b.present},
                          {"rows", b.rows},
                          {"alpha", b.alpha},
                          {"beta", b.beta},
                          {"gamma", b.gamma}});
    }
    write_json_file(dir / "entropy.json", jrep);
    summary["entropy"] = {{"alpha", gma::analysis::record_entropy(records, gma::analysis::AttnKind::alpha).mean},
                          {"beta", gma::analysis::record_entropy(records, gma::analysis::AttnKind::beta).mean},
                          {"gamma", gma::analysis::record_entropy(records, gma::analysis::AttnKind::gamma).mean}};
  }

  if (wants("gates")) {
    auto rep = gma::analysis::gate_report(records);
    json jrep = json::array();
    for (const auto& l : rep.layers)
      jrep.push_back(json{{"layer", l.layer}, {"samples", l.samples}, {"mass", l.mass}});
    write_json_file(dir / "gates.json", jrep);
    gma::analysis::write_gate_svg((dir / "gates.svg").string(), rep);
  }

  if (wants("aer")) {
    json jaer;
    try {
      auto score = gma::analysis::corpus_aer(*lm.model, corpus, kind);
      jaer = {{"aer", score.aer}, {"precision", score.precision}, {"recall", score.recall},
              {"attention", attn_kind}};
    } catch (const gma::ContractError& e) {
      jaer = {{"aer", nullptr}, {"error", e.what()}};
    }
    write_json_file(dir / "aer.json", jaer);
    summary["aer"] = jaer;
  }

  if (wants("ngram") || wants("buckets")) {
    std::vector<std::vector<int>> hyps, refs;
    for (const auto& ex : corpus) {
      hyps.push_back(lm.model->greedy_decode(ex.src, size_t(lm.config.max_len)));
      refs.push_back(ex.tgt);
    }
    if (wants("ngram")) {
      auto ps = gma::analysis::corpus_ngram_precisions(hyps, refs);
      json jp;
      for (size_t n = 0; n < 4; ++n) {
        std::string key = "p" + std::to_string(n + 1);
        if (ps[n])
          jp[key] = *ps[n];
        else
          jp[key] = nullptr;
      }
      jp["bleu"] = gma::analysis::corpus_bleu(hyps, refs);
      write_json_file(dir / "ngram.json", jp);
      summary["bleu"] = jp["bleu"];
    }
    if (wants("buckets")) {
      auto rows = gma::analysis::length_bucket_eval(*lm.model, corpus);
      std::ofstream csv(dir / "buckets.csv");
      csv << "bucket,count,bleu,gamma_entropy\n";
      for (const auto& row : rows) {
        csv << row.label << ',';
        if (row.present)
          csv << row.count << ',' << row.bleu << ',' << row.gamma_entropy;
        else
          csv << ",,";
        csv << '\n';
      }
    }
  }

  if (dump_attention) gma::analysis::write_attention_dump((dir / "attention.jsonl").string(), records);

  write_json_file(dir / "report.json", summary);
  std::cout << "analysis written to " << dir.string() << "\n";
  return kOk;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& axis, const std::string& out_dir_flag,
              const std::string& run_name, int parallel) {
  auto base = load_run_config(config_path, overrides);
  std::vector<std::string> values;
  std::string axis_name;
  auto runs = expand_axis(base, axis, values, axis_name);
  if (parallel < 1) throw UsageError("--parallel must be >= 1");

  fs::path dir = fs::path(pick_out_dir(out_dir_flag, &base)) /
                 (run_name.empty() ? timestamp_name("sweep") : run_name);
  fs::create_directories(dir);

  std::vector<TrainedRun> outcomes(runs.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next.fetch_add(1); i < runs.size(); i = next.fetch_add(1))
      outcomes[i] = run_training(runs[i].rc, dir / (axis_name + "=" + runs[i].value));
  };
  if (parallel == 1 || runs.size() == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min<int>(parallel, int(runs.size())); ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::ofstream csv(dir / "sweep.csv");
  csv << "axis,value,seed,status,final_eval_loss,final_eval_acc,clip_frac\n";
  csv << std::setprecision(17);
  for (size_t i = 0; i < runs.size(); ++i) {
    csv << axis_name << ',' << runs[i].value << ',' << runs[i].rc.train.seed << ',';
    if (outcomes[i].diverged) {
      csv << "diverged,,,\n";
    } else {
      csv << "ok," << outcomes[i].result.final_eval_loss << ','
          << outcomes[i].result.final_eval_acc << ',' << outcomes[i].result.clip_fraction << '\n';
    }
  }

  std::cout << "sweep dir: " << dir.string() << "\n";
  for (size_t i = 0; i < runs.size(); ++i) {
    std::cout << axis_name << "=" << runs[i].value << ": ";
    if (outcomes[i].diverged)
      std::cout << "diverged (" << outcomes[i].error << ")\n";
    else
      std::cout << "eval loss " << outcomes[i].result.final_eval_loss << ", acc "
                << outcomes[i].result.final_eval_acc << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian-mixture cross-attention workbench"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic aligned corpus as JSONL");
  gma::data::TaskSpec spec;
  std::string task_name = "copy", gen_out;
  gen->add_option("--task", task_name, "copy, reverse, window_permute, or expand");
  gen->add_option("--window", spec.window, "permutation window (window_permute)");
  gen->add_option("--expand-p", spec.expand_p, "token doubling probability (expand)");
  gen->add_option("--vocab", spec.vocab, "vocabulary size including reserved ids");
  gen->add_option("--min-len", spec.min_len, "minimum source length");
  gen->add_option("--max-len", spec.max_len, "maximum source length");
  gen->add_option("--size", spec.corpus_size, "number of examples");
  gen->add_option("--seed", spec.seed, "corpus seed");
  gen->add_option("--out", gen_out, "output JSONL path");

  // train
  auto* tr = app.add_subcommand("train", "Train a model from a JSON config");
  std::string tr_config, tr_out_dir, tr_run_name;
  std::vector<std::string> tr_sets;
  tr->add_option("--config", tr_config, "JSON config file");
  tr->add_option("--set", tr_sets, "dotted-key override, e.g. model.gma.k=2")->take_all();
  tr->add_option("--out-dir", tr_out_dir, "output directory root");
  tr->add_option("--run-name", tr_run_name, "run directory name (default: timestamp)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a corpus");
  std::string ev_ckpt, ev_corpus, ev_out, ev_kind = "gamma";
  ev->add_option("--ckpt", ev_ckpt, "checkpoint file");
  ev->add_option("--corpus", ev_corpus, "corpus JSONL (default: held-out split of the task)");
  ev->add_option("--out", ev_out, "also write the report JSON here");
  ev->add_option("--attention", ev_kind, "attention used for alignment: alpha, beta, or gamma");

  // analyze
  auto* an = app.add_subcommand("analyze", "Emit diagnostic reports for a checkpoint");
  std::string an_ckpt, an_corpus, an_out_dir, an_run_name, an_kind = "gamma";
  std::string an_reports = "entropy,gates,aer,ngram,buckets";
  bool an_dump = false;
  an->add_option("--ckpt", an_ckpt, "checkpoint file");
  an->add_option("--corpus", an_corpus, "corpus JSONL (default: held-out split of the task)");
  an->add_option("--report", an_reports, "comma list of entropy,gates,aer,ngram,buckets");
  an->add_option("--out-dir", an_out_dir, "output directory root");
  an->add_option("--run-name", an_run_name, "run directory name (default: timestamp)");
  an->add_option("--attention", an_kind, "attention used for alignment: alpha, beta, or gamma");
  an->add_flag("--dump-attention", an_dump, "also write raw attention records as JSONL");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Train once per axis value and tabulate");
  std::string sw_config, sw_axis, sw_out_dir, sw_run_name;
  std::vector<std::string> sw_sets;
  int sw_parallel = 1;
  sw->add_option("--config", sw_config, "JSON config file");
  sw->add_option("--set", sw_sets, "dotted-key override applied before the sweep")->take_all();
  sw->add_option("--axis", sw_axis, "K=1,2,4,8 | gating=... | gma_layers=... | share=...");
  sw->add_option("--out-dir", sw_out_dir, "output directory root");
  sw->add_option("--run-name", sw_run_name, "sweep directory name (default: timestamp)");
  sw->add_option("--parallel", sw_parallel, "independent runs in flight");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      spec.kind = usage_phase([&] { return gma::data::task_kind_from_string(task_name); });
      return cmd_generate(spec, gen_out);
    }
    if (tr->parsed()) return cmd_train(tr_config, tr_sets, tr_out_dir, tr_run_name);
    if (ev->parsed()) return cmd_evaluate(ev_ckpt, ev_corpus, ev_out, ev_kind);
    if (an->parsed())
      return cmd_analyze(an_ckpt, an_corpus, an_reports, an_out_dir, an_run_name, an_kind, an_dump);
    if (sw->parsed())
      return cmd_sweep(sw_config, sw_sets, sw_axis, sw_out_dir, sw_run_name, sw_parallel);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
