#pragma once

// Run configuration: one JSON file covering model, training, task, paths,
// and analysis choices, with dotted-key command-line overrides. Keys are
// validated against a closed list so typos fail loudly with a suggestion
// instead of silently training the wrong thing.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gma/data.hpp"
#include "gma/model.hpp"
#include "gma/train.hpp"

namespace gma::config {

struct RunConfig {
  ModelConfig model;
  train::TrainConfig train;
  data::TaskSpec task;
  std::string corpus_path;      // optional; tasks can generate on the fly
  std::string checkpoint_path;  // optional
  std::string out_dir = "runs";
  std::vector<std::string> reports = {"entropy", "gates", "aer", "ngram", "buckets"};

  void validate() const {
    model.validate();
    train.validate();
    task.validate();
    for (const auto& r : reports)
      if (r != "entropy" && r != "gates" && r != "aer" && r != "ngram" && r != "buckets")
        throw ContractError("unknown report kind: " + r);
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"train", c.train},
                     {"task", c.task},
                     {"paths",
                      {{"corpus", c.corpus_path},
                       {"checkpoint", c.checkpoint_path},
                       {"out_dir", c.out_dir}}},
                     {"analysis", {{"reports", c.reports}}}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  c = RunConfig{};
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) c.train = j.at("train").get<train::TrainConfig>();
  if (j.contains("task")) c.task = j.at("task").get<data::TaskSpec>();
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    c.corpus_path = p.value("corpus", c.corpus_path);
    c.checkpoint_path = p.value("checkpoint", c.checkpoint_path);
    c.out_dir = p.value("out_dir", c.out_dir);
  }
  if (j.contains("analysis"))
    c.reports = j.at("analysis").value("reports", c.reports);
}

namespace detail {

enum class Kind { integer, number, boolean, text, int_array, text_array };

inline const std::map<std::string, Kind>& known_keys() {
  static const std::map<std::string, Kind> keys = {
      {"model.n_layers", Kind::integer},
      {"model.d_model", Kind::integer},
      {"model.n_heads", Kind::integer},
      {"model.d_ffn", Kind::integer},
      {"model.src_vocab", Kind::integer},
      {"model.tgt_vocab", Kind::integer},
      {"model.max_len", Kind::integer},
      {"model.pre_norm", Kind::boolean},
      {"model.gma_layers", Kind::int_array},
      {"model.gma.k", Kind::integer},
      {"model.gma.norm_mode", Kind::text},
      {"model.gma.gating", Kind::text},
      {"model.gma.fixed_g", Kind::number},
      {"model.gma.share_mean", Kind::boolean},
      {"model.gma.share_var", Kind::boolean},
      {"model.gma.share_weight", Kind::boolean},
      {"train.steps", Kind::integer},
      {"train.batch_size", Kind::integer},
      {"train.warmup_steps", Kind::integer},
      {"train.beta1", Kind::number},
      {"train.beta2", Kind::number},
      {"train.eps", Kind::number},
      {"train.clip_norm", Kind::number},
      {"train.seed", Kind::integer},
      {"train.eval_every", Kind::integer},
      {"train.eval_size", Kind::integer},
      {"train.log_alignment_metrics", Kind::boolean},
      {"task.kind", Kind::text},
      {"task.window", Kind::integer},
      {"task.expand_p", Kind::number},
      {"task.vocab", Kind::integer},
      {"task.min_len", Kind::integer},
      {"task.max_len", Kind::integer},
      {"task.corpus_size", Kind::integer},
      {"task.seed", Kind::integer},
      {"task.map_seed", Kind::integer},
      {"paths.corpus", Kind::text},
      {"paths.checkpoint", Kind::text},
      {"paths.out_dir", Kind::text},
      {"analysis.reports", Kind::text_array},
  };
  return keys;
}

inline size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string nearest_key(const std::string& key) {
  std::string best;
  size_t best_d = size_t(-1);
  for (const auto& [k, kind] : known_keys()) {
    size_t d = edit_distance(key, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

inline bool type_matches(Kind kind, const nlohmann::json& v) {
  switch (kind) {
    case Kind::integer: return v.is_number_integer() || v.is_number_unsigned();
    case Kind::number: return v.is_number();
    case Kind::boolean: return v.is_boolean();
    case Kind::text: return v.is_string();
    case Kind::int_array:
      return v.is_array() && std::all_of(v.begin(), v.end(), [](const nlohmann::json& e) {
               return e.is_number_integer() || e.is_number_unsigned();
             });
    case Kind::text_array:
      return v.is_array() && std::all_of(v.begin(), v.end(),
                                         [](const nlohmann::json& e) { return e.is_string(); });
  }
  return false;
}

inline const char* kind_name(Kind kind) {
  switch (kind) {
    case Kind::integer: return "an integer";
    case Kind::number: return "a number";
    case Kind::boolean: return "a boolean";
    case Kind::text: return "a string";
    case Kind::int_array: return "an array of integers";
    case Kind::text_array: return "an array of strings";
  }
  return "?";
}

inline void check_key(const std::string& key, const nlohmann::json& value) {
  auto it = known_keys().find(key);
  if (it == known_keys().end())
    throw ContractError("unknown config key '" + key + "' (did you mean '" + nearest_key(key) +
                        "'?)");
  if (!type_matches(it->second, value))
    throw ContractError("config key '" + key + "' must be " + kind_name(it->second) + ", got " +
                        value.dump());
}

inline void flatten_and_check(const nlohmann::json& node, const std::string& prefix) {
  if (!node.is_object()) throw ContractError("config root must be a JSON object");
  for (const auto& [k, v] : node.items()) {
    std::string key = prefix.empty() ? k : prefix + "." + k;
    // gma_layers and reports are array leaves; any other object recurses.
    if (v.is_object() && !known_keys().count(key))
      flatten_and_check(v, key);
    else
      check_key(key, v);
  }
}

// Overrides may drop the leading section for model keys ("gma.k" works) and
// are case-insensitive on the full path.
inline std::string resolve_key(const std::string& raw) {
  const auto& keys = known_keys();
  if (keys.count(raw)) return raw;
  auto lower = [](std::string s) {
    for (char& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  std::string raw_l = lower(raw);
  for (const auto& [k, kind] : keys)
    if (lower(k) == raw_l) return k;
  for (const auto& [k, kind] : keys)
    if (lower(k) == "model." + raw_l) return k;
  throw ContractError("unknown config key '" + raw + "' (did you mean '" + nearest_key(raw) +
                      "'?)");
}

inline void set_dotted(nlohmann::json& root, const std::string& key, nlohmann::json value) {
  nlohmann::json* node = &root;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = std::move(value);
}

}  // namespace detail

// "key=value" with the value parsed as JSON when possible, else as a string.
inline std::pair<std::string, nlohmann::json> parse_override(const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ContractError("override must look like key=value, got '" + assignment + "'");
  std::string key = detail::resolve_key(assignment.substr(0, eq));
  std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  detail::check_key(key, value);
  return {key, value};
}

inline RunConfig parse_config(const nlohmann::json& file_json,
                              const std::vector<std::string>& overrides = {}) {
  nlohmann::json merged = file_json;
  detail::flatten_and_check(merged, "");
  for (const auto& o : overrides) {
    auto [key, value] = parse_override(o);
    detail::set_dotted(merged, key, std::move(value));
  }
  RunConfig rc = merged.get<RunConfig>();
  rc.validate();
  return rc;
}

inline RunConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError(path + ": " + e.what());
  }
  return parse_config(j, overrides);
}

}  // namespace gma::config
