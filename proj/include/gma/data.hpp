#pragma once

// Synthetic aligned parallel corpora. Every task has exact gold alignments
// by construction, so alignment metrics downstream are hard oracles:
//
//   copy             tgt = src, diagonal links
//   reverse          tgt = reversed src, anti-diagonal links
//   window_permute   src permuted inside non-overlapping windows by a
//                    per-corpus seeded permutation, trailing partial
//                    window left in place
//   expand           each source token emits itself once, or twice for
//                    tokens a per-corpus seeded table marks as doubling;
//                    doubled tokens yield one-to-many links

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gma/rng.hpp"
#include "gma/tensor.hpp"

namespace gma::data {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kFirstContentId = 3;

using Link = std::pair<int, int>;      // (target i, source j), 1-based
using LinkSet = std::vector<Link>;     // kept sorted

struct AlignedExample {
  std::vector<int> src;
  std::vector<int> tgt;
  LinkSet gold;
};

enum class TaskKind { copy, reverse, window_permute, expand };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::window_permute: return "window_permute";
    case TaskKind::expand: return "expand";
  }
  return "?";
}
inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "window_permute") return TaskKind::window_permute;
  if (s == "expand") return TaskKind::expand;
  throw ContractError("unknown task kind: " + s);
}

struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  int window = 3;          // window_permute only
  double expand_p = 0.3;   // expand only
  int vocab = 32;          // includes reserved ids 0..2
  int min_len = 4;
  int max_len = 12;
  int corpus_size = 8192;
  uint64_t seed = 1;
  // Seed of the task mapping (permutation, doubling table); 0 follows
  // `seed`. Held-out splits pin it so fresh sentences keep the mapping.
  uint64_t map_seed = 0;

  uint64_t effective_map_seed() const { return map_seed ? map_seed : seed; }

  void validate() const {
    if (vocab < kFirstContentId + 1) throw ContractError("TaskSpec: vocab must leave room for content tokens");
    if (min_len < 1) throw ContractError("TaskSpec: min_len must be >= 1");
    if (max_len < min_len) throw ContractError("TaskSpec: max_len must be >= min_len");
    if (corpus_size < 1) throw ContractError("TaskSpec: corpus_size must be >= 1");
    if (kind == TaskKind::window_permute) {
      if (window < 1) throw ContractError("TaskSpec: window must be >= 1");
      if (window > max_len) throw ContractError("TaskSpec: window exceeds max_len");
    }
    if (kind == TaskKind::expand && (expand_p <= 0.0 || expand_p >= 1.0))
      throw ContractError("TaskSpec: expand_p must lie in (0,1)");
  }
};

inline void to_json(nlohmann::json& j, const TaskSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}, {"window", s.window},
                     {"expand_p", s.expand_p},    {"vocab", s.vocab},
                     {"min_len", s.min_len},      {"max_len", s.max_len},
                     {"corpus_size", s.corpus_size}, {"seed", s.seed},
                     {"map_seed", s.map_seed}};
}
inline void from_json(const nlohmann::json& j, TaskSpec& s) {
  s = TaskSpec{};
  if (j.contains("kind")) s.kind = task_kind_from_string(j.at("kind"));
  s.window = j.value("window", s.window);
  s.expand_p = j.value("expand_p", s.expand_p);
  s.vocab = j.value("vocab", s.vocab);
  s.min_len = j.value("min_len", s.min_len);
  s.max_len = j.value("max_len", s.max_len);
  s.corpus_size = j.value("corpus_size", s.corpus_size);
  s.seed = j.value("seed", s.seed);
  s.map_seed = j.value("map_seed", s.map_seed);
}

namespace detail {

constexpr uint64_t kTableStream = ~0ull;
constexpr uint64_t kPermStream = ~1ull;

}  // namespace detail

// Which token ids emit twice under the expand task (index = token id).
inline std::vector<uint8_t> expand_doubling_table(const TaskSpec& spec) {
  Rng rng(spec.effective_map_seed(), detail::kTableStream);
  std::vector<uint8_t> table(spec.vocab, 0);
  for (int t = kFirstContentId; t < spec.vocab; ++t) table[t] = rng.unit() < spec.expand_p;
  return table;
}

// In-window reordering used by window_permute; non-identity whenever the
// window has room for one.
inline std::vector<int> window_permutation(const TaskSpec& spec) {
  std::vector<int> perm(spec.window);
  for (int i = 0; i < spec.window; ++i) perm[i] = i;
  if (spec.window < 2) return perm;
  Rng rng(spec.effective_map_seed(), detail::kPermStream);
  auto identity = [&] {
    for (int i = 0; i < spec.window; ++i)
      if (perm[i] != i) return false;
    return true;
  };
  do {
    for (int i = spec.window - 1; i > 0; --i) std::swap(perm[i], perm[rng.range(0, i)]);
  } while (identity());
  return perm;
}

// Deterministic task mapping for a given source sentence.
inline std::pair<std::vector<int>, LinkSet> transduce(const TaskSpec& spec,
                                                      const std::vector<int>& src) {
  int J = int(src.size());
  std::vector<int> tgt;
  LinkSet gold;
  switch (spec.kind) {
    case TaskKind::copy:
      tgt = src;
      for (int j = 1; j <= J; ++j) gold.emplace_back(j, j);
      break;
    case TaskKind::reverse:
      tgt.assign(src.rbegin(), src.rend());
      for (int i = 1; i <= J; ++i) gold.emplace_back(i, J + 1 - i);
      break;
    case TaskKind::window_permute: {
      std::vector<int> perm = window_permutation(spec);
      tgt = src;
      for (int s = 0; s + spec.window <= J; s += spec.window)
        for (int t = 0; t < spec.window; ++t) {
          tgt[s + t] = src[s + perm[t]];
          gold.emplace_back(s + t + 1, s + perm[t] + 1);
        }
      for (int t = J - J % spec.window; t < J; ++t) gold.emplace_back(t + 1, t + 1);
      break;
    }
    case TaskKind::expand: {
      std::vector<uint8_t> table = expand_doubling_table(spec);
      for (int j = 0; j < J; ++j) {
        int reps = table[src[j]] ? 2 : 1;
        for (int r = 0; r < reps; ++r) {
          tgt.push_back(src[j]);
          gold.emplace_back(int(tgt.size()), j + 1);
        }
      }
      break;
    }
  }
  std::sort(gold.begin(), gold.end());
  return {std::move(tgt), std::move(gold)};
}

inline std::vector<AlignedExample> generate(const TaskSpec& spec) {
  spec.validate();
  std::vector<AlignedExample> corpus(spec.corpus_size);
  for (int e = 0; e < spec.corpus_size; ++e) {
    Rng rng(spec.seed, uint64_t(e));
    int len = rng.range(spec.min_len, spec.max_len);
    std::vector<int> src(len);
    for (auto& t : src) t = rng.range(kFirstContentId, spec.vocab - 1);
    auto [tgt, gold] = transduce(spec, src);
    corpus[e] = {std::move(src), std::move(tgt), std::move(gold)};
  }
  return corpus;
}

// ---- batching ----

struct Batch {
  std::vector<std::vector<int>> src;  // padded to the batch's widest sentence
  std::vector<std::vector<int>> tgt;
  std::vector<Mask> src_mask;
  std::vector<Mask> tgt_mask;
  std::vector<int> src_len;
  std::vector<int> tgt_len;
  std::vector<LinkSet> gold;

  size_t size() const { return src.size(); }
};

inline std::vector<Batch> batchify(const std::vector<AlignedExample>& corpus, int batch_size,
                                   int pad_id = kPadId) {
  if (corpus.empty()) throw ContractError("batchify: empty corpus");
  if (batch_size < 1) throw ContractError("batchify: batch_size must be >= 1");
  std::vector<Batch> batches;
  for (size_t start = 0; start < corpus.size(); start += batch_size) {
    size_t end = std::min(corpus.size(), start + batch_size);
    Batch b;
    size_t src_w = 0, tgt_w = 0;
    for (size_t e = start; e < end; ++e) {
      src_w = std::max(src_w, corpus[e].src.size());
      tgt_w = std::max(tgt_w, corpus[e].tgt.size());
    }
    auto pad_row = [&](const std::vector<int>& ids, size_t width) {
      std::vector<int> row(width, pad_id);
      std::copy(ids.begin(), ids.end(), row.begin());
      Mask m(width, false);
      std::fill(m.begin(), m.begin() + ids.size(), true);
      return std::make_pair(std::move(row), std::move(m));
    };
    for (size_t e = start; e < end; ++e) {
      auto [srow, smask] = pad_row(corpus[e].src, src_w);
      auto [trow, tmask] = pad_row(corpus[e].tgt, tgt_w);
      b.src.push_back(std::move(srow));
      b.tgt.push_back(std::move(trow));
      b.src_mask.push_back(std::move(smask));
      b.tgt_mask.push_back(std::move(tmask));
      b.src_len.push_back(int(corpus[e].src.size()));
      b.tgt_len.push_back(int(corpus[e].tgt.size()));
      b.gold.push_back(corpus[e].gold);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---- alignment files (Pharaoh "i-j" pairs, 1-based) ----

inline std::vector<LinkSet> read_alignment_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open alignment file: " + path);
  std::vector<LinkSet> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    LinkSet links;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
      size_t dash = tok.find('-');
      int i = 0, j = 0;
      try {
        size_t used_i = 0, used_j = 0;
        if (dash == std::string::npos || dash == 0) throw std::invalid_argument(tok);
        i = std::stoi(tok.substr(0, dash), &used_i);
        j = std::stoi(tok.substr(dash + 1), &used_j);
        if (used_i != dash || used_j != tok.size() - dash - 1 || i < 1 || j < 1)
          throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ContractError(path + ":" + std::to_string(lineno) + ": malformed link pair '" +
                            tok + "'");
      }
      links.emplace_back(i, j);
    }
    std::sort(links.begin(), links.end());
    out.push_back(std::move(links));
  }
  return out;
}

inline void write_alignment_file(const std::string& path, const std::vector<LinkSet>& links) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write alignment file: " + path);
  for (const auto& sentence : links) {
    LinkSet sorted = sentence;
    std::sort(sorted.begin(), sorted.end());
    for (size_t n = 0; n < sorted.size(); ++n) {
      if (n) out << ' ';
      out << sorted[n].first << '-' << sorted[n].second;
    }
    out << '\n';
  }
}

// ---- corpus files (JSON lines: {src, tgt, gold}) ----

inline void write_corpus(const std::string& path, const std::vector<AlignedExample>& corpus) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write corpus file: " + path);
  for (const auto& ex : corpus) {
    nlohmann::json rec;
    rec["src"] = ex.src;
    rec["tgt"] = ex.tgt;
    auto& g = rec["gold"] = nlohmann::json::array();
    for (const auto& [i, j] : ex.gold) g.push_back({i, j});
    out << rec.dump() << '\n';
  }
}

inline std::vector<AlignedExample> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open corpus file: " + path);
  std::vector<AlignedExample> corpus;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    AlignedExample ex;
    try {
      nlohmann::json rec = nlohmann::json::parse(line);
      ex.src = rec.at("src").get<std::vector<int>>();
      ex.tgt = rec.at("tgt").get<std::vector<int>>();
      for (const auto& link : rec.at("gold"))
        ex.gold.emplace_back(link.at(0).get<int>(), link.at(1).get<int>());
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(path + ":" + std::to_string(lineno) + ": bad corpus record: " +
                          e.what());
    }
    if (ex.gold.empty())
      throw ContractError(path + ":" + std::to_string(lineno) + ": empty gold alignment");
    for (const auto& [i, j] : ex.gold)
      if (i < 1 || j < 1 || i > int(ex.tgt.size()) || j > int(ex.src.size()))
        throw ContractError(path + ":" + std::to_string(lineno) + ": gold link out of bounds");
    std::sort(ex.gold.begin(), ex.gold.end());
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace gma::data
