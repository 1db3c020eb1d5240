#pragma once

// Diagnostics over attention records and decoded corpora: entropy tables,
// gate histograms (with an SVG emitter), alignment extraction and AER,
// modified n-gram precision, corpus BLEU, and length-bucket evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gma/attention.hpp"
#include "gma/data.hpp"
#include "gma/model.hpp"

namespace gma::analysis {

enum class AttnKind { alpha, beta, gamma };

inline const char* to_string(AttnKind k) {
  switch (k) {
    case AttnKind::alpha: return "alpha";
    case AttnKind::beta: return "beta";
    case AttnKind::gamma: return "gamma";
  }
  return "?";
}
inline AttnKind attn_kind_from_string(const std::string& s) {
  if (s == "alpha") return AttnKind::alpha;
  if (s == "beta") return AttnKind::beta;
  if (s == "gamma") return AttnKind::gamma;
  throw ContractError("unknown attention kind: " + s);
}

inline const std::vector<double>& record_matrix(const AttentionRecord& r, AttnKind k) {
  switch (k) {
    case AttnKind::alpha: return r.alpha;
    case AttnKind::beta: return r.beta;
    case AttnKind::gamma: return r.gamma;
  }
  return r.gamma;
}

// ---- entropy ----

// Mean entropy of the given rows after renormalizing each to sum 1
// (unnormalized mixture rows would otherwise deflate the number).
// Zero-mass rows are skipped and counted.
struct EntropyStats {
  double mean = 0.0;
  size_t rows = 0;
  size_t skipped = 0;
};

inline EntropyStats attention_entropy(const std::vector<std::vector<double>>& rows) {
  EntropyStats st;
  double total = 0.0;
  for (const auto& row : rows) {
    double s = 0.0;
    for (double p : row) s += p;
    if (!(s > 1e-300)) {
      ++st.skipped;
      continue;
    }
    double h = 0.0;
    for (double p : row)
      if (p > 0.0) {
        double q = p / s;
        h -= q * std::log(q);
      }
    total += h;
    ++st.rows;
  }
  if (st.rows) st.mean = total / double(st.rows);
  return st;
}

namespace detail {

inline void accumulate_rows(const AttentionRecord& r, AttnKind kind,
                            std::vector<std::vector<double>>& out) {
  const auto& m = record_matrix(r, kind);
  for (int i = 0; i < r.tgt_len; ++i)
    out.emplace_back(m.begin() + i * r.src_len, m.begin() + (i + 1) * r.src_len);
}

}  // namespace detail

inline EntropyStats record_entropy(const std::vector<AttentionRecord>& records, AttnKind kind) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : records) detail::accumulate_rows(r, kind, rows);
  return attention_entropy(rows);
}

// Per source-length bucket mean entropy of alpha/beta/gamma.
struct EntropyReport {
  struct Bucket {
    std::string label;
    int lo, hi;  // (lo, hi], hi < 0 means unbounded
    size_t rows = 0;
    double alpha = 0.0, beta = 0.0, gamma = 0.0;
    bool present = false;
  };
  std::vector<Bucket> buckets;
};

inline EntropyReport entropy_report(const std::vector<AttentionRecord>& records) {
  EntropyReport rep;
  rep.buckets = {{"(0,20]", 0, 20}, {"[21,40]", 20, 40}, {"[41,inf)", 40, -1}};
  for (auto& b : rep.buckets) {
    std::vector<AttentionRecord> in_bucket;
    for (const auto& r : records)
      if (r.src_len > b.lo && (b.hi < 0 || r.src_len <= b.hi)) in_bucket.push_back(r);
    if (in_bucket.empty()) continue;
    EntropyStats a = record_entropy(in_bucket, AttnKind::alpha);
    EntropyStats be = record_entropy(in_bucket, AttnKind::beta);
    EntropyStats g = record_entropy(in_bucket, AttnKind::gamma);
    b.present = true;
    b.rows = a.rows;
    b.alpha = a.mean;
    b.beta = be.mean;
    b.gamma = g.mean;
  }
  return rep;
}

// ---- gate histograms ----

struct GateReport {
  static constexpr double kBinWidth = 0.05;
  struct Layer {
    int layer = 0;
    std::vector<double> mass;  // 20 bins over [0,1], sums to 1
    size_t samples = 0;
  };
  std::vector<Layer> layers;
};

inline GateReport gate_report(const std::vector<AttentionRecord>& records) {
  std::map<int, std::vector<size_t>> counts;
  for (const auto& r : records) {
    auto& c = counts[r.layer];
    c.resize(20, 0);
    for (double g : r.gate) {
      int bin = std::min(19, std::max(0, int(g / GateReport::kBinWidth)));
      ++c[size_t(bin)];
    }
  }
  GateReport rep;
  for (const auto& [layer, c] : counts) {
    GateReport::Layer l;
    l.layer = layer;
    size_t total = 0;
    for (size_t n : c) total += n;
    l.samples = total;
    l.mass.resize(20, 0.0);
    if (total)
      for (size_t b = 0; b < 20; ++b) l.mass[b] = double(c[b]) / double(total);
    rep.layers.push_back(std::move(l));
  }
  return rep;
}

inline void write_gate_svg(const std::string& path, const GateReport& rep) {
  const int w = 440, panel_h = 130, pad = 30;
  int h = pad + int(rep.layers.size()) * panel_h;
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write SVG: " + path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  int y0 = pad / 2;
  for (const auto& l : rep.layers) {
    double peak = 1e-9;
    for (double m : l.mass) peak = std::max(peak, m);
    out << "<text x='8' y='" << y0 + 12 << "' font-size='12'>layer " << l.layer << " (n="
        << l.samples << ")</text>\n";
    int base = y0 + panel_h - 20;
    for (size_t b = 0; b < l.mass.size(); ++b) {
      double bh = (panel_h - 40) * l.mass[b] / peak;
      double x = 30 + double(b) * 20.0;
      out << "<rect x='" << x << "' y='" << base - bh << "' width='18' height='" << bh
          << "' fill='#4477aa'/>\n";
    }
    out << "<text x='30' y='" << base + 14 << "' font-size='10'>0</text>\n";
    out << "<text x='" << 30 + 19 * 20 << "' y='" << base + 14 << "' font-size='10'>1</text>\n";
    y0 += panel_h;
  }
  out << "</svg>\n";
}

// ---- alignment ----

// Head-averaged attention of the penultimate decoder layer; one link per
// target position at the row argmax, ties toward the smaller source index.
// I and J are the true target/source lengths (the trailing EOS row of the
// records is ignored).
inline data::LinkSet extract_alignment(const std::vector<AttentionRecord>& records, int I, int J,
                                       AttnKind kind = AttnKind::gamma) {
  int max_layer = 0;
  for (const auto& r : records) max_layer = std::max(max_layer, r.layer);
  int penult = max_layer - 1;
  std::vector<const AttentionRecord*> heads;
  for (const auto& r : records)
    if (r.layer == penult) {
      if (r.src_len != J || r.tgt_len < I)
        throw ContractError("attention record dimensions do not cover the sentence");
      heads.push_back(&r);
    }
  if (heads.empty())
    throw ContractError("no records for penultimate decoder layer " + std::to_string(penult));

  data::LinkSet links;
  for (int i = 0; i < I; ++i) {
    int best_j = 0;
    double best = -1.0;
    for (int j = 0; j < J; ++j) {
      double avg = 0.0;
      for (const auto* r : heads) avg += record_matrix(*r, kind)[i * r->src_len + j];
      avg /= double(heads.size());
      if (avg > best) {
        best = avg;
        best_j = j;
      }
    }
    links.emplace_back(i + 1, best_j + 1);
  }
  return links;
}

struct AlignmentScore {
  double aer = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

inline AlignmentScore aer(const data::LinkSet& predicted, const data::LinkSet& gold) {
  if (gold.empty()) throw ContractError("aer: empty gold link set");
  std::set<data::Link> g(gold.begin(), gold.end());
  std::set<data::Link> a(predicted.begin(), predicted.end());
  size_t inter = 0;
  for (const auto& link : a) inter += g.count(link);
  AlignmentScore s;
  s.precision = a.empty() ? 0.0 : double(inter) / double(a.size());
  s.recall = double(inter) / double(g.size());
  s.aer = 1.0 - 2.0 * double(inter) / double(a.size() + g.size());
  return s;
}

// Micro-averaged AER over a corpus via forced decoding.
inline AlignmentScore corpus_aer(const Model& model,
                                 const std::vector<data::AlignedExample>& corpus,
                                 AttnKind kind = AttnKind::gamma) {
  if (corpus.empty()) throw ContractError("corpus_aer: empty corpus");
  size_t inter = 0, a_total = 0, g_total = 0;
  for (const auto& ex : corpus) {
    auto records = model.forced_decode_attention(ex.src, ex.tgt);
    auto links = extract_alignment(records, int(ex.tgt.size()), int(ex.src.size()), kind);
    std::set<data::Link> g(ex.gold.begin(), ex.gold.end());
    for (const auto& link : links) inter += g.count(link);
    a_total += links.size();
    g_total += g.size();
  }
  AlignmentScore s;
  s.precision = a_total ? double(inter) / double(a_total) : 0.0;
  s.recall = g_total ? double(inter) / double(g_total) : 0.0;
  s.aer = 1.0 - 2.0 * double(inter) / double(a_total + g_total);
  return s;
}

// ---- n-gram precision and BLEU ----

// Modified (clipped) n-gram precision; absent when hyp has no n-grams.
inline std::optional<double> ngram_precision(const std::vector<int>& hyp,
                                             const std::vector<int>& ref, int n) {
  if (n < 1 || n > 4) throw ContractError("ngram_precision: n must lie in [1,4]");
  if (int(hyp.size()) < n) return std::nullopt;
  auto count = [n](const std::vector<int>& toks) {
    std::map<std::vector<int>, int> c;
    for (size_t s = 0; s + n <= toks.size(); ++s)
      ++c[std::vector<int>(toks.begin() + s, toks.begin() + s + n)];
    return c;
  };
  auto hc = count(hyp);
  auto rc = count(ref);
  int match = 0, total = 0;
  for (const auto& [gram, c] : hc) {
    total += c;
    auto it = rc.find(gram);
    if (it != rc.end()) match += std::min(c, it->second);
  }
  return double(match) / double(total);
}

// Corpus-level clipped n-gram counts, the shared substrate of BLEU and the
// n-gram gap report.
struct NgramStats {
  long long match[5] = {0};  // index by n, 1..4
  long long total[5] = {0};
  size_t hyp_len = 0, ref_len = 0;
};

inline NgramStats corpus_ngram_stats(const std::vector<std::vector<int>>& hyps,
                                     const std::vector<std::vector<int>>& refs) {
  if (hyps.empty() || hyps.size() != refs.size())
    throw ContractError("n-gram scoring needs non-empty corpora of equal length");
  NgramStats st;
  for (size_t s = 0; s < hyps.size(); ++s) {
    st.hyp_len += hyps[s].size();
    st.ref_len += refs[s].size();
    for (int n = 1; n <= 4; ++n) {
      if (int(hyps[s].size()) < n) continue;
      std::map<std::vector<int>, int> hc, rc;
      for (size_t p = 0; p + n <= hyps[s].size(); ++p)
        ++hc[std::vector<int>(hyps[s].begin() + p, hyps[s].begin() + p + n)];
      for (size_t p = 0; p + n <= refs[s].size(); ++p)
        ++rc[std::vector<int>(refs[s].begin() + p, refs[s].begin() + p + n)];
      for (const auto& [gram, c] : hc) {
        st.total[n] += c;
        auto it = rc.find(gram);
        if (it != rc.end()) st.match[n] += std::min(c, it->second);
      }
    }
  }
  return st;
}

// Raw corpus-wide modified precisions; absent when no hyp n-grams exist.
inline std::array<std::optional<double>, 4> corpus_ngram_precisions(
    const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  NgramStats st = corpus_ngram_stats(hyps, refs);
  std::array<std::optional<double>, 4> out;
  for (int n = 1; n <= 4; ++n)
    if (st.total[n]) out[size_t(n - 1)] = double(st.match[n]) / double(st.total[n]);
  return out;
}

// Corpus BLEU on token ids: geometric mean of modified precisions n=1..4
// (add-1 smoothed for n >= 2) times the brevity penalty, scaled to 0-100.
inline double corpus_bleu(const std::vector<std::vector<int>>& hyps,
                          const std::vector<std::vector<int>>& refs) {
  NgramStats st = corpus_ngram_stats(hyps, refs);
  if (st.hyp_len == 0) return 0.0;
  double log_p = 0.0;
  for (int n = 1; n <= 4; ++n) {
    double p;
    if (n == 1)
      p = st.total[1] ? double(st.match[1]) / double(st.total[1]) : 0.0;
    else
      p = double(st.match[n] + 1) / double(st.total[n] + 1);
    if (p <= 0.0) return 0.0;
    log_p += std::log(p) / 4.0;
  }
  double bp = st.hyp_len >= st.ref_len ? 1.0 : std::exp(1.0 - double(st.ref_len) / double(st.hyp_len));
  return 100.0 * bp * std::exp(log_p);
}

// ---- length buckets ----

struct LengthBucket {
  int lo, hi;  // (lo, hi], hi < 0 means unbounded
};

inline std::vector<LengthBucket> default_length_buckets() {
  return {{0, 10}, {10, 20}, {20, 30}, {30, -1}};
}

struct LengthBucketRow {
  std::string label;
  size_t count = 0;
  double bleu = 0.0;
  double gamma_entropy = 0.0;
  bool present = false;
};

inline std::string bucket_label(const LengthBucket& b) {
  if (b.hi < 0) return "(" + std::to_string(b.lo) + ",inf)";
  return "(" + std::to_string(b.lo) + "," + std::to_string(b.hi) + "]";
}

// Greedy-decodes each example, then reports BLEU (hyp vs reference target)
// and mean fused-attention entropy per source-length bucket.
inline std::vector<LengthBucketRow> length_bucket_eval(
    const Model& model, const std::vector<data::AlignedExample>& corpus,
    const std::vector<LengthBucket>& buckets = default_length_buckets()) {
  std::vector<LengthBucketRow> rows;
  for (const auto& b : buckets) {
    LengthBucketRow row;
    row.label = bucket_label(b);
    std::vector<std::vector<int>> hyps, refs;
    std::vector<AttentionRecord> records;
    for (const auto& ex : corpus) {
      int J = int(ex.src.size());
      if (J <= b.lo || (b.hi >= 0 && J > b.hi)) continue;
      hyps.push_back(model.greedy_decode(ex.src, size_t(model.config().max_len)));
      refs.push_back(ex.tgt);
      auto recs = model.forced_decode_attention(ex.src, ex.tgt);
      records.insert(records.end(), recs.begin(), recs.end());
    }
    if (!hyps.empty()) {
      row.present = true;
      row.count = hyps.size();
      row.bleu = corpus_bleu(hyps, refs);
      row.gamma_entropy = record_entropy(records, AttnKind::gamma).mean;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---- attention dumps ----

inline void write_attention_dump(const std::string& path,
                                 const std::vector<AttentionRecord>& records) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write attention dump: " + path);
  for (const auto& r : records) {
    nlohmann::json rec;
    rec["layer"] = r.layer;
    rec["head"] = r.head;
    rec["src_len"] = r.src_len;
    rec["tgt_len"] = r.tgt_len;
    rec["alpha"] = r.alpha;
    rec["beta"] = r.beta;
    rec["gamma"] = r.gamma;
    rec["gate"] = r.gate;
    out << rec.dump() << '\n';
  }
}

inline std::vector<AttentionRecord> read_attention_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open attention dump: " + path);
  std::vector<AttentionRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      nlohmann::json rec = nlohmann::json::parse(line);
      AttentionRecord r;
      r.layer = rec.at("layer").get<int>();
      r.head = rec.at("head").get<int>();
      r.src_len = rec.at("src_len").get<int>();
      r.tgt_len = rec.at("tgt_len").get<int>();
      r.alpha = rec.at("alpha").get<std::vector<double>>();
      r.beta = rec.at("beta").get<std::vector<double>>();
      r.gamma = rec.at("gamma").get<std::vector<double>>();
      r.gate = rec.at("gate").get<std::vector<double>>();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(path + ":" + std::to_string(lineno) + ": bad attention record: " +
                          e.what());
    }
  }
  return records;
}

}  // namespace gma::analysis
