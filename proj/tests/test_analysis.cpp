#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "gma/analysis.hpp"
#include "gma/train.hpp"

using namespace gma;
using analysis::AttnKind;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

AttentionRecord make_record(int layer, int head, const std::vector<std::vector<double>>& gamma) {
  AttentionRecord r;
  r.layer = layer;
  r.head = head;
  r.tgt_len = int(gamma.size());
  r.src_len = int(gamma[0].size());
  for (const auto& row : gamma) {
    r.gamma.insert(r.gamma.end(), row.begin(), row.end());
    r.alpha.insert(r.alpha.end(), row.begin(), row.end());
  }
  r.beta.assign(r.gamma.size(), 0.0);
  r.gate.assign(size_t(r.tgt_len), 0.5);
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("attention entropy matches closed forms and renormalizes") {
  auto st = analysis::attention_entropy({{0.25, 0.25, 0.25, 0.25}});
  REQUIRE_THAT(st.mean, WithinAbs(1.3863, 5e-5));

  REQUIRE(analysis::attention_entropy({{0.0, 1.0, 0.0}}).mean == 0.0);

  REQUIRE_THAT(analysis::attention_entropy({{0.5, 0.25, 0.25}}).mean, WithinAbs(1.0397, 5e-5));

  // Scaling a row must not change its entropy: rows renormalize first.
  auto scaled = analysis::attention_entropy({{0.2, 0.1, 0.1}});
  REQUIRE_THAT(scaled.mean, WithinAbs(1.0397, 5e-5));

  auto mixed = analysis::attention_entropy({{0.25, 0.25, 0.25, 0.25}, {0.0, 0.0}});
  REQUIRE(mixed.rows == 1);
  REQUIRE(mixed.skipped == 1);
  REQUIRE_THAT(mixed.mean, WithinAbs(std::log(4.0), 1e-12));
}

TEST_CASE("entropy of any renormalized row stays within [0, ln J]") {
  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    size_t J = 1 + rng.range(0, 11);
    std::vector<double> row(J);
    for (auto& v : row) v = std::exp(rng.normal());
    auto st = analysis::attention_entropy({row});
    REQUIRE(st.mean >= 0.0);
    REQUIRE(st.mean <= std::log(double(J)) + 1e-12);
  }
}

TEST_CASE("entropy report groups records by source length") {
  std::vector<AttentionRecord> records;
  records.push_back(make_record(1, 0, {{0.5, 0.5, 0.0, 0.0, 0.0}}));  // src_len 5
  records.push_back(make_record(1, 0, {std::vector<double>(25, 1.0 / 25)}));  // src_len 25

  auto rep = analysis::entropy_report(records);
  REQUIRE(rep.buckets.size() == 3);
  REQUIRE(rep.buckets[0].label == "(0,20]");
  REQUIRE(rep.buckets[1].label == "[21,40]");
  REQUIRE(rep.buckets[2].label == "[41,inf)");

  REQUIRE(rep.buckets[0].present);
  REQUIRE_THAT(rep.buckets[0].alpha, WithinAbs(std::log(2.0), 1e-12));
  REQUIRE(rep.buckets[1].present);
  REQUIRE_THAT(rep.buckets[1].gamma, WithinAbs(std::log(25.0), 1e-12));
  REQUIRE_FALSE(rep.buckets[2].present);

  // All-zero beta rows are skipped rather than scored.
  REQUIRE(analysis::record_entropy(records, AttnKind::beta).rows == 0);
  REQUIRE(analysis::record_entropy(records, AttnKind::beta).skipped == 2);
}

TEST_CASE("gate histogram bins by 0.05 and normalizes per layer") {
  AttentionRecord r = make_record(1, 0, {{1.0, 0.0}});
  r.gate = {0.0, 0.04, 0.06, 0.5, 0.99, 1.0};
  AttentionRecord r2 = make_record(2, 0, {{1.0, 0.0}});
  r2.gate = {0.3};

  auto rep = analysis::gate_report({r, r2});
  REQUIRE(rep.layers.size() == 2);
  REQUIRE(rep.layers[0].layer == 1);
  REQUIRE(rep.layers[0].samples == 6);
  REQUIRE(rep.layers[0].mass.size() == 20);
  REQUIRE_THAT(rep.layers[0].mass[0], WithinAbs(2.0 / 6.0, 1e-12));   // 0.0 and 0.04
  REQUIRE_THAT(rep.layers[0].mass[1], WithinAbs(1.0 / 6.0, 1e-12));   // 0.06
  REQUIRE_THAT(rep.layers[0].mass[10], WithinAbs(1.0 / 6.0, 1e-12));  // 0.5
  REQUIRE_THAT(rep.layers[0].mass[19], WithinAbs(2.0 / 6.0, 1e-12));  // 0.99 and 1.0

  for (const auto& layer : rep.layers) {
    double total = 0.0;
    for (double m : layer.mass) total += m;
    REQUIRE_THAT(total, WithinAbs(1.0, 1e-12));
  }

  std::string path = "gates_test.svg";
  analysis::write_gate_svg(path, rep);
  std::string svg = slurp(path);
  REQUIRE_THAT(svg, ContainsSubstring("<svg"));
  REQUIRE_THAT(svg, ContainsSubstring("layer 1 (n=6)"));
  REQUIRE_THAT(svg, ContainsSubstring("layer 2 (n=1)"));
  std::remove(path.c_str());
}

TEST_CASE("alignment extraction picks the penultimate-layer argmax") {
  // Layer 2 exists only so that layer 1 is penultimate.
  std::vector<AttentionRecord> records;
  records.push_back(make_record(1, 0, {{0.1, 0.7, 0.2}}));
  records.push_back(make_record(2, 0, {{0.9, 0.05, 0.05}}));

  auto links = analysis::extract_alignment(records, 1, 3);
  REQUIRE(links == data::LinkSet{{1, 2}});
}

TEST_CASE("alignment extraction averages heads and breaks ties low") {
  std::vector<AttentionRecord> records;
  records.push_back(make_record(1, 0, {{1.0, 0.0}}));
  records.push_back(make_record(1, 1, {{0.0, 1.0}}));
  records.push_back(make_record(2, 0, {{0.0, 1.0}}));

  auto links = analysis::extract_alignment(records, 1, 2);
  REQUIRE(links == data::LinkSet{{1, 1}});  // averaged row ties at 0.5
}

TEST_CASE("alignment extraction is invariant to positive rescaling") {
  std::vector<AttentionRecord> base;
  base.push_back(make_record(1, 0, {{0.2, 0.5, 0.3}, {0.6, 0.1, 0.3}}));
  base.push_back(make_record(2, 0, {{1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}}));
  auto want = analysis::extract_alignment(base, 2, 3);
  REQUIRE(want == data::LinkSet{{1, 2}, {2, 1}});

  auto scaled = base;
  for (auto& v : scaled[0].gamma) v *= 3.7;
  REQUIRE(analysis::extract_alignment(scaled, 2, 3) == want);
}

TEST_CASE("alignment extraction rejects missing layers and bad dimensions") {
  std::vector<AttentionRecord> only_top;
  only_top.push_back(make_record(1, 0, {{1.0, 0.0}}));
  REQUIRE_THROWS_WITH(analysis::extract_alignment(only_top, 1, 2),
                      ContainsSubstring("penultimate decoder layer"));

  std::vector<AttentionRecord> records;
  records.push_back(make_record(1, 0, {{1.0, 0.0}}));
  records.push_back(make_record(2, 0, {{1.0, 0.0}}));
  REQUIRE_THROWS_WITH(analysis::extract_alignment(records, 1, 3),
                      ContainsSubstring("dimensions"));
}

TEST_CASE("aer follows the set formula") {
  data::LinkSet s{{1, 1}, {2, 2}};

  auto perfect = analysis::aer(s, s);
  REQUIRE(perfect.aer == 0.0);
  REQUIRE(perfect.precision == 1.0);
  REQUIRE(perfect.recall == 1.0);

  auto disjoint = analysis::aer({{1, 2}, {2, 1}}, s);
  REQUIRE(disjoint.aer == 1.0);

  auto half = analysis::aer({{1, 1}, {2, 3}}, s);
  REQUIRE_THAT(half.precision, WithinAbs(0.5, 1e-15));
  REQUIRE_THAT(half.recall, WithinAbs(0.5, 1e-15));
  REQUIRE_THAT(half.aer, WithinAbs(0.5, 1e-15));

  auto empty_pred = analysis::aer({}, s);
  REQUIRE(empty_pred.precision == 0.0);
  REQUIRE(empty_pred.aer == 1.0);

  REQUIRE_THROWS_WITH(analysis::aer(s, {}), ContainsSubstring("empty gold"));
}

TEST_CASE("aer complements the intersection ratio exactly") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    data::LinkSet a, g;
    for (int i = 1; i <= 6; ++i) {
      if (rng.unit() < 0.6) a.emplace_back(i, int(rng.range(1, 6)));
      if (rng.unit() < 0.6) g.emplace_back(i, int(rng.range(1, 6)));
    }
    if (g.empty()) continue;
    auto sc = analysis::aer(a, g);
    std::set<data::Link> gs(g.begin(), g.end()), as(a.begin(), a.end());
    size_t inter = 0;
    for (const auto& l : as) inter += gs.count(l);
    REQUIRE(sc.aer + 2.0 * double(inter) / double(as.size() + gs.size()) == 1.0);
  }
}

TEST_CASE("modified n-gram precision clips against the reference") {
  std::vector<int> abc{10, 11, 12};
  REQUIRE(*analysis::ngram_precision(abc, abc, 2) == 1.0);

  std::vector<int> abd{10, 11, 13};
  REQUIRE_THAT(*analysis::ngram_precision(abc, abd, 2), WithinAbs(0.5, 1e-15));

  std::vector<int> aaa{10, 10, 10}, a{10};
  REQUIRE_THAT(*analysis::ngram_precision(aaa, a, 1), WithinAbs(1.0 / 3.0, 1e-15));

  REQUIRE_FALSE(analysis::ngram_precision(a, abc, 2).has_value());
  REQUIRE_THROWS_AS(analysis::ngram_precision(abc, abc, 0), ContractError);
  REQUIRE_THROWS_AS(analysis::ngram_precision(abc, abc, 5), ContractError);
}

TEST_CASE("corpus BLEU hits its closed forms") {
  std::vector<std::vector<int>> refs{{3, 4, 5, 6}, {7, 8, 9}};
  REQUIRE(analysis::corpus_bleu(refs, refs) == 100.0);

  std::vector<std::vector<int>> empties{{}, {}};
  REQUIRE(analysis::corpus_bleu(empties, refs) == 0.0);

  // Perfect prefix one token short: BP = exp(1 - 5/4), precisions all 1.
  double bleu = analysis::corpus_bleu({{3, 4, 5, 6}}, {{3, 4, 5, 6, 7}});
  REQUIRE_THAT(bleu, WithinAbs(100.0 * std::exp(1.0 - 5.0 / 4.0), 1e-9));
  REQUIRE_THAT(bleu, WithinAbs(77.88, 5e-3));

  REQUIRE_THROWS_AS(analysis::corpus_bleu({}, {}), ContractError);
  REQUIRE_THROWS_AS(analysis::corpus_bleu({{3}}, refs), ContractError);
}

TEST_CASE("length buckets label, gate absence, and agree with overall BLEU") {
  REQUIRE(analysis::bucket_label({0, 10}) == "(0,10]");
  REQUIRE(analysis::bucket_label({30, -1}) == "(30,inf)");

  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ffn = 16;
  cfg.src_vocab = 12;
  cfg.tgt_vocab = 12;
  cfg.max_len = 16;
  cfg.gma_layers = {1, 2};
  cfg.gma.K = 2;
  Model m(cfg, 51);

  data::TaskSpec task;
  task.kind = data::TaskKind::copy;
  task.vocab = 12;
  task.min_len = 4;
  task.max_len = 8;
  task.corpus_size = 6;
  task.seed = 3;
  auto corpus = data::generate(task);

  auto rows = analysis::length_bucket_eval(m, corpus);
  REQUIRE(rows.size() == 4);
  REQUIRE(rows[0].present);
  REQUIRE(rows[0].count == corpus.size());
  for (size_t b = 1; b < rows.size(); ++b) REQUIRE_FALSE(rows[b].present);

  std::vector<std::vector<int>> hyps, refs;
  for (const auto& ex : corpus) {
    hyps.push_back(m.greedy_decode(ex.src, size_t(cfg.max_len)));
    refs.push_back(ex.tgt);
  }
  REQUIRE(rows[0].bleu == analysis::corpus_bleu(hyps, refs));
  REQUIRE(rows[0].gamma_entropy >= 0.0);
}

TEST_CASE("corpus AER micro-averages forced-decode alignments") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ffn = 16;
  cfg.src_vocab = 12;
  cfg.tgt_vocab = 12;
  cfg.max_len = 16;
  cfg.gma_layers = {1, 2};
  cfg.gma.K = 2;
  Model m(cfg, 52);

  data::TaskSpec task;
  task.kind = data::TaskKind::copy;
  task.vocab = 12;
  task.min_len = 3;
  task.max_len = 5;
  task.corpus_size = 4;
  task.seed = 9;
  auto corpus = data::generate(task);

  auto score = analysis::corpus_aer(m, corpus);
  REQUIRE(score.aer >= 0.0);
  REQUIRE(score.aer <= 1.0);
  REQUIRE(score.precision >= 0.0);
  REQUIRE(score.recall <= 1.0);

  auto single = analysis::corpus_aer(m, {corpus[0]});
  auto records = m.forced_decode_attention(corpus[0].src, corpus[0].tgt);
  auto links = analysis::extract_alignment(records, int(corpus[0].tgt.size()),
                                           int(corpus[0].src.size()));
  auto direct = analysis::aer(links, corpus[0].gold);
  REQUIRE(single.aer == direct.aer);

  REQUIRE_THROWS_AS(analysis::corpus_aer(m, {}), ContractError);
}

TEST_CASE("attention dumps survive a JSONL round trip") {
  std::vector<AttentionRecord> records;
  records.push_back(make_record(1, 0, {{0.2, 0.8}, {0.6, 0.4}}));
  records.push_back(make_record(2, 1, {{1.0, 0.0, 0.0}}));
  records[0].gate = {0.25, 0.75};

  std::string path = "dump_test.jsonl";
  analysis::write_attention_dump(path, records);
  auto back = analysis::read_attention_dump(path);
  REQUIRE(back.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    REQUIRE(back[i].layer == records[i].layer);
    REQUIRE(back[i].head == records[i].head);
    REQUIRE(back[i].src_len == records[i].src_len);
    REQUIRE(back[i].tgt_len == records[i].tgt_len);
    REQUIRE(back[i].alpha == records[i].alpha);
    REQUIRE(back[i].beta == records[i].beta);
    REQUIRE(back[i].gamma == records[i].gamma);
    REQUIRE(back[i].gate == records[i].gate);
  }
  std::remove(path.c_str());

  {
    std::ofstream out(path);
    out << "{\"layer\":1,\"head\":0,\"src_len\":1,\"tgt_len\":1,\"alpha\":[1.0],"
           "\"beta\":[0.0],\"gamma\":[1.0],\"gate\":[0.5]}\n";
    out << "{\"layer\":2}\n";
  }
  REQUIRE_THROWS_WITH(analysis::read_attention_dump(path), ContainsSubstring(":2:"));
  std::remove(path.c_str());

  REQUIRE_THROWS_WITH(analysis::read_attention_dump("missing_dump.jsonl"),
                      ContainsSubstring("cannot open"));
}
