#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "pinmt/data.hpp"
#include "pinmt/transformer.hpp"

namespace pinmt {
namespace {

TEST(Vocab, ReservedThenFrequency) {
  auto v = build_vocab({{"a", "a", "b"}}, 10);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"<pad>", "<s>", "</s>", "<unk>", "<mask>", "a", "b"}));
}

TEST(Vocab, TiesAreLexicographic) {
  auto v = build_vocab({{"b", "a"}}, 10);
  EXPECT_EQ(v.id("a"), 5);
  EXPECT_EQ(v.id("b"), 6);
}

TEST(Vocab, OverflowTokensBecomeUnk) {
  auto v = build_vocab({{"a", "a", "b", "c"}}, 6);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.encode({"a", "b", "c"}), (Sentence{5, kUnk, kUnk}));
}

TEST(Vocab, EncodeDecodeRoundTrip) {
  auto v = build_vocab({{"x", "y", "z", "y"}}, 20);
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Sentence ids;
    for (int i = 0; i < 6; ++i) ids.push_back(kNumReserved + static_cast<int>(rng.below(3)));
    EXPECT_EQ(v.encode(v.decode(ids)), ids);
  }
}

TEST(Vocab, FileRoundTrip) {
  auto path = std::filesystem::temp_directory_path() / "pinmt_vocab_test.txt";
  auto v = build_vocab({{"q", "r", "r"}}, 20);
  v.save(path);
  auto w = Vocab::load(path);
  EXPECT_EQ(w.tokens(), v.tokens());
  std::filesystem::remove(path);
}

TEST(Vocab, EmptyCorpusRejected) { EXPECT_THROW(build_vocab({}, 10), std::invalid_argument); }

TEST(Synthetic, LexiconAndReorder) {
  std::map<std::string, std::string> lex{{"a", "x"}, {"b", "y"}};
  EXPECT_EQ(SynthTask::translate({"a", "b"}, lex, Reorder::reverse), (Words{"y", "x"}));
  EXPECT_EQ(SynthTask::translate({"a", "b", "a"}, lex, Reorder::swap_pairs), (Words{"y", "x", "x"}));
  EXPECT_THROW(SynthTask::translate({"c"}, lex, Reorder::none), std::invalid_argument);
}

SynthTaskSpec small_spec() {
  SynthTaskSpec s;
  s.frequent_words = 40;
  s.rare_words = 10;
  s.parallel_pairs = 400;
  s.monolingual = 4000;
  s.seed = 7;
  return s;
}

TEST(Synthetic, SameSeedSameCorpora) {
  auto a = SynthTask(small_spec()).generate();
  auto b = SynthTask(small_spec()).generate();
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].source, b.train[i].source);
    EXPECT_EQ(a.train[i].target, b.train[i].target);
  }
  EXPECT_EQ(a.monolingual, b.monolingual);
}

TEST(Synthetic, TargetsFollowLexiconAndSplitsAreSized) {
  SynthTask task(small_spec());
  auto c = task.generate();
  EXPECT_EQ(c.train.size(), 360u);
  EXPECT_EQ(c.valid.size(), 20u);
  EXPECT_EQ(c.test.size(), 20u);
  for (const auto* split : {&c.train, &c.valid, &c.test})
    for (const auto& p : *split) {
      EXPECT_EQ(p.target, task.translate(p.source));
      EXPECT_GE(p.source.size(), 4u);
      EXPECT_LE(p.source.size(), 10u);
    }
}

TEST(Synthetic, LexiconIsBijectiveOverFrequentTier) {
  SynthTask task(small_spec());
  std::set<std::string> targets;
  std::size_t frequent = 0;
  for (const auto& [src, tgt] : task.lexicon())
    if (!task.is_alias(src)) {
      ++frequent;
      targets.insert(tgt);
    }
  EXPECT_EQ(frequent, 40u);
  EXPECT_EQ(targets.size(), 40u);
}

TEST(Synthetic, RareTierIsCommonInMonolingualAndSparseInParallel) {
  // The acceptance-scale task.
  SynthTaskSpec spec;
  spec.parallel_pairs = 2400;
  spec.monolingual = 50000;
  SynthTask task(spec);
  auto c = task.generate();
  for (const auto& [word, alias] : task.aliases()) {
    std::size_t mono = 0, train = 0, eval = 0;
    for (const auto& s : c.monolingual) mono += std::count(s.begin(), s.end(), alias) > 0;
    for (const auto& p : c.train) train += std::count(p.source.begin(), p.source.end(), alias) > 0;
    for (const auto& p : c.test) eval += std::count(p.source.begin(), p.source.end(), alias) > 0;
    EXPECT_GE(mono, c.monolingual.size() / 100) << alias;
    EXPECT_LE(train * 1000, c.train.size()) << alias;
    EXPECT_GE(train, 1u) << alias;
    (void)eval;
  }
  std::size_t eval_with_alias = 0;
  for (const auto& p : c.test)
    eval_with_alias += std::any_of(p.source.begin(), p.source.end(), [&](const auto& w) { return task.is_alias(w); });
  EXPECT_GT(eval_with_alias, c.test.size() / 2);
  // Monolingual text covers the whole vocabulary.
  auto vocab = build_joint_vocab(c, 100000);
  std::set<std::string> mono_words;
  for (const auto& s : c.monolingual) mono_words.insert(s.begin(), s.end());
  EXPECT_EQ(mono_words.size() + kNumReserved, vocab.size());
}

TEST(Synthetic, InconsistentSpecsRejected) {
  auto s = small_spec();
  s.rare_words = 41;
  EXPECT_THROW(SynthTask{s}, std::invalid_argument);
  s = small_spec();
  s.min_len = 12;
  EXPECT_THROW(SynthTask{s}, std::invalid_argument);
  s = small_spec();
  s.valid_ratio = 0.2;
  EXPECT_THROW(SynthTask{s}, std::invalid_argument);
  s = small_spec();
  s.monolingual = 0;
  EXPECT_THROW(SynthTask{s}, std::invalid_argument);
}

TEST(Synthetic, CorpusFilesRoundTrip) {
  auto dir = std::filesystem::temp_directory_path() / "pinmt_data_test";
  auto c = SynthTask(small_spec()).generate();
  auto vocab = build_joint_vocab(c, 1000);
  write_corpora(dir, c, vocab);
  auto d = read_corpora(dir);
  ASSERT_EQ(d.test.size(), c.test.size());
  for (std::size_t i = 0; i < c.test.size(); ++i) EXPECT_EQ(d.test[i].target, c.test[i].target);
  EXPECT_EQ(d.monolingual, c.monolingual);
  EXPECT_EQ(Vocab::load(dir / "vocab.txt").tokens(), vocab.tokens());
  std::filesystem::remove_all(dir);
}

ParallelCorpus three_pairs() {
  ParallelCorpus c;
  c.pairs = {{{5, 6}, {9}, Direction::fwd}, {{7}, {10, 11}, Direction::fwd}, {{8, 8, 8}, {12}, Direction::fwd}};
  return c;
}

TEST(Bidirectional, DoublesAndSwaps) {
  auto bi = make_bidirectional(three_pairs(), 1);
  EXPECT_EQ(bi.size(), 6u);
  EXPECT_TRUE(bi.bidirectional);
  auto has = [&](Sentence s, Sentence t, Direction d) {
    return std::count(bi.pairs.begin(), bi.pairs.end(), SentencePair{s, t, d}) == 1;
  };
  EXPECT_TRUE(has({5, 6}, {9}, Direction::fwd));
  EXPECT_TRUE(has({9}, {5, 6}, Direction::rev));
  EXPECT_THROW(make_bidirectional(bi, 1), std::invalid_argument);
}

TEST(Bidirectional, SwapIsAnInvolution) {
  auto bi = make_bidirectional(three_pairs(), 3);
  auto a = bi.pairs;
  std::vector<SentencePair> b;
  for (const auto& p : a) b.push_back(swap_pair(swap_pair(p)));
  EXPECT_EQ(a, b);
  // The swapped multiset equals the original multiset with directions flipped.
  std::multiset<std::pair<Sentence, Sentence>> orig, swapped;
  for (const auto& p : a) {
    orig.insert({p.source, p.target});
    auto s = swap_pair(p);
    swapped.insert({s.source, s.target});
  }
  EXPECT_EQ(orig, swapped);
}

TEST(Bidirectional, OptionalDirectionTags) {
  auto bi = make_bidirectional(three_pairs(), 1, std::pair{20, 21});
  for (const auto& p : bi.pairs) EXPECT_EQ(p.source.front(), p.direction == Direction::fwd ? 20 : 21);
}

ParallelCorpus lengths(std::initializer_list<std::size_t> ls) {
  ParallelCorpus c;
  for (auto l : ls) c.pairs.push_back({Sentence(l, 5), Sentence(l, 6), Direction::fwd});
  return c;
}

TEST(Batching, HandPackedExample) {
  auto b = batch_by_tokens(lengths({3, 3, 4}), 8, std::nullopt);
  EXPECT_EQ(b, (std::vector<std::vector<std::size_t>>{{0, 1}, {2}}));
}

TEST(Batching, HugeBudgetIsOneBatch) {
  auto b = batch_by_tokens(lengths({3, 7, 2, 5}), 100000, 4);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].size(), 4u);
}

TEST(Batching, EveryPairOnceAndWithinBudget) {
  ParallelCorpus c;
  Rng rng(12);
  for (int i = 0; i < 300; ++i)
    c.pairs.push_back({Sentence(1 + rng.below(12), 5), Sentence(1 + rng.below(12), 6), Direction::fwd});
  auto batches = batch_by_tokens(c, 64, 99);
  std::vector<std::size_t> seen;
  for (const auto& b : batches) {
    std::size_t ms = 0, mt = 0;
    for (auto i : b) {
      seen.push_back(i);
      ms = std::max(ms, c.pairs[i].source.size() + 1);
      mt = std::max(mt, c.pairs[i].target.size() + 1);
    }
    EXPECT_LE(b.size() * ms, 64u);
    EXPECT_LE(b.size() * mt, 64u);
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], i);
  EXPECT_EQ(seen.size(), 300u);
  EXPECT_EQ(batch_by_tokens(c, 64, 99), batches);
}

TEST(Batching, OversizedSentenceNamed) {
  try {
    batch_by_tokens(lengths({3, 9}), 10, std::nullopt);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("sentence 1"), std::string::npos);
  }
}

TEST(Batching, PadColumnsDoNotChangeLoss) {
  ParamStore<double> store;
  Rng rng(3);
  TransformerDims dims;
  dims.vocab = 10;
  dims.d_model = 8;
  dims.heads = 2;
  dims.ffn = 16;
  dims.max_len = 16;
  auto p = make_transformer(store, dims, true, rng);
  ParallelCorpus c;
  c.pairs = {{{5, 6, 7}, {8, 9}, Direction::fwd}, {{6}, {7, 7, 8}, Direction::fwd}};
  auto loss_for = [&](std::size_t extra) {
    auto b = make_batch(c, {0, 1});
    auto widen = [&](TokenBatch t) {
      std::vector<Sentence> rows(t.rows);
      for (std::size_t r = 0; r < t.rows; ++r) rows[r].assign(t.ids.begin() + r * t.cols, t.ids.begin() + (r + 1) * t.cols);
      return TokenBatch::pad(rows, t.cols + extra);
    };
    auto src = widen(b.source), din = widen(b.decoder_input), lab = widen(b.labels);
    auto mem = encoder_forward(encode_input(src, *p.source), p.encoder, padding_mask(src, src)).back();
    auto h = decoder_forward(encode_input(din, p.target), mem, p.decoder, causal_mask(din), padding_mask(din, src))
                 .back();
    return smoothed_cross_entropy_logits(output_logits(h, p.projection), lab.ids, 0.1).item();
  };
  EXPECT_NEAR(loss_for(0), loss_for(3), 1e-9);
}

}  // namespace
}  // namespace pinmt
