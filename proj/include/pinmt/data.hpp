#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pinmt/rng.hpp"
#include "pinmt/tokens.hpp"

namespace pinmt {

using Words = std::vector<std::string>;

inline Words split_words(const std::string& line) {
  Words out;
  std::istringstream is(line);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline std::string join_words(const Words& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<s>", "</s>", "<unk>", "<mask>"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  /// Appends a token if absent; returns its id.
  int add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_[token] = id;
    return id;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  Sentence encode(const Words& words) const {
    Sentence out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  /// Drops reserved ids except UNK, which decodes to its surface form.
  Words decode(const Sentence& ids) const {
    Words out;
    for (int i : ids) {
      if (i == kPad || i == kBos || i == kEos || i == kMask) continue;
      out.push_back(token(i));
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write vocabulary file " + path.string());
    for (const auto& t : tokens_) os << t << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read vocabulary file " + path.string());
    Vocab v;
    std::string line;
    std::size_t row = 0;
    while (std::getline(is, line)) {
      if (row < kNumReserved) {
        if (line != v.tokens_[row])
          throw std::runtime_error("vocabulary file " + path.string() + ": reserved row " + std::to_string(row) +
                                   " is '" + line + "'");
      } else {
        v.add(line);
      }
      ++row;
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Reserved ids first, then tokens by descending frequency with
/// lexicographic tie-breaks. `max_size` counts the reserved rows too.
inline Vocab build_vocab(const std::vector<Words>& corpus, std::size_t max_size) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& s : corpus)
    for (const auto& w : s) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [w, n] : ranked) {
    if (v.size() >= max_size) break;
    v.add(w);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Parallel corpora

enum class Direction { fwd, rev };

struct SentencePair {
  Sentence source;
  Sentence target;
  Direction direction = Direction::fwd;

  bool operator==(const SentencePair&) const = default;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  bool bidirectional = false;

  std::size_t size() const { return pairs.size(); }
};

inline SentencePair swap_pair(const SentencePair& p) {
  return {p.target, p.source, p.direction == Direction::fwd ? Direction::rev : Direction::fwd};
}

/// Originals tagged fwd, then swapped copies tagged rev, then a seeded shuffle.
/// With `tags`, the matching tag id is prepended to every source side.
inline ParallelCorpus make_bidirectional(const ParallelCorpus& corpus, std::uint64_t seed,
                                         std::optional<std::pair<int, int>> tags = std::nullopt) {
  if (corpus.bidirectional) throw std::invalid_argument("make_bidirectional: corpus is already bidirectional");
  ParallelCorpus out;
  out.bidirectional = true;
  out.pairs.reserve(corpus.size() * 2);
  for (const auto& p : corpus.pairs) out.pairs.push_back({p.source, p.target, Direction::fwd});
  for (const auto& p : corpus.pairs) out.pairs.push_back({p.target, p.source, Direction::rev});
  if (tags)
    for (auto& p : out.pairs)
      p.source.insert(p.source.begin(), p.direction == Direction::fwd ? tags->first : tags->second);
  Rng rng(seed);
  rng.shuffle(out.pairs);
  return out;
}

// ---------------------------------------------------------------------------
// Token-budget batching

struct Batch {
  std::vector<std::size_t> indices;  // into the corpus
  TokenBatch source;                 // x + EOS
  TokenBatch decoder_input;          // BOS + y
  TokenBatch labels;                 // y + EOS
};

inline Batch make_batch(const ParallelCorpus& corpus, std::vector<std::size_t> indices) {
  std::vector<Sentence> src, din, lab;
  for (auto i : indices) {
    const auto& p = corpus.pairs.at(i);
    Sentence s = p.source;
    s.push_back(kEos);
    Sentence d{kBos};
    d.insert(d.end(), p.target.begin(), p.target.end());
    Sentence l = p.target;
    l.push_back(kEos);
    src.push_back(std::move(s));
    din.push_back(std::move(d));
    lab.push_back(std::move(l));
  }
  return {std::move(indices), TokenBatch::pad(src), TokenBatch::pad(din), TokenBatch::pad(lab)};
}

/// Groups pairs so that rows x longest row stays within `max_tokens` on each
/// side, counting the EOS/BOS position every model input carries.
inline std::vector<std::vector<std::size_t>> batch_by_tokens(const ParallelCorpus& corpus, std::size_t max_tokens,
                                                             std::optional<std::uint64_t> shuffle_seed) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (auto i : order) {
    const auto& p = corpus.pairs[i];
    const std::size_t longest = std::max(p.source.size(), p.target.size());
    if (longest + 2 > max_tokens)
      throw std::invalid_argument("batch_by_tokens: sentence " + std::to_string(i) + " of length " +
                                  std::to_string(longest) + " does not fit max_tokens " + std::to_string(max_tokens));
  }
  std::optional<Rng> rng;
  if (shuffle_seed) {
    rng.emplace(*shuffle_seed);
    rng->shuffle(order);
  }
  auto cost = [&](std::size_t i) {
    return std::pair{corpus.pairs[i].source.size() + 1, corpus.pairs[i].target.size() + 1};
  };
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return cost(a) < cost(b); });

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t max_src = 0, max_tgt = 0;
  for (auto i : order) {
    const auto [s, t] = cost(i);
    const std::size_t ns = std::max(max_src, s), nt = std::max(max_tgt, t);
    if (!cur.empty() && ((cur.size() + 1) * ns > max_tokens || (cur.size() + 1) * nt > max_tokens)) {
      batches.push_back(std::move(cur));
      cur.clear();
      max_src = max_tgt = 0;
    }
    cur.push_back(i);
    max_src = std::max(max_src, s);
    max_tgt = std::max(max_tgt, t);
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  if (rng) rng->shuffle(batches);
  return batches;
}

// ---------------------------------------------------------------------------
// Synthetic rare-word translation task

enum class Reorder { none, reverse, swap_pairs };

inline Reorder reorder_from_name(const std::string& s) {
  if (s == "none") return Reorder::none;
  if (s == "reverse") return Reorder::reverse;
  if (s == "swap_pairs") return Reorder::swap_pairs;
  throw std::invalid_argument("unknown reorder rule '" + s + "'");
}

inline std::string reorder_name(Reorder r) {
  switch (r) {
    case Reorder::none: return "none";
    case Reorder::reverse: return "reverse";
    case Reorder::swap_pairs: return "swap_pairs";
  }
  return "none";
}

inline Words apply_reorder(Words w, Reorder r) {
  if (r == Reorder::reverse) std::reverse(w.begin(), w.end());
  if (r == Reorder::swap_pairs)
    for (std::size_t i = 0; i + 1 < w.size(); i += 2) std::swap(w[i], w[i + 1]);
  return w;
}

struct SynthTaskSpec {
  std::size_t frequent_words = 80;  // per language; the lexicon is a bijection over these
  std::size_t rare_words = 30;      // source-side aliases of frequent words
  std::size_t branching = 3;        // successors per word in the Markov grammar
  std::size_t min_len = 4;
  std::size_t max_len = 10;
  Reorder reorder = Reorder::reverse;
  std::size_t parallel_pairs = 2400;
  double train_ratio = 0.9, valid_ratio = 0.05, test_ratio = 0.05;
  std::size_t monolingual = 50000;
  double alias_rate_mono = 0.5;  // chance an aliasable word is written as its alias
  double alias_rate_eval = 0.5;
  std::size_t rare_trace = 1;  // training pairs that contain each alias
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("synthetic task: " + m); };
    if (frequent_words < 2) fail("need at least two frequent words");
    if (rare_words > frequent_words) fail("more rare aliases than frequent words");
    if (branching == 0 || branching > frequent_words) fail("branching must lie in [1, frequent_words]");
    if (min_len == 0 || min_len > max_len) fail("need 1 <= min_len <= max_len");
    if (parallel_pairs == 0 || monolingual == 0) fail("corpus sizes must be positive");
    if (train_ratio <= 0 || valid_ratio <= 0 || test_ratio <= 0 ||
        std::abs(train_ratio + valid_ratio + test_ratio - 1.0) > 1e-9)
      fail("split ratios must be positive and sum to 1");
    if (alias_rate_mono < 0 || alias_rate_mono > 1 || alias_rate_eval < 0 || alias_rate_eval > 1)
      fail("alias rates must lie in [0,1]");
  }
};

struct TextPair {
  Words source, target;
};

struct SynthCorpora {
  std::vector<TextPair> train, valid, test;
  std::vector<Words> monolingual;  // both languages, shuffled
};

/// Markov-chain source language, a bijective word lexicon onto a disjoint
/// target alphabet, and a tier of rare source aliases. An alias occurs in
/// exactly the contexts of its partner and translates like it, so only a
/// model that learned their equivalence from monolingual text can translate
/// it from parallel data that almost never shows it.
class SynthTask {
 public:
  explicit SynthTask(SynthTaskSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(spec_.seed);
    const std::size_t n = spec_.frequent_words;
    for (std::size_t i = 0; i < n; ++i) source_.push_back("s" + std::to_string(i));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    for (std::size_t i = 0; i < n; ++i) lexicon_[source_[i]] = "t" + std::to_string(perm[i]);
    // Grammar: random start weights and a fixed weighted successor set per word.
    start_.resize(n);
    for (auto& w : start_) w = 0.2 + rng.uniform();
    successors_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> cand(n);
      std::iota(cand.begin(), cand.end(), std::size_t{0});
      rng.shuffle(cand);
      for (std::size_t b = 0; b < spec_.branching; ++b) successors_[i].push_back({cand[b], 0.2 + rng.uniform()});
    }
    // Aliases shadow the words the grammar emits most often, so each alias is
    // well attested in monolingual text.
    std::vector<std::size_t> freq(n, 0);
    Rng probe(spec_.seed + 1);
    for (int k = 0; k < 4000; ++k)
      for (const auto& w : sample_source(probe)) ++freq[static_cast<std::size_t>(std::stoul(w.substr(1)))];
    std::vector<std::size_t> pick(n);
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    std::stable_sort(pick.begin(), pick.end(), [&](auto a, auto b) { return freq[a] > freq[b]; });
    for (std::size_t r = 0; r < spec_.rare_words; ++r) {
      const std::string alias = "r" + std::to_string(r);
      alias_of_[source_[pick[r]]] = alias;
      partner_[alias] = source_[pick[r]];
      lexicon_[alias] = lexicon_[source_[pick[r]]];
    }
  }

  const SynthTaskSpec& spec() const { return spec_; }
  const std::map<std::string, std::string>& lexicon() const { return lexicon_; }
  const std::map<std::string, std::string>& aliases() const { return alias_of_; }
  bool is_alias(const std::string& w) const { return partner_.count(w) != 0; }

  /// Lexicon-mapped, rule-reordered target sentence.
  Words translate(const Words& source) const { return translate(source, lexicon_, spec_.reorder); }

  static Words translate(const Words& source, const std::map<std::string, std::string>& lexicon, Reorder reorder) {
    Words out;
    out.reserve(source.size());
    for (const auto& w : source) {
      auto it = lexicon.find(w);
      if (it == lexicon.end()) throw std::invalid_argument("translate: word '" + w + "' has no lexicon entry");
      out.push_back(it->second);
    }
    return apply_reorder(std::move(out), reorder);
  }

  /// Draws one alias-free source sentence.
  Words sample_source(Rng& rng) const {
    const std::size_t len = spec_.min_len + static_cast<std::size_t>(rng.below(spec_.max_len - spec_.min_len + 1));
    Words out;
    std::size_t cur = rng.categorical(start_);
    out.push_back(source_[cur]);
    std::vector<double> w;
    while (out.size() < len) {
      w.clear();
      for (const auto& [next, weight] : successors_[cur]) w.push_back(weight);
      cur = successors_[cur][rng.categorical(w)].first;
      out.push_back(source_[cur]);
    }
    return out;
  }

  Words apply_aliases(Words s, double rate, Rng& rng) const {
    for (auto& w : s)
      if (auto it = alias_of_.find(w); it != alias_of_.end() && rng.bernoulli(rate)) w = it->second;
    return s;
  }

  SynthCorpora generate() const {
    Rng rng(spec_.seed ^ 0x9e3779b97f4a7c15ULL);
    SynthCorpora c;
    const auto n_train = static_cast<std::size_t>(std::llround(spec_.parallel_pairs * spec_.train_ratio));
    const auto n_valid = static_cast<std::size_t>(std::llround(spec_.parallel_pairs * spec_.valid_ratio));
    const std::size_t n_test = spec_.parallel_pairs - n_train - n_valid;
    if (n_train == 0 || n_valid == 0 || n_test == 0) throw std::invalid_argument("synthetic task: a split is empty");

    auto make_pair = [&](double alias_rate) {
      Words s = apply_aliases(sample_source(rng), alias_rate, rng);
      return TextPair{s, translate(s)};
    };
    for (std::size_t i = 0; i < n_train; ++i) c.train.push_back(make_pair(0.0));
    // A trace of each alias in the parallel data.
    std::size_t cursor = 0;
    for (const auto& [word, alias] : alias_of_) {
      for (std::size_t k = 0; k < spec_.rare_trace; ++k) {
        bool placed = false;
        for (std::size_t tries = 0; tries < c.train.size() && !placed; ++tries) {
          auto& p = c.train[cursor];
          cursor = (cursor + 1) % c.train.size();
          bool clean = std::none_of(p.source.begin(), p.source.end(), [&](const auto& w) { return is_alias(w); });
          auto hit = std::find(p.source.begin(), p.source.end(), word);
          if (clean && hit != p.source.end()) {
            *hit = alias;
            p.target = translate(p.source);
            placed = true;
          }
        }
      }
    }
    for (std::size_t i = 0; i < n_valid; ++i) c.valid.push_back(make_pair(spec_.alias_rate_eval));
    for (std::size_t i = 0; i < n_test; ++i) c.test.push_back(make_pair(spec_.alias_rate_eval));

    for (std::size_t i = 0; i < spec_.monolingual; ++i) {
      if (i % 2 == 0)
        c.monolingual.push_back(apply_aliases(sample_source(rng), spec_.alias_rate_mono, rng));
      else
        c.monolingual.push_back(translate(sample_source(rng)));
    }
    rng.shuffle(c.monolingual);
    return c;
  }

 private:
  SynthTaskSpec spec_;
  Words source_;
  std::map<std::string, std::string> lexicon_;
  std::map<std::string, std::string> alias_of_;  // frequent word -> alias
  std::map<std::string, std::string> partner_;   // alias -> frequent word
  std::vector<double> start_;
  std::vector<std::vector<std::pair<std::size_t, double>>> successors_;
};

/// Joint vocabulary over monolingual text and both sides of the training pairs.
inline Vocab build_joint_vocab(const SynthCorpora& c, std::size_t max_size) {
  std::vector<Words> all = c.monolingual;
  for (const auto& p : c.train) {
    all.push_back(p.source);
    all.push_back(p.target);
  }
  return build_vocab(all, max_size);
}

inline ParallelCorpus encode_pairs(const std::vector<TextPair>& pairs, const Vocab& vocab) {
  ParallelCorpus out;
  for (const auto& p : pairs) {
    if (p.source.empty() || p.target.empty()) throw std::invalid_argument("parallel corpus: empty sentence");
    out.pairs.push_back({vocab.encode(p.source), vocab.encode(p.target), Direction::fwd});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files: one sentence per line, space-separated tokens.

inline void write_lines(const std::filesystem::path& path, const std::vector<Words>& sentences) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : sentences) os << join_words(s) << '\n';
}

inline std::vector<Words> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<Words> out;
  std::string line;
  while (std::getline(is, line)) out.push_back(split_words(line));
  return out;
}

inline void write_parallel(const std::filesystem::path& dir, const std::string& split,
                           const std::vector<TextPair>& pairs) {
  std::vector<Words> src, tgt;
  for (const auto& p : pairs) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  write_lines(dir / (split + ".src"), src);
  write_lines(dir / (split + ".tgt"), tgt);
}

inline std::vector<TextPair> read_parallel(const std::filesystem::path& dir, const std::string& split) {
  auto src = read_lines(dir / (split + ".src"));
  auto tgt = read_lines(dir / (split + ".tgt"));
  if (src.size() != tgt.size())
    throw std::runtime_error(split + ": source and target files differ in line count");
  std::vector<TextPair> out;
  for (std::size_t i = 0; i < src.size(); ++i) out.push_back({src[i], tgt[i]});
  return out;
}

inline void write_corpora(const std::filesystem::path& dir, const SynthCorpora& c, const Vocab& vocab) {
  std::filesystem::create_directories(dir);
  write_parallel(dir, "train", c.train);
  write_parallel(dir, "valid", c.valid);
  write_parallel(dir, "test", c.test);
  write_lines(dir / "mono.txt", c.monolingual);
  vocab.save(dir / "vocab.txt");
}

inline SynthCorpora read_corpora(const std::filesystem::path& dir) {
  SynthCorpora c;
  c.train = read_parallel(dir, "train");
  c.valid = read_parallel(dir, "valid");
  c.test = read_parallel(dir, "test");
  c.monolingual = read_lines(dir / "mono.txt");
  return c;
}

}  // namespace pinmt
