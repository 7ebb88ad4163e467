#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <vector>

#include "pinmt/tokens.hpp"

namespace pinmt {

/// Log-probabilities of the next token for each prefix (BOS first).
using StepFn = std::function<std::vector<std::vector<double>>(const std::vector<Sentence>&)>;

struct DecodeOptions {
  int bos = kBos;
  int eos = kEos;
  int first_candidate = kNumReserved;  // ids below this, other than eos, are never emitted
};

struct Hypothesis {
  Sentence tokens;  // BOS ... [EOS]
  double logprob = 0;
  double score = 0;

  bool finished(int eos = kEos) const { return tokens.size() > 1 && tokens.back() == eos; }
  /// Generated tokens, BOS dropped and EOS kept.
  std::size_t length() const { return tokens.empty() ? 0 : tokens.size() - 1; }
};

inline double length_penalty(std::size_t len, double penalty) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, penalty);
}

namespace detail {

// Tie-break rank: ordinary ids ascend, EOS comes last.
inline long token_rank(int tok, const DecodeOptions& o) {
  return tok == o.eos ? (1L << 40) : static_cast<long>(tok);
}

inline bool rank_less(const Sentence& a, const Sentence& b, const DecodeOptions& o) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(),
                                      [&](int x, int y) { return token_rank(x, o) < token_rank(y, o); });
}

inline std::vector<int> candidates(std::size_t vocab, const DecodeOptions& o) {
  std::vector<int> c;
  for (int t = o.first_candidate; t < static_cast<int>(vocab); ++t)
    if (t != o.eos) c.push_back(t);
  if (o.eos >= 0 && o.eos < static_cast<int>(vocab)) c.push_back(o.eos);
  return c;
}

}  // namespace detail

/// Argmax decoding. Ties go to the lowest ordinary id, EOS losing every tie.
/// Returns the generated ids without BOS, including EOS when reached.
inline Sentence greedy_decode(const StepFn& step, std::size_t max_len, const DecodeOptions& opt = {}) {
  if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
  Sentence prefix{opt.bos};
  for (std::size_t t = 0; t < max_len; ++t) {
    const auto lp = step({prefix}).at(0);
    int best = -1;
    for (int c : detail::candidates(lp.size(), opt))
      if (best < 0 || lp[c] > lp[best]) best = c;
    prefix.push_back(best);
    if (best == opt.eos) break;
  }
  return Sentence(prefix.begin() + 1, prefix.end());
}

namespace detail {

inline bool score_better(const Hypothesis& a, const Hypothesis& b, const DecodeOptions& opt) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return rank_less(a.tokens, b.tokens, opt);
}

inline Hypothesis beam_pass(const StepFn& step, std::size_t width, double penalty, std::size_t max_len,
                            const DecodeOptions& opt) {
  auto better = [&](const Hypothesis& a, const Hypothesis& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return rank_less(a.tokens, b.tokens, opt);
  };
  std::vector<Hypothesis> live{{{opt.bos}, 0.0, 0.0}}, pool;
  for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<Sentence> prefixes;
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto lps = step(prefixes);
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < live.size(); ++i)
      for (int c : candidates(lps[i].size(), opt)) {
        Hypothesis h = live[i];
        h.tokens.push_back(c);
        h.logprob += lps[i][c];
        next.push_back(std::move(h));
      }
    const std::size_t keep = std::min(width, next.size());
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), better);
    next.resize(keep);
    live.clear();
    for (auto& h : next) {
      if (h.tokens.back() == opt.eos || t + 1 == max_len)
        pool.push_back(std::move(h));
      else
        live.push_back(std::move(h));
    }
  }
  for (auto& h : pool) h.score = h.logprob / length_penalty(h.length(), penalty);
  return *std::min_element(pool.begin(), pool.end(),
                           [&](const Hypothesis& a, const Hypothesis& b) { return score_better(a, b, opt); });
}

}  // namespace detail

/// Beam search with lp(len) = ((5+len)/6)^penalty. Hypotheses that hit EOS
/// or max_len enter the pool; the best normalized score wins, ties going to
/// the shorter one and then to the smaller id sequence. One pass runs per
/// width 1..w and the best result over all passes is returned.
inline Hypothesis beam_search(const StepFn& step, std::size_t width, double penalty, std::size_t max_len,
                              const DecodeOptions& opt = {}) {
  if (width < 1) throw std::invalid_argument("beam width must be at least 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
  Hypothesis best = detail::beam_pass(step, 1, penalty, max_len, opt);
  for (std::size_t w = 2; w <= width; ++w) {
    auto h = detail::beam_pass(step, w, penalty, max_len, opt);
    if (detail::score_better(h, best, opt)) best = std::move(h);
  }
  return best;
}

/// Corpus BLEU with clipped n-gram precisions and brevity penalty, no
/// smoothing. Returns a value in [0, 100].
template <class Tok>
double bleu(const std::vector<std::vector<Tok>>& hyps, const std::vector<std::vector<Tok>>& refs, int max_n = 4) {
  if (hyps.empty()) throw std::invalid_argument("bleu: no hypotheses");
  if (hyps.size() != refs.size())
    throw std::invalid_argument("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                                std::to_string(refs.size()) + " references");
  std::vector<double> match(max_n, 0), total(max_n, 0);
  double hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& r = refs[s];
    if (r.empty()) throw std::invalid_argument("bleu: empty reference at line " + std::to_string(s));
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (int n = 1; n <= max_n; ++n) {
      std::map<std::vector<Tok>, int> hc, rc;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hc[std::vector<Tok>(h.begin() + i, h.begin() + i + n)];
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++rc[std::vector<Tok>(r.begin() + i, r.begin() + i + n)];
      for (const auto& [g, c] : hc) {
        auto it = rc.find(g);
        if (it != rc.end()) match[n - 1] += std::min(c, it->second);
        total[n - 1] += c;
      }
    }
  }
  double log_sum = 0;
  for (int n = 0; n < max_n; ++n) {
    if (match[n] == 0) return 0.0;
    log_sum += std::log(match[n] / total[n]);
  }
  const double bp = std::exp(std::min(0.0, 1.0 - ref_len / hyp_len));
  return 100.0 * bp * std::exp(log_sum / max_n);
}

/// Drops everything from the first EOS on, plus BOS and padding.
inline Sentence strip_special(const Sentence& s) {
  Sentence out;
  for (int t : s) {
    if (t == kEos) break;
    if (t != kBos && t != kPad) out.push_back(t);
  }
  return out;
}

}  // namespace pinmt
