#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "pinmt/ops.hpp"

namespace pinmt {

// Reserved vocabulary ids shared by every model in the pipeline.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kMask = 4;
inline constexpr int kNumReserved = 5;

using Sentence = std::vector<int>;

/// Right-padded [rows, cols] id matrix.
struct TokenBatch {
  std::size_t rows = 0, cols = 0;
  std::vector<int> ids;

  static TokenBatch pad(const std::vector<Sentence>& seqs, std::size_t min_cols = 1) {
    TokenBatch b;
    b.rows = seqs.size();
    b.cols = min_cols;
    for (const auto& s : seqs) b.cols = std::max(b.cols, s.size());
    b.ids.assign(b.rows * b.cols, kPad);
    for (std::size_t r = 0; r < b.rows; ++r) std::copy(seqs[r].begin(), seqs[r].end(), b.ids.begin() + r * b.cols);
    return b;
  }

  int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  Shape shape() const { return {rows, cols}; }

  std::vector<std::uint8_t> keep() const {
    std::vector<std::uint8_t> k(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) k[i] = ids[i] != kPad;
    return k;
  }

  std::size_t non_pad() const {
    return static_cast<std::size_t>(std::count_if(ids.begin(), ids.end(), [](int i) { return i != kPad; }));
  }
};

/// Queries may see every non-pad key.
inline AttentionMask padding_mask(const TokenBatch& queries, const TokenBatch& keys) {
  if (queries.rows != keys.rows) throw ShapeError("padding_mask: batch sizes differ");
  AttentionMask m{queries.rows, queries.cols, keys.cols, {}};
  m.allowed.resize(m.batch * m.queries * m.keys);
  for (std::size_t b = 0; b < m.batch; ++b)
    for (std::size_t q = 0; q < m.queries; ++q)
      for (std::size_t k = 0; k < m.keys; ++k) m.allowed[(b * m.queries + q) * m.keys + k] = keys.at(b, k) != kPad;
  return m;
}

/// Lower-triangular self-attention mask that also hides pad keys.
inline AttentionMask causal_mask(const TokenBatch& seq) {
  AttentionMask m = padding_mask(seq, seq);
  for (std::size_t b = 0; b < m.batch; ++b)
    for (std::size_t q = 0; q < m.queries; ++q)
      for (std::size_t k = q + 1; k < m.keys; ++k) m.allowed[(b * m.queries + q) * m.keys + k] = 0;
  return m;
}

}  // namespace pinmt
