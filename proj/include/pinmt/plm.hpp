#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pinmt/data.hpp"
#include "pinmt/optim.hpp"
#include "pinmt/transformer.hpp"

namespace pinmt {

struct PlmDims {
  std::size_t vocab = 0;
  std::size_t d_plm = 96;
  std::size_t heads = 4;
  std::size_t ffn = 192;
  std::size_t layers = 4;
  std::size_t max_len = 64;
};

/// Masked-LM encoder whose every layer output is exposed.
template <class T>
struct PlmModel {
  PlmDims dims;
  InputEmbedding<T> embed;
  std::vector<EncoderLayerParams<T>> layers;
  LinearParams<T> head;  // d_plm -> vocab
  double final_mlm_loss = std::nan("");

  /// H^1..H^M, with the embedding output prepended when asked.
  std::vector<Tensor<T>> forward_all_layers(const TokenBatch& tokens, bool include_embedding = false,
                                            const RunMode& mode = {}) const {
    auto x = encode_input(tokens, embed);
    auto outs = encoder_forward(x, layers, padding_mask(tokens, tokens), mode);
    if (include_embedding) outs.insert(outs.begin(), x);
    return outs;
  }

  Tensor<T> final_hidden(const TokenBatch& tokens) const { return forward_all_layers(tokens).back(); }

  Tensor<T> mlm_logits(const TokenBatch& tokens, const RunMode& mode = {}) const {
    return head(forward_all_layers(tokens, false, mode).back());
  }

  /// Logits only at the given flat positions, [positions, vocab].
  Tensor<T> mlm_logits_at(const TokenBatch& tokens, const std::vector<std::size_t>& positions,
                          const RunMode& mode = {}) const {
    return head(select_rows(forward_all_layers(tokens, false, mode).back(), positions));
  }

  /// Mean cross-entropy over the masked positions.
  Tensor<T> mlm_loss(const struct MaskedBatch& batch, const RunMode& mode = {}) const;
};

template <class T>
PlmModel<T> make_plm(ParamStore<T>& store, const PlmDims& dims, Rng& rng) {
  if (dims.layers < 2) throw std::invalid_argument("the PLM needs at least two layers");
  if (dims.d_plm % dims.heads != 0) throw std::invalid_argument("d_plm must be divisible by plm heads");
  const auto g = ParamGroup::plm;
  PlmModel<T> m;
  m.dims = dims;
  m.embed = make_input_embedding(store, "plm.embed", dims.vocab, dims.d_plm, dims.max_len, g, rng);
  for (std::size_t i = 0; i < dims.layers; ++i)
    m.layers.push_back(make_encoder_layer(store, "plm.layer." + std::to_string(i), dims.d_plm, dims.heads, dims.ffn, g, rng));
  m.head = make_linear(store, "plm.mlm_head", dims.d_plm, dims.vocab, g, rng);
  return m;
}

struct MaskedBatch {
  TokenBatch inputs;
  std::vector<int> labels;              // original id at masked positions, kPad elsewhere
  std::vector<std::size_t> positions;   // flat indices into inputs.ids
};

/// Masks ceil(rate * n) of the n non-pad positions in each row: 80% become
/// MASK, 10% a random ordinary token, 10% stay as they are.
inline MaskedBatch mask_batch(const TokenBatch& tokens, double rate, std::uint64_t seed, std::size_t vocab) {
  if (rate < 0 || rate > 1) throw std::invalid_argument("mask rate must lie in [0,1]");
  MaskedBatch out{tokens, std::vector<int>(tokens.ids.size(), kPad), {}};
  Rng rng(seed);
  for (std::size_t r = 0; r < tokens.rows; ++r) {
    std::vector<std::size_t> cand;
    for (std::size_t c = 0; c < tokens.cols; ++c)
      if (tokens.at(r, c) != kPad) cand.push_back(r * tokens.cols + c);
    const auto k = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(cand.size()) - 1e-12));
    rng.shuffle(cand);
    cand.resize(std::min(k, cand.size()));
    std::sort(cand.begin(), cand.end());
    for (auto i : cand) {
      out.labels[i] = tokens.ids[i];
      const double u = rng.uniform();
      if (u < 0.8)
        out.inputs.ids[i] = kMask;
      else if (u < 0.9 && vocab > kNumReserved)
        out.inputs.ids[i] = kNumReserved + static_cast<int>(rng.below(vocab - kNumReserved));
      out.positions.push_back(i);
    }
  }
  return out;
}

template <class T>
Tensor<T> PlmModel<T>::mlm_loss(const MaskedBatch& batch, const RunMode& mode) const {
  std::vector<int> labels;
  labels.reserve(batch.positions.size());
  for (auto i : batch.positions) labels.push_back(batch.labels[i]);
  return smoothed_cross_entropy_logits(mlm_logits_at(batch.inputs, batch.positions, mode), labels, 0.0);
}

struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_sentences = 64;
  double mask_rate = 0.15;
  double dropout = 0.0;
  ScheduleSpec schedule{1e-3, 200};
  std::uint64_t seed = 1;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Trains the masked-LM objective on sentences (EOS appended). Returns the
/// per-step loss trace; the model records the mean of its last tenth.
template <class T>
std::vector<double> pretrain_mlm(PlmModel<T>& model, ParamStore<T>& store, const std::vector<Sentence>& corpus,
                                 const PretrainConfig& cfg,
                                 const std::function<void(std::size_t, double)>& on_step = {}) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_mlm: empty corpus");
  Adam<T> opt(store, cfg.schedule, 1.0);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::size_t cursor = 0;
  std::vector<double> trace;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<Sentence> rows;
    for (std::size_t b = 0; b < std::min(cfg.batch_sentences, corpus.size()); ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      Sentence s = corpus[order[cursor++]];
      if (s.size() + 1 > model.dims.max_len) s.resize(model.dims.max_len - 1);
      s.push_back(kEos);
      rows.push_back(std::move(s));
    }
    auto masked = mask_batch(TokenBatch::pad(rows), cfg.mask_rate, rng.next_u64(), model.dims.vocab);
    if (masked.positions.empty()) continue;
    store.zero_grad();
    RunMode mode{true, cfg.dropout, &rng};
    auto loss = model.mlm_loss(masked, mode);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) throw DivergenceError("MLM pretraining diverged at step " + std::to_string(step));
    backward(loss);
    opt.step(store);
    trace.push_back(value);
    if (on_step) on_step(step, value);
  }
  if (!trace.empty()) {
    const std::size_t tail = std::max<std::size_t>(1, trace.size() / 10);
    double s = 0;
    for (std::size_t i = trace.size() - tail; i < trace.size(); ++i) s += trace[i];
    model.final_mlm_loss = s / static_cast<double>(tail);
  }
  return trace;
}

}  // namespace pinmt
