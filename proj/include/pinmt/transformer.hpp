#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pinmt/ops.hpp"
#include "pinmt/params.hpp"
#include "pinmt/tokens.hpp"

namespace pinmt {

/// Training-time stochasticity. Default-constructed = deterministic eval.
struct RunMode {
  bool train = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  double rate() const { return train && rng ? dropout : 0.0; }
};

template <class T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const RunMode& mode) {
  return mode.rate() > 0.0 ? dropout(x, mode.rate(), *mode.rng) : x;
}

template <class T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]; rows are multiplied from the left
  Tensor<T> bias;    // [out], may be undefined

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
};

template <class T>
LinearParams<T> make_linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                            ParamGroup group, Rng& rng, bool with_bias = true) {
  LinearParams<T> p;
  p.weight = store.xavier(name + ".weight", in, out, group, rng);
  if (with_bias) p.bias = store.constant(name + ".bias", {out}, T(0), group);
  return p;
}

template <class T>
struct LayerNormParams {
  Tensor<T> gain, bias;
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, T(1e-5)); }
};

template <class T>
LayerNormParams<T> make_layer_norm(ParamStore<T>& store, const std::string& name, std::size_t d, ParamGroup group) {
  return {store.constant(name + ".gain", {d}, T(1), group), store.constant(name + ".bias", {d}, T(0), group)};
}

template <class T>
struct AttentionParams {
  LinearParams<T> q, k, v, o;
  std::size_t heads = 1;
};

template <class T>
AttentionParams<T> make_attention(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t heads,
                                  ParamGroup group, Rng& rng) {
  if (heads == 0 || d % heads != 0)
    throw std::invalid_argument("d_model " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                                " heads");
  return {make_linear(store, name + ".q", d, d, group, rng), make_linear(store, name + ".k", d, d, group, rng),
          make_linear(store, name + ".v", d, d, group, rng), make_linear(store, name + ".o", d, d, group, rng), heads};
}

template <class T>
struct FfnParams {
  LinearParams<T> in, out;
  Tensor<T> operator()(const Tensor<T>& x, const RunMode& mode) const {
    return maybe_dropout(out(relu(in(x))), mode);
  }
};

template <class T>
FfnParams<T> make_ffn(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t inner,
                      ParamGroup group, Rng& rng) {
  return {make_linear(store, name + ".in", d, inner, group, rng), make_linear(store, name + ".out", inner, d, group, rng)};
}

template <class T>
struct EncoderLayerParams {
  AttentionParams<T> self;
  LayerNormParams<T> ln_self;
  FfnParams<T> ffn;
  LayerNormParams<T> ln_ffn;
};

template <class T>
struct DecoderLayerParams {
  AttentionParams<T> self;
  LayerNormParams<T> ln_self;
  AttentionParams<T> cross;
  LayerNormParams<T> ln_cross;
  FfnParams<T> ffn;
  LayerNormParams<T> ln_ffn;
};

template <class T>
EncoderLayerParams<T> make_encoder_layer(ParamStore<T>& store, const std::string& name, std::size_t d,
                                         std::size_t heads, std::size_t inner, ParamGroup group, Rng& rng) {
  EncoderLayerParams<T> p;
  p.self = make_attention(store, name + ".self_attn", d, heads, group, rng);
  p.ln_self = make_layer_norm(store, name + ".ln_self", d, group);
  p.ffn = make_ffn(store, name + ".ffn", d, inner, group, rng);
  p.ln_ffn = make_layer_norm(store, name + ".ln_ffn", d, group);
  return p;
}

template <class T>
DecoderLayerParams<T> make_decoder_layer(ParamStore<T>& store, const std::string& name, std::size_t d,
                                         std::size_t heads, std::size_t inner, ParamGroup group, Rng& rng) {
  DecoderLayerParams<T> p;
  p.self = make_attention(store, name + ".self_attn", d, heads, group, rng);
  p.ln_self = make_layer_norm(store, name + ".ln_self", d, group);
  p.cross = make_attention(store, name + ".cross_attn", d, heads, group, rng);
  p.ln_cross = make_layer_norm(store, name + ".ln_cross", d, group);
  p.ffn = make_ffn(store, name + ".ffn", d, inner, group, rng);
  p.ln_ffn = make_layer_norm(store, name + ".ln_ffn", d, group);
  return p;
}

/// Sinusoidal positions: even features sin(p / 10000^(2k/d)), odd features cos.
template <class T>
Tensor<T> sinusoidal_table(std::size_t max_len, std::size_t d) {
  std::vector<T> v(max_len * d);
  for (std::size_t p = 0; p < max_len; ++p)
    for (std::size_t i = 0; i < d; ++i) {
      const double k2 = static_cast<double>(i - i % 2);
      const double angle = static_cast<double>(p) / std::pow(10000.0, k2 / static_cast<double>(d));
      v[p * d + i] = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return Tensor<T>::from({max_len, d}, std::move(v));
}

/// Token embedding table plus the fixed positional table.
template <class T>
struct InputEmbedding {
  Tensor<T> table;      // [V, d], learnable
  Tensor<T> positions;  // [max_len, d], constant

  std::size_t vocab() const { return table.dim(0); }
  std::size_t d_model() const { return table.dim(1); }
  std::size_t max_len() const { return positions.dim(0); }
};

template <class T>
InputEmbedding<T> make_input_embedding(ParamStore<T>& store, const std::string& name, std::size_t vocab,
                                       std::size_t d, std::size_t max_len, ParamGroup group, Rng& rng) {
  return {store.xavier(name, vocab, d, group, rng), sinusoidal_table<T>(max_len, d)};
}

/// Emb(x) + Pos(x) for a padded batch; result [B, L, d].
template <class T>
Tensor<T> encode_input(const TokenBatch& tokens, const InputEmbedding<T>& emb) {
  if (tokens.cols > emb.max_len())
    throw std::length_error("sequence length " + std::to_string(tokens.cols) + " exceeds max_len " +
                            std::to_string(emb.max_len()));
  const std::size_t d = emb.d_model();
  auto e = embedding_lookup(emb.table, tokens.ids, tokens.shape());
  std::vector<T> pos(emb.positions.values().begin(), emb.positions.values().begin() + tokens.cols * d);
  return add(e, Tensor<T>::from({tokens.cols, d}, std::move(pos)));
}

/// Scaled dot-product attention over `heads` groups.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& query, const Tensor<T>& memory, const AttentionParams<T>& p,
                               const AttentionMask& mask, const RunMode& mode) {
  const std::size_t B = query.dim(0), Lq = query.dim(1), d = query.dim(2), Lk = memory.dim(1);
  if (memory.dim(0) != B || memory.dim(2) != d)
    throw ShapeError("attention: query " + shape_str(query.shape()) + " vs memory " + shape_str(memory.shape()));
  const std::size_t H = p.heads, dh = d / H;
  auto split = [&](const Tensor<T>& x, std::size_t L) { return swap_axes_1_2(reshape(x, {B, L, H, dh})); };
  auto q = split(p.q(query), Lq);                      // [B,H,Lq,dh]
  auto k = transpose_last_two(split(p.k(memory), Lk));  // [B,H,dh,Lk]
  auto v = split(p.v(memory), Lk);                      // [B,H,Lk,dh]
  auto scores = scale(matmul(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto weights = maybe_dropout(softmax_last_axis(apply_attention_mask(scores, mask)), mode);
  auto ctx = reshape(swap_axes_1_2(matmul(weights, v)), {B, Lq, d});
  return p.o(ctx);
}

/// S = LN(H + MHA(H,H,H)); H' = LN(S + FFN(S)).
template <class T>
Tensor<T> encoder_layer(const Tensor<T>& h, const EncoderLayerParams<T>& p, const AttentionMask& mask,
                        const RunMode& mode) {
  auto s = p.ln_self(add(h, maybe_dropout(multi_head_attention(h, h, p.self, mask, mode), mode)));
  return p.ln_ffn(add(s, p.ffn(s, mode)));
}

/// Runs every layer from H^0 = input; returns H^1..H^N.
template <class T>
std::vector<Tensor<T>> encoder_forward(const Tensor<T>& input, const std::vector<EncoderLayerParams<T>>& layers,
                                       const AttentionMask& mask, const RunMode& mode = {}) {
  if (input.rank() != 3) throw ShapeError("encoder input must be [B,L,d], got " + shape_str(input.shape()));
  if (mask.batch != input.dim(0) || mask.queries != input.dim(1) || mask.keys != input.dim(1))
    throw ShapeError("encoder mask does not match input " + shape_str(input.shape()));
  std::vector<Tensor<T>> outs;
  outs.reserve(layers.size());
  Tensor<T> h = input;
  for (const auto& layer : layers) {
    h = encoder_layer(h, layer, mask, mode);
    outs.push_back(h);
  }
  return outs;
}

template <class T>
Tensor<T> decoder_layer(const Tensor<T>& h, const Tensor<T>& memory, const DecoderLayerParams<T>& p,
                        const AttentionMask& self_mask, const AttentionMask& cross_mask, const RunMode& mode) {
  auto s = p.ln_self(add(h, maybe_dropout(multi_head_attention(h, h, p.self, self_mask, mode), mode)));
  auto c = p.ln_cross(add(s, maybe_dropout(multi_head_attention(s, memory, p.cross, cross_mask, mode), mode)));
  return p.ln_ffn(add(c, p.ffn(c, mode)));
}

/// Cross-attention reads only the final encoder layer `memory`.
template <class T>
std::vector<Tensor<T>> decoder_forward(const Tensor<T>& input, const Tensor<T>& memory,
                                       const std::vector<DecoderLayerParams<T>>& layers,
                                       const AttentionMask& self_mask, const AttentionMask& cross_mask,
                                       const RunMode& mode = {}) {
  if (input.rank() != 3 || memory.rank() != 3) throw ShapeError("decoder inputs must be [B,L,d]");
  if (input.dim(2) != memory.dim(2))
    throw ShapeError("decoder d_model " + std::to_string(input.dim(2)) + " does not match encoder d_model " +
                     std::to_string(memory.dim(2)));
  std::vector<Tensor<T>> outs;
  outs.reserve(layers.size());
  Tensor<T> h = input;
  for (const auto& layer : layers) {
    h = decoder_layer(h, memory, layer, self_mask, cross_mask, mode);
    outs.push_back(h);
  }
  return outs;
}

template <class T>
Tensor<T> output_logits(const Tensor<T>& hidden, const Tensor<T>& projection) {
  if (projection.rank() != 2 || projection.dim(0) != hidden.last_dim())
    throw ShapeError("output projection " + shape_str(projection.shape()) + " does not accept " +
                     shape_str(hidden.shape()));
  return matmul(hidden, projection);
}

/// Softmax(Linear(H_D^N)).
template <class T>
Tensor<T> output_distribution(const Tensor<T>& hidden, const Tensor<T>& projection) {
  return softmax_last_axis(output_logits(hidden, projection));
}

/// Label-smoothed cross-entropy over probability rows:
/// mean over non-pad positions of -sum_v q(v) log p(v), q = (1-e)onehot + e/V.
/// Pass ignore_id = -1 to count every row.
template <class T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& probs, const std::vector<int>& targets, double smoothing,
                                 int ignore_id = kPad) {
  const std::size_t V = probs.last_dim(), rows = probs.size() / V;
  if (targets.size() != rows)
    throw ShapeError("cross_entropy_smoothed: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(probs.shape()));
  if (smoothing < 0.0 || smoothing >= 1.0) throw std::invalid_argument("label smoothing must lie in [0,1)");
  std::vector<T> q(probs.size(), T(0));
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V)
      throw std::out_of_range("cross_entropy_smoothed: target " + std::to_string(targets[r]) + " outside vocabulary");
    ++count;
    for (std::size_t j = 0; j < V; ++j) q[r * V + j] = static_cast<T>(smoothing / static_cast<double>(V));
    q[r * V + static_cast<std::size_t>(targets[r])] += static_cast<T>(1.0 - smoothing);
  }
  if (count == 0) throw std::invalid_argument("cross_entropy_smoothed: no non-pad positions");
  // Zero-weight entries are skipped so exact one-hot predictions stay finite.
  const std::size_t n = probs.size();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (q[i] != T(0)) loss -= q[i] * std::log(probs.data()[i]);
  const T inv = T(1) / static_cast<T>(count);
  return detail::make_result<T>({1}, {loss * inv}, {&probs}, "cross_entropy_smoothed", [n, inv, q](Node<T>& o) {
    T* gp = detail::grad_of(o, 0);
    const T* p = o.parents[0]->value.data();
    for (std::size_t i = 0; i < n; ++i)
      if (q[i] != T(0)) gp[i] -= o.grad[0] * inv * q[i] / p[i];
  });
}

struct TransformerDims {
  std::size_t vocab = 0;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t max_len = 64;
};

/// NMT backbone weights. `source` is present only for the plain Transformer;
/// the integrated model builds its encoder input from the PLM instead.
template <class T>
struct TransformerParams {
  TransformerDims dims;
  std::optional<InputEmbedding<T>> source;
  InputEmbedding<T> target;
  std::vector<EncoderLayerParams<T>> encoder;
  std::vector<DecoderLayerParams<T>> decoder;
  Tensor<T> projection;  // [d_model, vocab], no bias
};

template <class T>
TransformerParams<T> make_transformer(ParamStore<T>& store, const TransformerDims& dims, bool with_source_embedding,
                                      Rng& rng) {
  if (dims.d_model % dims.heads != 0)
    throw std::invalid_argument("d_model must be divisible by heads");
  TransformerParams<T> p;
  p.dims = dims;
  const auto g = ParamGroup::nmt;
  if (with_source_embedding)
    p.source = make_input_embedding(store, "nmt.src_embed", dims.vocab, dims.d_model, dims.max_len, g, rng);
  p.target = make_input_embedding(store, "nmt.tgt_embed", dims.vocab, dims.d_model, dims.max_len, g, rng);
  for (std::size_t i = 0; i < dims.enc_layers; ++i)
    p.encoder.push_back(
        make_encoder_layer(store, "nmt.enc." + std::to_string(i), dims.d_model, dims.heads, dims.ffn, g, rng));
  for (std::size_t i = 0; i < dims.dec_layers; ++i)
    p.decoder.push_back(
        make_decoder_layer(store, "nmt.dec." + std::to_string(i), dims.d_model, dims.heads, dims.ffn, g, rng));
  p.projection = store.xavier("nmt.out_proj", dims.d_model, dims.vocab, g, rng);
  return p;
}

}  // namespace pinmt
