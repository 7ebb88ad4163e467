#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>

#include "pinmt/transformer.hpp"

namespace pinmt {

enum class FusionKind { none, addition, multiplication, weighted_sum, projection, concatenation, dynamic_switch };

inline FusionKind fusion_from_name(const std::string& s) {
  if (s == "none") return FusionKind::none;
  if (s == "addition") return FusionKind::addition;
  if (s == "multiplication") return FusionKind::multiplication;
  if (s == "weighted_sum") return FusionKind::weighted_sum;
  if (s == "projection") return FusionKind::projection;
  if (s == "concatenation") return FusionKind::concatenation;
  if (s == "dynamic_switch") return FusionKind::dynamic_switch;
  throw std::invalid_argument("unknown fusion '" + s + "'");
}

inline std::string fusion_name(FusionKind k) {
  switch (k) {
    case FusionKind::none: return "none";
    case FusionKind::addition: return "addition";
    case FusionKind::multiplication: return "multiplication";
    case FusionKind::weighted_sum: return "weighted_sum";
    case FusionKind::projection: return "projection";
    case FusionKind::concatenation: return "concatenation";
    case FusionKind::dynamic_switch: return "dynamic_switch";
  }
  return "none";
}

/// Combines the compressed PLM output with the extra source embeddings
/// E_x = Emb(x) + Pos(x). The result is the encoder input as is.
template <class T>
struct Fusion {
  FusionKind kind = FusionKind::none;
  std::size_t d_model = 0;
  InputEmbedding<T> extra;   // absent for none
  Tensor<T> gamma;           // weighted_sum, [1]
  LinearParams<T> w1, w2;    // projection
  LinearParams<T> combine;   // concatenation, [2d, d]
  LinearParams<T> gate_h;    // dynamic_switch W, no bias
  LinearParams<T> gate_e;    // dynamic_switch U, no bias
  Tensor<T> gate_bias;       // dynamic_switch b, [d]

  Tensor<T> extra_embeddings(const TokenBatch& tokens) const {
    if (!extra.table.defined()) throw std::logic_error("fusion '" + fusion_name(kind) + "' has no extra embeddings");
    return encode_input(tokens, extra);
  }

  Tensor<T> operator()(const Tensor<T>& h, const TokenBatch& tokens) const {
    if (h.last_dim() != d_model)
      throw ShapeError("fusion expects width " + std::to_string(d_model) + ", got " + shape_str(h.shape()));
    if (kind == FusionKind::none) return h;
    auto e = extra_embeddings(tokens);
    if (e.shape() != h.shape())
      throw ShapeError("fusion: PLM output " + shape_str(h.shape()) + " vs embeddings " + shape_str(e.shape()));
    auto need = [&](const Tensor<T>& t) {
      if (!t.defined()) throw std::logic_error("fusion '" + fusion_name(kind) + "' is missing a parameter");
    };
    switch (kind) {
      case FusionKind::addition:
        return add(h, e);
      case FusionKind::multiplication:
        return mul(h, e);
      case FusionKind::weighted_sum: {
        need(gamma);
        auto one_minus = add_scalar(scale(gamma, T(-1)), T(1));
        return add(scale_by(h, gamma), scale_by(e, one_minus));
      }
      case FusionKind::projection:
        need(w1.weight);
        need(w2.weight);
        return add(w1(h), w2(e));
      case FusionKind::concatenation:
        need(combine.weight);
        return combine(concat_last_axis<T>({h, e}));
      case FusionKind::dynamic_switch: {
        need(gate_h.weight);
        need(gate_bias);
        auto g = gate(h, e);
        auto one_minus = add_scalar(scale(g, T(-1)), T(1));
        return add(mul(g, h), mul(one_minus, e));
      }
      case FusionKind::none:
        break;
    }
    return h;
  }

  /// sigma(HW + EU + b), elementwise in (0,1).
  Tensor<T> gate(const Tensor<T>& h, const Tensor<T>& e) const {
    return sigmoid(add(add(gate_h(h), gate_e(e)), gate_bias));
  }

  /// Display value of the weighted-sum coefficient, clamped to [0,1].
  double gamma_display() const {
    return gamma.defined() ? std::clamp(static_cast<double>(gamma.item()), 0.0, 1.0) : 0.0;
  }
};

template <class T>
Fusion<T> make_fusion(ParamStore<T>& store, FusionKind kind, std::size_t vocab, std::size_t d_model,
                      std::size_t max_len, Rng& rng) {
  Fusion<T> f;
  f.kind = kind;
  f.d_model = d_model;
  if (kind == FusionKind::none) return f;
  const auto g = ParamGroup::nmt;
  f.extra = make_input_embedding(store, "fusion.extra_embed", vocab, d_model, max_len, g, rng);
  switch (kind) {
    case FusionKind::weighted_sum:
      f.gamma = store.constant("fusion.gamma", {1}, T(0.5), g);
      break;
    case FusionKind::projection:
      f.w1 = make_linear(store, "fusion.proj_plm", d_model, d_model, g, rng);
      f.w2 = make_linear(store, "fusion.proj_emb", d_model, d_model, g, rng);
      break;
    case FusionKind::concatenation:
      f.combine = make_linear(store, "fusion.combine", 2 * d_model, d_model, g, rng);
      break;
    case FusionKind::dynamic_switch:
      f.gate_h = make_linear(store, "fusion.gate_plm", d_model, d_model, g, rng, false);
      f.gate_e = make_linear(store, "fusion.gate_emb", d_model, d_model, g, rng, false);
      f.gate_bias = store.constant("fusion.gate_bias", {d_model}, T(0), g);
      break;
    default:
      break;
  }
  return f;
}

}  // namespace pinmt
