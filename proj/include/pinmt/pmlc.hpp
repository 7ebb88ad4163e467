#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "pinmt/transformer.hpp"

namespace pinmt {

enum class ConverterKind { vanilla, residual, concat_linear, hierarchical, linear_combination, scalar_mix, stochastic_select };

inline ConverterKind converter_from_name(const std::string& s) {
  if (s == "vanilla") return ConverterKind::vanilla;
  if (s == "residual") return ConverterKind::residual;
  if (s == "concat_linear") return ConverterKind::concat_linear;
  if (s == "hierarchical") return ConverterKind::hierarchical;
  if (s == "linear_combination") return ConverterKind::linear_combination;
  if (s == "scalar_mix") return ConverterKind::scalar_mix;
  if (s == "stochastic_select") return ConverterKind::stochastic_select;
  throw std::invalid_argument("unknown converter '" + s + "'");
}

inline std::string converter_name(ConverterKind k) {
  switch (k) {
    case ConverterKind::vanilla: return "vanilla";
    case ConverterKind::residual: return "residual";
    case ConverterKind::concat_linear: return "concat_linear";
    case ConverterKind::hierarchical: return "hierarchical";
    case ConverterKind::linear_combination: return "linear_combination";
    case ConverterKind::scalar_mix: return "scalar_mix";
    case ConverterKind::stochastic_select: return "stochastic_select";
  }
  return "vanilla";
}

/// Converters that already map to d_model and need no separate compressor.
inline bool converter_compresses(ConverterKind k) {
  return k == ConverterKind::concat_linear || k == ConverterKind::linear_combination;
}

/// Aggregation node: LN(FFN([x;y;...]) + x + y + ...).
template <class T>
struct AggNode {
  FfnParams<T> ffn;  // (inputs * d) -> d -> d
  LayerNormParams<T> ln;
  std::size_t inputs = 2;
};

template <class T>
struct Converter {
  ConverterKind kind = ConverterKind::vanilla;
  std::size_t layers = 0, d_in = 0, d_out = 0;
  double keep_prob = 0.5;  // stochastic_select

  LinearParams<T> concat;                 // concat_linear: [M*d_in, d_out] + bias
  std::vector<Tensor<T>> per_layer;       // linear_combination: M x [d_in, d_out]
  std::vector<Tensor<T>> scalars;         // scalar_mix: M x [1]
  std::vector<AggNode<T>> nodes;          // hierarchical

  /// Reduces H^1..H^M ([B,L,d_in] each) to one [B,L,d_out] tensor.
  Tensor<T> operator()(const std::vector<Tensor<T>>& hs, const RunMode& mode = {}) const {
    if (hs.empty()) throw std::invalid_argument("converter: empty layer list");
    if (hs.size() != layers)
      throw std::invalid_argument("converter: expected " + std::to_string(layers) + " layers, got " +
                                  std::to_string(hs.size()));
    for (const auto& h : hs)
      if (h.shape() != hs[0].shape()) throw ShapeError("converter: layer shapes differ");
    switch (kind) {
      case ConverterKind::vanilla:
        return hs.back();
      case ConverterKind::residual:
        return sum_all(hs);
      case ConverterKind::concat_linear:
        return concat(concat_last_axis(hs));
      case ConverterKind::linear_combination: {
        std::vector<Tensor<T>> parts;
        for (std::size_t i = 0; i < hs.size(); ++i) parts.push_back(matmul(hs[i], per_layer[i]));
        return sum_all(parts);
      }
      case ConverterKind::scalar_mix: {
        std::vector<Tensor<T>> parts;
        for (std::size_t i = 0; i < hs.size(); ++i) parts.push_back(scale_by(hs[i], scalars[i]));
        return sum_all(parts);
      }
      case ConverterKind::hierarchical:
        return hierarchical(hs, mode);
      case ConverterKind::stochastic_select:
        return stochastic(hs, mode);
    }
    throw std::logic_error("converter: unhandled kind");
  }

  static Tensor<T> sum_all(const std::vector<Tensor<T>>& xs) {
    Tensor<T> acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
  }

  static Tensor<T> agg(const AggNode<T>& node, const std::vector<Tensor<T>>& in, const RunMode& mode) {
    return node.ln(add(node.ffn(concat_last_axis(in), mode), sum_all(in)));
  }

  /// Node 1 joins H^1, H^2; node i joins H^{2i-1}, H^{2i} and node i-1.
  /// With odd M the last layer becomes an extra input of the final node.
  Tensor<T> hierarchical(const std::vector<Tensor<T>>& hs, const RunMode& mode) const {
    Tensor<T> prev;
    const std::size_t pairs = hs.size() / 2;
    for (std::size_t i = 0; i < pairs; ++i) {
      std::vector<Tensor<T>> in{hs[2 * i], hs[2 * i + 1]};
      if (i > 0) in.push_back(prev);
      if (i + 1 == pairs && hs.size() % 2 == 1) in.push_back(hs.back());
      prev = agg(nodes[i], in, mode);
    }
    return prev;
  }

  /// Training keeps each layer with probability keep_prob (at least one) and
  /// averages the kept ones; evaluation averages every layer.
  Tensor<T> stochastic(const std::vector<Tensor<T>>& hs, const RunMode& mode) const {
    std::vector<Tensor<T>> kept;
    if (mode.train && mode.rng) {
      while (kept.empty())
        for (const auto& h : hs)
          if (mode.rng->bernoulli(keep_prob)) kept.push_back(h);
    } else {
      kept = hs;
    }
    return scale(sum_all(kept), static_cast<T>(1.0 / static_cast<double>(kept.size())));
  }
};

template <class T>
Converter<T> make_converter(ParamStore<T>& store, ConverterKind kind, std::size_t layers, std::size_t d_in,
                            std::size_t d_model, Rng& rng, double keep_prob = 0.5) {
  if (layers == 0) throw std::invalid_argument("converter: no PLM layers");
  if (kind == ConverterKind::hierarchical && layers < 2)
    throw std::invalid_argument("hierarchical converter needs at least two layers");
  Converter<T> c;
  c.kind = kind;
  c.layers = layers;
  c.d_in = d_in;
  c.d_out = converter_compresses(kind) ? d_model : d_in;
  c.keep_prob = keep_prob;
  const auto g = ParamGroup::nmt;
  switch (kind) {
    case ConverterKind::concat_linear:
      c.concat = make_linear(store, "pmlc.concat", layers * d_in, d_model, g, rng);
      break;
    case ConverterKind::linear_combination:
      for (std::size_t i = 0; i < layers; ++i)
        c.per_layer.push_back(store.xavier("pmlc.lincomb." + std::to_string(i), d_in, d_model, g, rng));
      break;
    case ConverterKind::scalar_mix:
      for (std::size_t i = 0; i < layers; ++i)
        c.scalars.push_back(
            store.constant("pmlc.scalar." + std::to_string(i), {1}, static_cast<T>(1.0 / static_cast<double>(layers)), g));
      break;
    case ConverterKind::hierarchical:
      for (std::size_t i = 0; i < layers / 2; ++i) {
        AggNode<T> node;
        node.inputs = 2 + (i > 0) + (i + 1 == layers / 2 && layers % 2 == 1);
        const std::string name = "pmlc.agg." + std::to_string(i);
        node.ffn = {make_linear(store, name + ".ffn.in", node.inputs * d_in, d_in, g, rng),
                    make_linear(store, name + ".ffn.out", d_in, d_in, g, rng)};
        node.ln = make_layer_norm(store, name + ".ln", d_in, g);
        c.nodes.push_back(node);
      }
      break;
    default:
      break;
  }
  return c;
}

/// Affine map from the converter width to d_model.
template <class T>
struct Compressor {
  LinearParams<T> map;

  Tensor<T> operator()(const Tensor<T>& h) const {
    if (h.last_dim() != map.in_dim())
      throw ShapeError("compressor expects width " + std::to_string(map.in_dim()) + ", got " + shape_str(h.shape()));
    return map(h);
  }
};

template <class T>
Compressor<T> make_compressor(ParamStore<T>& store, std::size_t d_in, std::size_t d_model, Rng& rng) {
  return {make_linear(store, "pmlc.compress", d_in, d_model, ParamGroup::nmt, rng)};
}

}  // namespace pinmt
