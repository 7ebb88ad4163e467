#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pinmt/alignment.hpp"
#include "pinmt/data.hpp"
#include "pinmt/fusion.hpp"
#include "pinmt/plm.hpp"
#include "pinmt/pmlc.hpp"

namespace pinmt {

/// Architecture and integration choices for one translation model.
struct ModelSpec {
  TransformerDims nmt;
  PlmDims plm;
  bool use_plm = true;  // false builds the plain Transformer
  ConverterKind converter = ConverterKind::vanilla;
  FusionKind fusion = FusionKind::none;
  AlignmentSpec align;
  double keep_prob = 0.5;
  bool include_plm_embedding = false;
  double dropout = 0.1;
  double label_smoothing = 0.1;

  void validate() const {
    if (nmt.vocab <= kNumReserved) throw std::invalid_argument("vocabulary too small");
    if (use_plm && plm.vocab != nmt.vocab) throw std::invalid_argument("PLM and NMT vocabularies differ");
    if (!use_plm && (fusion != FusionKind::none || align.kind != AlignKind::none))
      throw std::invalid_argument("fusion and alignment need a PLM");
    if (align.use_final_plm_layer && plm.d_plm != nmt.d_model)
      throw std::invalid_argument("comparing against the raw PLM layer needs d_plm == d_model");
    if (dropout < 0 || dropout >= 1) throw std::invalid_argument("dropout must lie in [0,1)");
    if (label_smoothing < 0 || label_smoothing >= 1) throw std::invalid_argument("label smoothing must lie in [0,1)");
  }
};

template <class T>
struct Encoded {
  TokenBatch source;
  Tensor<T> memory;    // encoder output
  Tensor<T> plm_side;  // PLM representation compared by the alignment loss
  Tensor<T> fused;     // encoder input
};

template <class T>
struct LossParts {
  Tensor<T> total;
  double ce = 0, align = 0;
};

/// Encoder-decoder translation model, optionally fed by a PLM through a
/// converter, a compressor and a fusion step.
template <class T>
class PinmtModel {
 public:
  ModelSpec spec;
  ParamStore<T> store;
  std::optional<PlmModel<T>> plm;
  Converter<T> converter;
  std::optional<Compressor<T>> compressor;
  Fusion<T> fusion;
  TransformerParams<T> nmt;

  PinmtModel(const ModelSpec& s, std::uint64_t seed) : spec(s) {
    spec.validate();
    Rng rng(seed);
    if (spec.use_plm) {
      plm = make_plm(store, spec.plm, rng);
      const std::size_t m = spec.plm.layers + (spec.include_plm_embedding ? 1 : 0);
      converter = make_converter(store, spec.converter, m, spec.plm.d_plm, spec.nmt.d_model, rng, spec.keep_prob);
      if (converter.d_out != spec.nmt.d_model) compressor = make_compressor(store, converter.d_out, spec.nmt.d_model, rng);
      fusion = make_fusion(store, spec.fusion, spec.nmt.vocab, spec.nmt.d_model, spec.nmt.max_len, rng);
    }
    nmt = make_transformer(store, spec.nmt, !spec.use_plm, rng);
  }
  PinmtModel(const PinmtModel&) = delete;
  PinmtModel& operator=(const PinmtModel&) = delete;
  PinmtModel(PinmtModel&&) = default;
  PinmtModel& operator=(PinmtModel&&) = default;

  /// Copies every "plm.*" value from a pretrained store.
  void load_plm(const ParamStore<T>& pretrained) {
    if (!plm) throw std::logic_error("model has no PLM");
    for (auto& e : store.entries()) {
      if (e.group != ParamGroup::plm) continue;
      auto src = pretrained.get(e.name);
      if (src.shape() != e.tensor.shape())
        throw ShapeError("PLM parameter '" + e.name + "' has shape " + shape_str(src.shape()) + ", expected " +
                         shape_str(e.tensor.shape()));
      auto dst = e.tensor.mutable_values();
      std::copy(src.values().begin(), src.values().end(), dst.begin());
    }
    plm_cache_.clear();
  }

  bool plm_frozen() const {
    for (const auto& e : store.entries())
      if (e.group == ParamGroup::plm && e.tensor.requires_grad()) return false;
    return true;
  }

  /// Freezing also enables the per-sentence cache of PLM layer outputs.
  void set_plm_trainable(bool on) {
    store.set_trainable(ParamGroup::plm, on);
    plm_cache_.clear();
  }

  void clear_plm_cache() { plm_cache_.clear(); }
  std::size_t plm_cache_size() const { return plm_cache_.size(); }

  /// Layer outputs for a right-padded source batch. Pad rows are zero when
  /// served from the cache; they never reach a non-pad position downstream.
  std::vector<Tensor<T>> plm_layers(const TokenBatch& src) {
    if (!plm) throw std::logic_error("model has no PLM");
    if (!plm_frozen()) return plm->forward_all_layers(src, spec.include_plm_embedding);
    std::vector<Sentence> rows(src.rows);
    std::vector<std::size_t> missing;
    for (std::size_t r = 0; r < src.rows; ++r) {
      for (std::size_t c = 0; c < src.cols && src.at(r, c) != kPad; ++c) rows[r].push_back(src.at(r, c));
      if (!plm_cache_.count(rows[r])) missing.push_back(r);
    }
    if (!missing.empty()) {
      std::vector<Sentence> fresh;
      for (auto r : missing) fresh.push_back(rows[r]);
      const auto batch = TokenBatch::pad(fresh);
      NoGradGuard ng;
      auto outs = plm->forward_all_layers(batch, spec.include_plm_embedding);
      const std::size_t d = spec.plm.d_plm;
      for (std::size_t i = 0; i < fresh.size(); ++i) {
        std::vector<std::vector<T>> layers;
        for (const auto& h : outs) {
          const T* base = h.data() + i * batch.cols * d;
          layers.emplace_back(base, base + fresh[i].size() * d);
        }
        plm_cache_.emplace(fresh[i], std::move(layers));
      }
    }
    const std::size_t d = spec.plm.d_plm, m = spec.plm.layers + (spec.include_plm_embedding ? 1 : 0);
    std::vector<Tensor<T>> out;
    for (std::size_t k = 0; k < m; ++k) {
      std::vector<T> v(src.rows * src.cols * d, T(0));
      for (std::size_t r = 0; r < src.rows; ++r) {
        const auto& cached = plm_cache_.at(rows[r])[k];
        std::copy(cached.begin(), cached.end(), v.begin() + r * src.cols * d);
      }
      out.push_back(Tensor<T>::from({src.rows, src.cols, d}, std::move(v)));
    }
    return out;
  }

  Encoded<T> encode(const TokenBatch& src, const RunMode& mode = {}) {
    Encoded<T> enc{src, {}, {}, {}};
    if (plm) {
      auto hs = plm_layers(src);
      auto c = converter(hs, mode);
      if (compressor) c = (*compressor)(c);
      enc.plm_side = spec.align.use_final_plm_layer ? hs.back() : c;
      enc.fused = fusion(c, src);
    } else {
      enc.fused = encode_input(src, *nmt.source);
    }
    enc.memory = encoder_forward(maybe_dropout(enc.fused, mode), nmt.encoder, padding_mask(src, src), mode).back();
    return enc;
  }

  /// Final decoder layer, teacher-forced on `din` ([B, Lt] with BOS first).
  Tensor<T> decode_hidden(const Encoded<T>& enc, const TokenBatch& din, const RunMode& mode = {}) const {
    auto y = maybe_dropout(encode_input(din, nmt.target), mode);
    return decoder_forward(y, enc.memory, nmt.decoder, causal_mask(din), padding_mask(din, enc.source), mode).back();
  }

  Tensor<T> logits(const Tensor<T>& hidden) const { return output_logits(hidden, nmt.projection); }

  /// Label-smoothed cross-entropy plus the configured alignment term.
  LossParts<T> loss(const Batch& batch, const RunMode& mode = {}) {
    auto enc = encode(batch.source, mode);
    auto hidden = decode_hidden(enc, batch.decoder_input, mode);
    auto ce = smoothed_cross_entropy_logits(logits(hidden), batch.labels.ids, spec.label_smoothing);
    LossParts<T> parts;
    parts.ce = static_cast<double>(ce.item());
    if (spec.align.kind == AlignKind::none) {
      parts.total = ce;
      return parts;
    }
    const auto keep_src = batch.source.keep();
    Tensor<T> sim;
    if (spec.align.site == AlignSite::decoder) {
      const auto keep_tgt = batch.decoder_input.keep();
      sim = spec.align.kind == AlignKind::cosine
                ? cosine_alignment_means(enc.plm_side, keep_src, hidden, keep_tgt)
                : mse_distill(enc.plm_side, keep_src, hidden, keep_tgt, AlignSite::decoder);
    } else {
      sim = spec.align.kind == AlignKind::cosine
                ? cosine_alignment_positions(enc.plm_side, enc.memory, keep_src)
                : mse_distill(enc.plm_side, keep_src, enc.memory, keep_src, AlignSite::encoder);
    }
    parts.align = static_cast<double>(sim.item());
    auto weighting = spec.align;
    if (weighting.alpha_norm == AlphaNorm::tokens)
      weighting.alpha /= static_cast<double>(batch.labels.non_pad());
    parts.total = total_loss(ce, sim, weighting);
    return parts;
  }

  /// Next-token log-probabilities for prefixes that all share one encoded
  /// source sentence (row 0 of `enc`). Returns [prefixes x vocab].
  std::vector<std::vector<double>> next_log_probs(const Encoded<T>& enc, const std::vector<Sentence>& prefixes) const {
    NoGradGuard ng;
    const std::size_t n = prefixes.size(), L = enc.memory.dim(1), d = enc.memory.dim(2);
    std::vector<T> mem(n * L * d);
    std::vector<Sentence> src_rows(n);
    Sentence first;
    for (std::size_t c = 0; c < enc.source.cols; ++c) first.push_back(enc.source.at(0, c));
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(enc.memory.data(), enc.memory.data() + L * d, mem.begin() + i * L * d);
      src_rows[i] = first;
    }
    Encoded<T> tiled{TokenBatch::pad(src_rows), Tensor<T>::from({n, L, d}, std::move(mem)), {}, {}};
    const auto din = TokenBatch::pad(prefixes);
    auto logp = log_softmax_last_axis(logits(decode_hidden(tiled, din)));
    const std::size_t V = logp.last_dim();
    std::vector<std::vector<double>> out(n, std::vector<double>(V));
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = (i * din.cols + prefixes[i].size() - 1) * V;
      for (std::size_t j = 0; j < V; ++j) out[i][j] = static_cast<double>(logp[row + j]);
    }
    return out;
  }

  std::size_t vocab() const { return spec.nmt.vocab; }

 private:
  std::map<Sentence, std::vector<std::vector<T>>> plm_cache_;
};

}  // namespace pinmt
