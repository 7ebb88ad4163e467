#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pinmt/ops.hpp"

namespace pinmt {

enum class AlignKind { none, cosine, mse };
enum class AlignSite { encoder, decoder };
enum class SignMode { paper_literal, maximize_alignment };
enum class AlphaNorm { tokens, none };

inline AlignKind align_kind_from_name(const std::string& s) {
  if (s == "none") return AlignKind::none;
  if (s == "cosine") return AlignKind::cosine;
  if (s == "mse") return AlignKind::mse;
  throw std::invalid_argument("unknown alignment kind '" + s + "'");
}
inline std::string align_kind_name(AlignKind k) {
  return k == AlignKind::cosine ? "cosine" : k == AlignKind::mse ? "mse" : "none";
}
inline AlignSite align_site_from_name(const std::string& s) {
  if (s == "encoder") return AlignSite::encoder;
  if (s == "decoder") return AlignSite::decoder;
  throw std::invalid_argument("unknown alignment site '" + s + "'");
}
inline std::string align_site_name(AlignSite s) { return s == AlignSite::encoder ? "encoder" : "decoder"; }
inline SignMode sign_mode_from_name(const std::string& s) {
  if (s == "paper_literal") return SignMode::paper_literal;
  if (s == "maximize_alignment") return SignMode::maximize_alignment;
  throw std::invalid_argument("unknown sign mode '" + s + "'");
}
inline std::string sign_mode_name(SignMode m) {
  return m == SignMode::paper_literal ? "paper_literal" : "maximize_alignment";
}

inline AlphaNorm alpha_norm_from_name(const std::string& s) {
  if (s == "tokens") return AlphaNorm::tokens;
  if (s == "none") return AlphaNorm::none;
  throw std::invalid_argument("unknown alpha normalization '" + s + "'");
}
inline std::string alpha_norm_name(AlphaNorm n) { return n == AlphaNorm::tokens ? "tokens" : "none"; }

struct AlignmentSpec {
  AlignKind kind = AlignKind::none;
  AlignSite site = AlignSite::decoder;
  double alpha = 500.0;
  SignMode sign_mode = SignMode::maximize_alignment;
  bool use_final_plm_layer = false;  // compare against the raw last PLM layer instead
  // tokens: alpha weighs the term against a token-summed cross-entropy, so
  // against the mean it is divided by the batch's target token count.
  AlphaNorm alpha_norm = AlphaNorm::tokens;
};

struct DegenerateInputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kNormGuard = 1e-12;

/// Row-wise cosine of two [n, d] tensors, returned as [n].
template <class T>
Tensor<T> row_cosine(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("cosine: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto na = sqrt(sum_last_axis(mul(a, a)));
  auto nb = sqrt(sum_last_axis(mul(b, b)));
  for (std::size_t i = 0; i < na.size(); ++i)
    if (na[i] == T(0) || nb[i] == T(0)) throw DegenerateInputError("cosine alignment: zero-norm vector at row " + std::to_string(i));
  const T g = static_cast<T>(kNormGuard);
  return divide(sum_last_axis(mul(a, b)), mul(add_scalar(na, g), add_scalar(nb, g)));
}

/// cos(mean_rows(H_plm), mean_rows(H_site)) for one sentence pair of [I,d]
/// and [L,d]. Gradients reach H_site only.
template <class T>
Tensor<T> cosine_alignment(const Tensor<T>& h_plm, const Tensor<T>& h_site) {
  if (h_plm.rank() != 2 || h_site.rank() != 2 || h_plm.last_dim() != h_site.last_dim())
    throw ShapeError("cosine_alignment: " + shape_str(h_plm.shape()) + " vs " + shape_str(h_site.shape()));
  auto a = reshape(mean_over_axis(h_plm.detach(), 0), {1, h_plm.last_dim()});
  auto b = reshape(mean_over_axis(h_site, 0), {1, h_site.last_dim()});
  return reshape(row_cosine(a, b), {1});
}

/// Batched sentence-mean cosine over non-pad rows, averaged over the batch.
/// The PLM side is treated as a constant.
template <class T>
Tensor<T> cosine_alignment_means(const Tensor<T>& h_plm, const std::vector<std::uint8_t>& keep_plm,
                                 const Tensor<T>& h_site, const std::vector<std::uint8_t>& keep_site) {
  auto a = masked_mean_rows(h_plm.detach(), keep_plm);
  auto b = masked_mean_rows(h_site, keep_site);
  return mean(row_cosine(a, b));
}

inline std::vector<std::size_t> kept_rows(const std::vector<std::uint8_t>& keep) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) rows.push_back(i);
  return rows;
}

/// Position-wise cosine over non-pad positions of two [B,L,d] tensors.
template <class T>
Tensor<T> cosine_alignment_positions(const Tensor<T>& h_plm, const Tensor<T>& h_site,
                                     const std::vector<std::uint8_t>& keep) {
  if (h_plm.shape() != h_site.shape())
    throw ShapeError("position-wise alignment needs equal shapes, got " + shape_str(h_plm.shape()) + " vs " +
                     shape_str(h_site.shape()));
  auto rows = kept_rows(keep);
  return mean(row_cosine(select_rows(h_plm.detach(), rows), select_rows(h_site, rows)));
}

/// Mean squared difference. Encoder site compares positions one to one;
/// decoder site compares per-sentence mean vectors.
template <class T>
Tensor<T> mse_distill(const Tensor<T>& h_plm, const std::vector<std::uint8_t>& keep_plm, const Tensor<T>& h_site,
                      const std::vector<std::uint8_t>& keep_site, AlignSite site) {
  if (site == AlignSite::encoder) {
    if (h_plm.shape() != h_site.shape() || keep_plm != keep_site)
      throw ShapeError("encoder-site distillation needs equal lengths, got " + shape_str(h_plm.shape()) + " vs " +
                       shape_str(h_site.shape()));
    auto rows = kept_rows(keep_plm);
    auto diff = sub(select_rows(h_site, rows), select_rows(h_plm.detach(), rows));
    return mean(mul(diff, diff));
  }
  auto diff = sub(masked_mean_rows(h_site, keep_site), masked_mean_rows(h_plm.detach(), keep_plm));
  return mean(mul(diff, diff));
}

/// Single-sentence convenience form over [I,d] and [L,d].
template <class T>
Tensor<T> mse_distill(const Tensor<T>& h_plm, const Tensor<T>& h_site, AlignSite site) {
  if (h_plm.rank() != 2 || h_site.rank() != 2) throw ShapeError("mse_distill expects [len, d] inputs");
  const Shape a{1, h_plm.dim(0), h_plm.dim(1)}, b{1, h_site.dim(0), h_site.dim(1)};
  if (site == AlignSite::encoder && h_plm.dim(0) != h_site.dim(0))
    throw ShapeError("encoder-site distillation needs equal lengths, got " + std::to_string(h_plm.dim(0)) + " and " +
                     std::to_string(h_site.dim(0)));
  return mse_distill(reshape(h_plm, a), std::vector<std::uint8_t>(h_plm.dim(0), 1), reshape(h_site, b),
                     std::vector<std::uint8_t>(h_site.dim(0), 1), site);
}

/// Combined objective. Literal mode adds alpha * L_sim as printed; the
/// default mode rewards similarity for cosine via alpha * (1 - L_sim).
template <class T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& sim, const AlignmentSpec& spec) {
  if (spec.alpha < 0) throw std::invalid_argument("alignment alpha must be non-negative");
  if (spec.kind == AlignKind::none) return ce;
  const T a = static_cast<T>(spec.alpha);
  if (spec.kind == AlignKind::cosine && spec.sign_mode == SignMode::maximize_alignment)
    return add(ce, add_scalar(scale(sim, -a), a));
  return add(ce, scale(sim, a));
}

}  // namespace pinmt
