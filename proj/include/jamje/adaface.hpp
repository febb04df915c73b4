#pragma once

// AdaFace margin head.
//
// For the target class y_i:  s * (cos(theta_y + m (1 - h k)) - m (1 + h k))
// for every other class j:   s * cos(theta_j)
// where cos(theta) is the inner product of the L2-normalized embedding and
// the L2-normalized class weight, and k is the clipped, batch-normalized
// embedding norm.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "jamje/autodiff.hpp"
#include "jamje/parameter.hpp"

namespace jamje {

struct MarginParams {
  double m = 0.5;
  double h = 0.0;
  double t_alpha = 0.01;
  double s = 64.0;

  void validate() const {
    if (!(s > 0.0)) throw std::invalid_argument("MarginParams: s must be > 0");
    if (!(m >= 0.0)) throw std::invalid_argument("MarginParams: m must be >= 0");
    if (!(h >= 0.0)) throw std::invalid_argument("MarginParams: h must be >= 0");
    if (!(t_alpha > 0.0 && t_alpha <= 1.0)) throw std::invalid_argument("MarginParams: t_alpha must be in (0, 1]");
  }
};

inline constexpr double kCosClamp = 1e-7;
inline constexpr double kHardnessEps = 1e-3;

/// One domain's classifier: per-class weights (classes, E) and running norm statistics.
struct ClassifierHead {
  ParamPtr weights;
  double norm_mean = 20.0;
  double norm_std = 100.0;

  static ClassifierHead create(std::string name, std::size_t classes, std::size_t embedding_dim,
                               std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor w(Shape{classes, embedding_dim});
    for (double& v : w.values()) v = dist(rng);
    return ClassifierHead{make_param(std::move(name), std::move(w))};
  }

  std::size_t classes() const { return weights->value.dim(0); }
  std::size_t embedding_dim() const { return weights->value.dim(1); }
};

/// EMA update of the running norm mean/std. Batch std is unbiased; a single-element
/// batch leaves the std untouched.
inline void norm_stats_update(ClassifierHead& head, std::span<const double> norms, double t_alpha) {
  if (norms.empty()) throw std::invalid_argument("norm_stats_update: empty batch");
  double mean = 0.0;
  for (double v : norms) mean += v;
  mean /= static_cast<double>(norms.size());
  head.norm_mean = (1.0 - t_alpha) * head.norm_mean + t_alpha * mean;
  if (norms.size() > 1) {
    double var = 0.0;
    for (double v : norms) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(norms.size() - 1));
    head.norm_std = (1.0 - t_alpha) * head.norm_std + t_alpha * sd;
  }
}

/// Margin scaler k in [-1, 1]. Zero whenever h == 0.
inline double hardness(const ClassifierHead& head, double norm, const MarginParams& mp) {
  if (mp.h == 0.0) return 0.0;
  if (!(head.norm_std > 0.0)) throw std::domain_error("hardness: norm std must be > 0");
  const double ht = std::max(mp.h, kHardnessEps);
  return std::clamp((norm - head.norm_mean) / (head.norm_std / ht), -1.0, 1.0);
}

/// Cosines between rows of `embeddings` (B, E) and class weights (C, E): (B, C).
inline ad::Var cosine_logits(ad::Var embeddings, ad::Var class_weights) {
  return ad::matmul(ad::l2_normalize_rows(embeddings), ad::transpose(ad::l2_normalize_rows(class_weights)));
}

/// Applies the margin to the target column of each row of `cosines` and scales by s.
/// `angular[r]` and `additive[r]` are m(1 - hk) and m(1 + hk) for row r.
inline ad::Var margin_logits(ad::Var cosines, const std::vector<std::size_t>& labels,
                             const std::vector<double>& angular, const std::vector<double>& additive, double s) {
  const Shape& sh = cosines.shape();
  if (sh.size() != 2 || labels.size() != sh[0] || angular.size() != sh[0] || additive.size() != sh[0])
    throw ShapeError("margin_logits: need (B,C) and B labels, got " + to_string(sh));
  const std::size_t rows = sh[0], classes = sh[1];
  for (std::size_t y : labels)
    if (y >= classes) throw std::out_of_range("margin_logits: label " + std::to_string(y) + " out of range");

  Tensor out = cosines.value();
  std::vector<double> dtarget(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * classes;
    const double raw = row[labels[r]];
    // The value uses the exact angle; the 1e-7 clamp only guards the derivative,
    // whose 1/sin(theta) factor blows up at the boundary.
    const double theta = std::acos(std::clamp(raw, -1.0, 1.0));
    const double target = std::cos(theta + angular[r]) - additive[r];
    const double c = std::clamp(raw, -1.0 + kCosClamp, 1.0 - kCosClamp);
    const bool clamped = raw != c;
    dtarget[r] = clamped ? 0.0 : std::sin(theta + angular[r]) / std::sqrt(1.0 - c * c);
    for (std::size_t j = 0; j < classes; ++j) row[j] *= s;
    row[labels[r]] = s * target;
  }
  return cosines.tape->record("margin_logits", std::move(out), {cosines},
                              [=, dtarget = std::move(dtarget)](ad::BackwardContext& ctx) {
                                const Tensor& g = ctx.grad_out();
                                Tensor& gc = ctx.grad_in(0);
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t j = 0; j < classes; ++j) {
                                    const std::size_t i = r * classes + j;
                                    gc[i] += s * g[i] * (j == labels[r] ? dtarget[r] : 1.0);
                                  }
                              });
}

/// Row L2 norms of a (B, E) value.
inline std::vector<double> row_norms(const Tensor& x) {
  const std::size_t e = x.shape().back();
  const std::size_t rows = x.size() / e;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < e; ++j) s += x[r * e + j] * x[r * e + j];
    out[r] = std::sqrt(s);
  }
  return out;
}

/// AdaFace logits for a batch. Norm statistics are read, never differentiated.
inline ad::Var adaface_logits(ad::Var embeddings, ad::Var class_weights, const ClassifierHead& head,
                              const std::vector<std::size_t>& labels, const MarginParams& mp) {
  const std::vector<double> norms = row_norms(embeddings.value());
  std::vector<double> angular(norms.size()), additive(norms.size());
  for (std::size_t r = 0; r < norms.size(); ++r) {
    if (!(norms[r] > 0.0)) throw NumericError("adaface: zero-norm embedding");
    const double hk = mp.h * hardness(head, norms[r], mp);
    angular[r] = mp.m * (1.0 - hk);
    additive[r] = mp.m * (1.0 + hk);
  }
  return margin_logits(cosine_logits(embeddings, class_weights), labels, angular, additive, mp.s);
}

/// Mean negative log of the true-class probability.
inline ad::Var cross_entropy(ad::Var logits, const std::vector<std::size_t>& labels) {
  return ad::scale(ad::mean(ad::log(ad::pick(ad::softmax_rows(logits), labels))), -1.0);
}

/// L_d for one domain.
inline ad::Var domain_loss(ad::Var embeddings, const ClassifierHead& head, const std::vector<std::size_t>& labels,
                           const MarginParams& mp, ParamBinding& bind) {
  if (labels.empty()) throw std::invalid_argument("domain_loss: empty batch");
  for (std::size_t y : labels)
    if (y >= head.classes()) throw std::out_of_range("domain_loss: label " + std::to_string(y) + " out of range");
  return cross_entropy(adaface_logits(embeddings, bind(head.weights), head, labels, mp), labels);
}

/// Class-probability vector for a single embedding.
inline std::vector<double> adaface_probability(const ClassifierHead& head, std::span<const double> embedding,
                                               std::size_t label, const MarginParams& mp) {
  if (label >= head.classes()) throw std::out_of_range("adaface_probability: label out of range");
  ad::Tape tape;
  ad::Var e = tape.constant(Tensor(Shape{1, embedding.size()}, std::vector<double>(embedding.begin(), embedding.end())));
  ad::Var w = tape.constant(head.weights->value);
  ad::Var p = ad::softmax_rows(adaface_logits(e, w, head, {label}, mp));
  return std::vector<double>(p.value().values().begin(), p.value().values().end());
}

struct LossWeights {
  double l2d = 1.0;
  double l3d = 1.0;
  double lje = 1.0;
};

/// L = w2 L_2D + w3 L_3D + wj L_JE; absent terms are skipped.
inline ad::Var total_loss(ad::Var l2d, std::optional<ad::Var> l3d, std::optional<ad::Var> lje,
                          const LossWeights& w = {}) {
  ad::Var total = w.l2d == 1.0 ? l2d : ad::scale(l2d, w.l2d);
  if (l3d) total = ad::add(total, w.l3d == 1.0 ? *l3d : ad::scale(*l3d, w.l3d));
  if (lje) total = ad::add(total, w.lje == 1.0 ? *lje : ad::scale(*lje, w.lje));
  return total;
}

}  // namespace jamje
