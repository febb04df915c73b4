#pragma once

// Joint-entropy regularizer over a pair of attention maps.
//
// Each map is flattened to N values, normalized to [0, 1] and assigned to B
// bins. Hard assignment is one-hot. Soft assignment integrates a triangular
// kernel of half-width w (in bin widths) centred on the value over each bin's
// interval; the outermost bins extend to infinity, so rows always sum to 1
// and w -> 0 recovers the hard histogram.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jamje/autodiff.hpp"
#include "jamje/jam.hpp"

namespace jamje {

enum class Normalization { kPerMapMinMax, kFixedUnit };
enum class Assignment { kHard, kSoftTriangular };

/// How the 2D/3D bin pair histogram is formed.
///   kAligned:         P(a,b) = 1/N   sum_i   w2(i,a) w3(i,b)
///   kPairwiseLiteral: P(a,b) = 1/N^2 sum_i,j w2(i,a) w3(j,b)
enum class JointMode { kAligned, kPairwiseLiteral };

struct BinningConfig {
  std::size_t bins = 32;
  Normalization normalization = Normalization::kPerMapMinMax;
  Assignment assignment = Assignment::kSoftTriangular;
  double kernel_width = 0.5;

  void validate() const {
    if (bins < 2) throw std::invalid_argument("BinningConfig: bins must be >= 2");
    if (!(kernel_width > 0.0)) throw std::invalid_argument("BinningConfig: kernel_width must be > 0");
  }
};

struct JointDistribution {
  Tensor p;  // (B, B)
  JointMode mode = JointMode::kAligned;
};

namespace detail {

inline std::atomic<std::size_t>& constant_map_counter() {
  static std::atomic<std::size_t> n{0};
  return n;
}

// CDF of the unit triangular density on [-1, 1].
inline double tri_cdf(double t) {
  if (t <= -1.0) return 0.0;
  if (t >= 1.0) return 1.0;
  if (t <= 0.0) return 0.5 * (1.0 + t) * (1.0 + t);
  return 1.0 - 0.5 * (1.0 - t) * (1.0 - t);
}

inline double tri_pdf(double t) { return std::max(0.0, 1.0 - std::abs(t)); }

}  // namespace detail

/// Number of constant maps that fell back to "all mass in bin 0".
inline std::size_t constant_map_fallbacks() { return detail::constant_map_counter().load(); }

/// Bin assignment of x (B, ...): each batch item's trailing elements form one
/// map of N values. Returns (B, N, bins).
inline ad::Var discretize(ad::Var maps, const BinningConfig& cfg) {
  cfg.validate();
  const Shape& s = maps.shape();
  const std::size_t batch = s.size() > 1 ? s[0] : 1;
  const std::size_t n = maps.size() / batch;
  const std::size_t nb = cfg.bins;
  const double fb = static_cast<double>(nb);
  const bool soft = cfg.assignment == Assignment::kSoftTriangular;
  const bool minmax = cfg.normalization == Normalization::kPerMapMinMax;
  const double w = cfg.kernel_width;
  const Tensor& a = maps.value();

  Tensor out(Shape{batch, n, nb});
  std::vector<double> lo(batch, 0.0), range(batch, 1.0);
  std::vector<std::size_t> arg_lo(batch, 0), arg_hi(batch, 0);
  std::vector<char> degenerate(batch, 0);

  for (std::size_t t = 0; t < batch; ++t) {
    const double* av = a.data() + t * n;
    double* ov = out.data() + t * n * nb;
    if (minmax) {
      const auto [mn, mx] = std::minmax_element(av, av + n);
      arg_lo[t] = static_cast<std::size_t>(mn - av);
      arg_hi[t] = static_cast<std::size_t>(mx - av);
      lo[t] = *mn;
      range[t] = *mx - *mn;
      if (!(range[t] > 0.0)) {
        degenerate[t] = 1;
        ++detail::constant_map_counter();
        std::clog << "[jamje] warning: constant attention map under min-max normalization; all mass in bin 0\n";
        for (std::size_t i = 0; i < n; ++i) ov[i * nb] = 1.0;
        continue;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double x = (av[i] - lo[t]) / range[t] * fb;  // position in bin units
      double* row = ov + i * nb;
      if (!soft) {
        const double f = std::floor(x);
        const std::size_t b = f < 0.0 ? 0 : std::min(nb - 1, static_cast<std::size_t>(f));
        row[b] = 1.0;
        continue;
      }
      const long first = std::max(0L, static_cast<long>(std::floor(x - w)));
      const long last = std::min(static_cast<long>(nb) - 1, static_cast<long>(std::floor(x + w)));
      for (long b = first; b <= last; ++b) {
        const double upper = b == static_cast<long>(nb) - 1 ? 1.0 : detail::tri_cdf((b + 1 - x) / w);
        const double lower = b == 0 ? 0.0 : detail::tri_cdf((b - x) / w);
        row[b] = upper - lower;
      }
    }
  }

  return maps.tape->record(
      "discretize", std::move(out), {maps},
      [=, lo = std::move(lo), range = std::move(range), arg_lo = std::move(arg_lo), arg_hi = std::move(arg_hi),
       degenerate = std::move(degenerate)](ad::BackwardContext& ctx) {
        if (!soft) throw std::logic_error("je: gradient requested through hard bin assignment");
        const Tensor& g = ctx.grad_out();
        const Tensor& av = ctx.input(0);
        Tensor& ga = ctx.grad_in(0);
        for (std::size_t t = 0; t < batch; ++t) {
          if (degenerate[t]) continue;
          double d_lo = 0.0, d_hi = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const double u = (av[t * n + i] - lo[t]) / range[t];
            const double x = u * fb;
            const double* gi = g.data() + (t * n + i) * nb;
            const long first = std::max(0L, static_cast<long>(std::floor(x - w)));
            const long last = std::min(static_cast<long>(nb) - 1, static_cast<long>(std::floor(x + w)));
            double dx = 0.0;
            for (long b = first; b <= last; ++b) {
              // d/dx [F((b+1-x)/w) - F((b-x)/w)]
              double d = 0.0;
              if (b != static_cast<long>(nb) - 1) d -= detail::tri_pdf((b + 1 - x) / w) / w;
              if (b != 0) d += detail::tri_pdf((b - x) / w) / w;
              dx += gi[b] * d;
            }
            if (dx == 0.0) continue;
            if (!minmax) {
              ga[t * n + i] += dx * fb;
              continue;
            }
            const double scale = fb / range[t];
            ga[t * n + i] += dx * scale;
            d_lo += dx * scale * (u - 1.0);
            d_hi -= dx * scale * u;
          }
          if (minmax) {
            ga[t * n + arg_lo[t]] += d_lo;
            ga[t * n + arg_hi[t]] += d_hi;
          }
        }
      });
}

/// Joint histogram of two (B, N, bins) assignment tensors. Returns (B, bins, bins).
inline ad::Var joint_distribution(ad::Var w2, ad::Var w3, JointMode mode) {
  if (w2.shape().size() != 3 || w3.shape().size() != 3) throw ShapeError("joint_distribution", w2.shape(), w3.shape());
  if (w2.shape() != w3.shape()) {
    if (w2.shape()[1] != w3.shape()[1])
      throw ShapeError("joint_distribution: element counts differ", w2.shape(), w3.shape());
    throw ShapeError("joint_distribution", w2.shape(), w3.shape());
  }
  const std::size_t batch = w2.shape()[0];
  const double n = static_cast<double>(w2.shape()[1]);
  if (mode == JointMode::kAligned) return ad::scale(ad::matmul(ad::transpose(w2), w3), 1.0 / n);

  // Double sum over all (i, j) pairs: (1^T W2)^T (1^T W3) / N^2.
  ad::Var ones = w2.tape->constant(Tensor(Shape{batch, 1, w2.shape()[1]}, 1.0));
  ad::Var col2 = ad::matmul(ones, w2);
  ad::Var col3 = ad::matmul(ones, w3);
  return ad::scale(ad::matmul(ad::transpose(col2), col3), 1.0 / (n * n));
}

/// Shannon entropy (natural log, 0 log 0 = 0) of each batch item of (B, ...).
inline ad::Var entropy(ad::Var p) {
  const std::size_t batch = p.shape().size() > 1 ? p.shape()[0] : 1;
  const std::size_t cells = p.size() / batch;
  Tensor out(Shape{batch});
  const Tensor& pv = p.value();
  for (std::size_t t = 0; t < batch; ++t) {
    double h = 0.0;
    for (std::size_t c = 0; c < cells; ++c) {
      const double v = pv[t * cells + c];
      if (v > 0.0) h -= v * std::log(v);
    }
    out[t] = h;
  }
  return p.tape->record("entropy", std::move(out), {p}, [batch, cells](ad::BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    const Tensor& pv = ctx.input(0);
    Tensor& gp = ctx.grad_in(0);
    for (std::size_t t = 0; t < batch; ++t)
      for (std::size_t c = 0; c < cells; ++c) {
        const double v = pv[t * cells + c];
        if (v > 0.0) gp[t * cells + c] -= g[t] * (std::log(v) + 1.0);
      }
  });
}

/// Mean over the batch of H(P(A_2D, A_3D)). Maps are (B, P, P) or (B, N).
inline ad::Var je_loss(ad::Var a2d, ad::Var a3d, const BinningConfig& cfg, JointMode mode) {
  if (cfg.assignment == Assignment::kHard && (a2d.tape->requires_grad(a2d) || a3d.tape->requires_grad(a3d)))
    throw std::logic_error("je_loss: gradient requested in hard assignment mode");
  if (a2d.size() != a3d.size() || a2d.shape()[0] != a3d.shape()[0])
    throw ShapeError("je_loss: element counts differ", a2d.shape(), a3d.shape());
  ad::Var joint = joint_distribution(discretize(a2d, cfg), discretize(a3d, cfg), mode);
  return ad::mean(entropy(joint));
}

// Value-level helpers on single maps.

inline Tensor discretize(const AttentionMap& a, const BinningConfig& cfg) {
  ad::Tape tape;
  ad::Var x = tape.constant(a.values.reshaped(Shape{1, a.values.size()}));
  return discretize(x, cfg).value().reshaped(Shape{a.values.size(), cfg.bins});
}

inline JointDistribution joint_distribution(const Tensor& assign2, const Tensor& assign3, JointMode mode) {
  if (assign2.rank() != 2 || assign3.rank() != 2 || assign2.dim(0) != assign3.dim(0))
    throw ShapeError("joint_distribution: element counts differ", assign2.shape(), assign3.shape());
  ad::Tape tape;
  auto lift = [&](const Tensor& t) { return tape.constant(t.reshaped(Shape{1, t.dim(0), t.dim(1)})); };
  ad::Var p = joint_distribution(lift(assign2), lift(assign3), mode);
  const std::size_t b = assign2.dim(1);
  return JointDistribution{p.value().reshaped(Shape{b, b}), mode};
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

inline double joint_entropy(const JointDistribution& jd) { return entropy(jd.p.values()); }

/// Row marginal (2D side) and column marginal (3D side).
inline std::pair<std::vector<double>, std::vector<double>> marginals(const JointDistribution& jd) {
  const std::size_t b = jd.p.dim(0);
  std::vector<double> m2(b, 0.0), m3(b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      m2[i] += jd.p[i * b + j];
      m3[j] += jd.p[i * b + j];
    }
  return {m2, m3};
}

inline double je_loss(const AttentionMap& a2d, const AttentionMap& a3d, const BinningConfig& cfg, JointMode mode) {
  ad::Tape tape;
  auto lift = [&](const AttentionMap& a) { return tape.constant(a.values.reshaped(Shape{1, a.values.size()})); };
  return je_loss(lift(a2d), lift(a3d), cfg, mode).value().item();
}

}  // namespace jamje
