#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "jamje/autodiff.hpp"

namespace jamje::ad {

/// Builds a scalar loss on `tape` from the differentiable input `x`.
using ScalarFn = std::function<Var(Tape& tape, Var x)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of `f` at `point` with central differences of step `h`.
///
/// The error per coordinate is |analytic - numeric| / max(1, |analytic|). When
/// `coords` is given only those coordinates are perturbed.
inline GradCheckResult grad_check_detailed(const ScalarFn& f, const Tensor& point, double h,
                                           std::optional<std::vector<std::size_t>> coords = std::nullopt) {
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(point);
    Var loss = f(tape, x);
    analytic = tape.backward(loss)[x];
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    Var x = tape.constant(p);
    const double v = f(tape, x).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite value at perturbed point");
    return v;
  };

  std::vector<std::size_t> idx;
  if (coords) {
    idx = *coords;
  } else {
    idx.resize(point.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }

  GradCheckResult res;
  Tensor probe = point;
  for (std::size_t i : idx) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = eval(probe);
    probe[i] = orig - h;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err >= res.max_relative_error) {
      res = GradCheckResult{err, i, analytic[i], numeric};
    }
  }
  return res;
}

inline double grad_check(const ScalarFn& f, const Tensor& point, double h = 1e-5) {
  return grad_check_detailed(f, point, h).max_relative_error;
}

}  // namespace jamje::ad
