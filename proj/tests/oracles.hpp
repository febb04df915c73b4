#pragma once

// Slow, independent reference implementations used to check the metrics code.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "jamje/metrics.hpp"

namespace oracle {

struct Rates {
  double far, tar;
};

/// Operating point at threshold t, accept iff score >= t. Counts by direct O(n) scan.
inline Rates rates_at(const jamje::ScoreSet& s, double t) {
  double g = 0, i = 0, ga = 0, ia = 0;
  for (const auto& x : s) {
    (x.genuine ? g : i) += 1;
    if (x.score >= t) (x.genuine ? ga : ia) += 1;
  }
  return {ia / i, ga / g};
}

/// Every operating point, one per candidate threshold, ordered by FAR then TAR.
inline std::vector<Rates> sweep(const jamje::ScoreSet& s) {
  std::vector<Rates> pts{rates_at(s, std::numeric_limits<double>::infinity())};
  for (const auto& x : s) pts.push_back(rates_at(s, x.score));
  std::sort(pts.begin(), pts.end(), [](const Rates& a, const Rates& b) {
    return a.far != b.far ? a.far < b.far : a.tar < b.tar;
  });
  return pts;
}

inline double tar_at_far(const jamje::ScoreSet& s, double target) {
  double best = 0.0;
  for (const auto& x : s) {
    const Rates r = rates_at(s, x.score);
    if (r.far <= target + 1e-12) best = std::max(best, r.tar);
  }
  return 100.0 * best;
}

/// Mann-Whitney statistic, equal to the area under the linearly interpolated ROC.
inline double auc(const jamje::ScoreSet& s) {
  double wins = 0.0, pairs = 0.0;
  for (const auto& g : s)
    if (g.genuine)
      for (const auto& i : s)
        if (!i.genuine) {
          pairs += 1.0;
          wins += g.score > i.score ? 1.0 : g.score == i.score ? 0.5 : 0.0;
        }
  return 100.0 * wins / pairs;
}

/// Walks the interpolated curve densely and takes the sample closest to FAR = 1 - TAR.
inline double eer(const jamje::ScoreSet& s, int steps = 2000) {
  const std::vector<Rates> pts = sweep(s);
  double best_gap = std::numeric_limits<double>::infinity(), best = 50.0;
  for (std::size_t k = 1; k < pts.size(); ++k)
    for (int j = 0; j <= steps; ++j) {
      const double u = static_cast<double>(j) / steps;
      const double far = pts[k - 1].far + u * (pts[k].far - pts[k - 1].far);
      const double tar = pts[k - 1].tar + u * (pts[k].tar - pts[k - 1].tar);
      const double gap = std::abs(far - (1.0 - tar));
      if (gap < best_gap) {
        best_gap = gap;
        best = 50.0 * (far + 1.0 - tar);
      }
    }
  return best;
}

/// Random set with at least one genuine and one impostor score. Scores are
/// quantized so ties occur.
inline jamje::ScoreSet random_scores(std::mt19937_64& rng, std::size_t max_n, int bins = 1) {
  std::uniform_int_distribution<std::size_t> n_dist(2, max_n);
  const std::size_t n = n_dist(rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> sep(0.0, 2.0);
  const double shift = sep(rng);
  const bool quantize = rng() % 2;
  jamje::ScoreSet s(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i].genuine = i == 0 ? true : i == 1 ? false : rng() % 4 == 0;
    double v = gauss(rng) + (s[i].genuine ? shift : 0.0);
    if (quantize) v = std::round(v * 4.0) / 4.0;
    s[i].score = v;
    s[i].bin = static_cast<int>(rng() % static_cast<unsigned>(bins));
  }
  return s;
}

}  // namespace oracle
