#pragma once

// Verification metrics: cosine match scores, ROC, TAR@FAR, EER, AUC and
// pose-binned reports. Rates are fractions internally and percent in reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jamje/io.hpp"

namespace jamje {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Score {
  double score = 0.0;
  bool genuine = false;
  int bin = 0;
};

using ScoreSet = std::vector<Score>;

struct RocPoint {
  double far = 0.0;
  double tar = 0.0;
  double threshold = 0.0;
};

using RocCurve = std::vector<RocPoint>;

/// One embedding with its identity and pose bin.
struct EmbeddingRow {
  int identity = 0;
  int bin = 0;
  std::vector<double> values;
};

enum class GalleryFusion { kMax, kMean };
enum class BinAverage { kBinMean, kProbeWeighted };

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw MetricError("cosine: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw MetricError("cosine_scores: zero-norm embedding");
  return ab / std::sqrt(aa * bb);
}

/// One score per (probe, gallery identity). Each score carries the probe's bin.
inline ScoreSet cosine_scores(const std::vector<EmbeddingRow>& gallery, const std::vector<EmbeddingRow>& probes,
                              GalleryFusion fusion = GalleryFusion::kMax) {
  std::map<int, std::vector<const EmbeddingRow*>> by_id;
  for (const EmbeddingRow& g : gallery) by_id[g.identity].push_back(&g);
  ScoreSet out;
  out.reserve(probes.size() * by_id.size());
  for (const EmbeddingRow& p : probes) {
    for (const auto& [id, rows] : by_id) {
      double fused = fusion == GalleryFusion::kMax ? -std::numeric_limits<double>::infinity() : 0.0;
      for (const EmbeddingRow* g : rows) {
        const double c = cosine(p.values, g->values);
        fused = fusion == GalleryFusion::kMax ? std::max(fused, c) : fused + c;
      }
      if (fusion == GalleryFusion::kMean) fused /= static_cast<double>(rows.size());
      out.push_back({fused, id == p.identity, p.bin});
    }
  }
  return out;
}

inline void validate_scores(const ScoreSet& s, const char* who) {
  std::size_t g = 0;
  for (const Score& x : s) {
    if (!std::isfinite(x.score)) throw MetricError(std::string(who) + ": non-finite score");
    g += x.genuine;
  }
  if (g == 0 || g == s.size())
    throw MetricError(std::string(who) + ": need at least one genuine and one impostor score");
}

/// Accept iff score >= threshold. Points run from (0,0) to (1,1), one per
/// distinct score in decreasing threshold order.
inline RocCurve roc_curve(const ScoreSet& scores) {
  validate_scores(scores, "roc_curve");
  std::vector<std::pair<double, bool>> s;
  s.reserve(scores.size());
  std::size_t pos = 0;
  for (const Score& x : scores) {
    s.emplace_back(x.score, x.genuine);
    pos += x.genuine;
  }
  const std::size_t neg = s.size() - pos;
  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  RocCurve curve;
  curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < s.size();) {
    const double t = s[i].first;
    while (i < s.size() && s[i].first == t) {
      (s[i].second ? tp : fp) += 1;
      ++i;
    }
    curve.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos), t});
  }
  return curve;
}

/// Best TAR among operating points with FAR <= target, in percent.
inline double tar_at_far(const RocCurve& curve, double far_target = 0.01) {
  double best = 0.0;
  for (const RocPoint& p : curve)
    if (p.far <= far_target + 1e-12) best = std::max(best, p.tar);
  return 100.0 * best;
}

struct EerAuc {
  double eer = 0.0;  // percent
  double auc = 0.0;  // percent
};

inline EerAuc eer_and_auc(const RocCurve& curve) {
  if (curve.size() < 2) throw MetricError("eer_and_auc: curve needs at least two points");
  EerAuc r;
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].far - curve[i - 1].far) * 0.5 * (curve[i].tar + curve[i - 1].tar);
  r.auc = 100.0 * area;

  // d = FAR - FRR = FAR + TAR - 1 rises from -1 at (0,0) to +1 at (1,1).
  auto d = [](const RocPoint& p) { return p.far + p.tar - 1.0; };
  r.eer = 50.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const double d0 = d(curve[i - 1]), d1 = d(curve[i]);
    if (d0 <= 0.0 && d1 >= 0.0) {
      const double t = d1 == d0 ? 0.0 : -d0 / (d1 - d0);
      const double far = curve[i - 1].far + t * (curve[i].far - curve[i - 1].far);
      const double frr = 1.0 - (curve[i - 1].tar + t * (curve[i].tar - curve[i - 1].tar));
      r.eer = 100.0 * 0.5 * (far + frr);
      break;
    }
  }
  return r;
}

struct VerificationReport {
  int fold = 0;
  std::array<std::optional<double>, kNumPoseBins> bin_tar{};  // absent when a bin has no usable scores
  double average_tar = 0.0;
  double auc = 0.0;
  double eer = 0.0;
  double pooled_tar = 0.0;

  bool operator==(const VerificationReport&) const = default;
};

inline VerificationReport pose_binned_report(const ScoreSet& scores, double far_target = 0.01,
                                             BinAverage average = BinAverage::kBinMean, int fold = 0) {
  validate_scores(scores, "pose_binned_report");
  VerificationReport rep;
  rep.fold = fold;
  std::array<ScoreSet, kNumPoseBins> per_bin;
  for (const Score& s : scores) {
    if (s.bin < 0 || s.bin >= kNumPoseBins) throw MetricError("pose_binned_report: bin tag out of range");
    per_bin[s.bin].push_back(s);
  }
  double sum = 0.0, weight = 0.0;
  for (int b = 0; b < kNumPoseBins; ++b) {
    std::size_t g = 0;
    for (const Score& s : per_bin[b]) g += s.genuine;
    if (g == 0 || g == per_bin[b].size()) continue;
    const double t = tar_at_far(roc_curve(per_bin[b]), far_target);
    rep.bin_tar[b] = t;
    const double w = average == BinAverage::kBinMean ? 1.0 : static_cast<double>(g);
    sum += w * t;
    weight += w;
  }
  rep.average_tar = weight > 0.0 ? sum / weight : 0.0;
  const RocCurve pooled = roc_curve(scores);
  const EerAuc ea = eer_and_auc(pooled);
  rep.auc = ea.auc;
  rep.eer = ea.eer;
  rep.pooled_tar = tar_at_far(pooled, far_target);
  return rep;
}

inline nlohmann::json to_json(const VerificationReport& r) {
  nlohmann::json j;
  j["fold"] = r.fold;
  nlohmann::json bins = nlohmann::json::object();
  for (int b = 0; b < kNumPoseBins; ++b) bins[kPoseBinLabels[b]] = r.bin_tar[b] ? nlohmann::json(*r.bin_tar[b]) : nlohmann::json();
  j["tar_at_1far"] = bins;
  j["average_tar"] = r.average_tar;
  j["pooled_tar"] = r.pooled_tar;
  j["auc"] = r.auc;
  j["eer"] = r.eer;
  return j;
}

inline VerificationReport report_from_json(const nlohmann::json& j) {
  VerificationReport r;
  r.fold = j.at("fold");
  for (int b = 0; b < kNumPoseBins; ++b) {
    const auto& v = j.at("tar_at_1far").at(kPoseBinLabels[b]);
    if (!v.is_null()) r.bin_tar[b] = v.get<double>();
  }
  r.average_tar = j.at("average_tar");
  r.pooled_tar = j.at("pooled_tar");
  r.auc = j.at("auc");
  r.eer = j.at("eer");
  return r;
}

inline std::string format_cell(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}

/// Comma-separated table with per-bin TAR, average, AUC and EER columns.
inline std::string table_header() {
  std::string h = "method";
  for (const char* l : kPoseBinLabels) h += std::string(",tar_") + l;
  return h + ",average,auc,eer";
}

inline std::string table_row(const std::string& name, const VerificationReport& r) {
  std::string row = name;
  for (const auto& v : r.bin_tar) row += "," + format_cell(v);
  return row + "," + format_cell(r.average_tar) + "," + format_cell(r.auc) + "," + format_cell(r.eer);
}

inline void write_curve_csv(const fs::path& p, const RocCurve& curve) {
  auto os = detail::open_out(p);
  os << "threshold,far,tar\n";
  char buf[96];
  for (const RocPoint& pt : curve) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", pt.threshold, pt.far, pt.tar);
    os << buf;
  }
}

// Embedding files: one row per sample, "id,bin,v0,...,v{E-1}".

inline void write_embeddings(const fs::path& p, const std::vector<EmbeddingRow>& rows) {
  auto os = detail::open_out(p);
  char buf[40];
  for (const EmbeddingRow& r : rows) {
    os << r.identity << ',' << r.bin;
    for (double v : r.values) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + p.string());
}

inline std::vector<EmbeddingRow> read_embeddings(const fs::path& p) {
  auto is = detail::open_in(p);
  std::vector<EmbeddingRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 3) throw IoError(p.string() + ":" + std::to_string(lineno) + ": expected id,bin,values");
    try {
      EmbeddingRow r;
      r.identity = std::stoi(cells[0]);
      r.bin = std::stoi(cells[1]);
      for (std::size_t i = 2; i < cells.size(); ++i) r.values.push_back(std::stod(cells[i]));
      if (!rows.empty() && rows.front().values.size() != r.values.size())
        throw IoError(p.string() + ":" + std::to_string(lineno) + ": inconsistent embedding width");
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw IoError(p.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace jamje
