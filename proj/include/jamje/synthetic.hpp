#pragma once

// Synthetic paired 2D/3D face data.
//
// An identity is a closed radial surface r(d) over unit directions d: a
// per-identity ellipsoid carrying a shared face template (nose, brows, chin,
// eye sockets) whose strengths vary per identity, plus random smooth bumps
// on the front hemisphere. The face looks along +z; the camera sits on +z.
// Images are Lambertian renders I = rho * max(0, N.L) of the yawed surface
// under orthographic projection; the 3D channel is always the frontal cloud.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "jamje/io.hpp"
#include "jamje/tensor.hpp"

namespace jamje {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const { return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x}; }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const { return *this * (1.0 / norm()); }
};

struct SyntheticConfig {
  std::size_t identities = 40;
  std::size_t samples_per_identity = 30;
  std::size_t gallery_per_identity = 5;
  std::size_t render_points = 8192;
  std::size_t cloud_points = 256;
  std::size_t image_size = 32;
  double jitter = 0.02;
  double split_fraction = 0.7;
  std::array<double, kNumPoseBins> pose_fractions{0.2, 0.2, 0.2, 0.2, 0.2};
  Vec3 light{0.3, 0.3, 1.0};
  std::size_t bumps = 10;
  double bump_amplitude = 0.1;
  double extent = 1.05;  // image plane half-width in world units
  std::size_t folds = 3;
  std::uint64_t seed = 7;

  void validate() const {
    if (identities < 2) throw std::invalid_argument("synthetic: need at least 2 identities");
    if (samples_per_identity < gallery_per_identity)
      throw std::invalid_argument("synthetic: fewer samples per identity than gallery size");
    if (!gallery_per_identity) throw std::invalid_argument("synthetic: gallery_per_identity must be > 0");
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw std::invalid_argument("synthetic: split_fraction in (0,1)");
    if (cloud_points > render_points) throw std::invalid_argument("synthetic: cloud_points > render_points");
    double s = 0.0;
    for (double f : pose_fractions) {
      if (f < 0.0) throw std::invalid_argument("synthetic: negative pose fraction");
      s += f;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("synthetic: pose fractions must sum to 1");
  }
};

/// Canonical (frontal) sampled surface of one identity.
struct IdentityConstellation {
  int identity = 0;
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<double> albedo;
};

struct PosedCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
};

namespace detail {

struct Blob {
  Vec3 center;
  double amplitude;
  double width;
};

struct IdentitySurface {
  Vec3 axes;
  std::vector<Blob> shape;
  std::vector<Blob> albedo;
  double base_albedo;

  double radius(const Vec3& d) const {
    const double e = std::pow(d.x / axes.x, 2) + std::pow(d.y / axes.y, 2) + std::pow(d.z / axes.z, 2);
    double mod = 1.0;
    for (const Blob& b : shape) mod += b.amplitude * std::exp(-(1.0 - d.dot(b.center)) / (b.width * b.width));
    return mod / std::sqrt(e);
  }

  Vec3 point(const Vec3& d) const { return d * radius(d); }

  double rho(const Vec3& d) const {
    double a = base_albedo;
    for (const Blob& b : albedo) a += b.amplitude * std::exp(-(1.0 - d.dot(b.center)) / (b.width * b.width));
    return std::clamp(a, 0.05, 1.0);
  }

  Vec3 normal(const Vec3& d) const {
    const Vec3 helper = std::abs(d.y) < 0.9 ? Vec3{0, 1, 0} : Vec3{1, 0, 0};
    const Vec3 t1 = d.cross(helper).normalized();
    const Vec3 t2 = d.cross(t1);
    constexpr double eps = 1e-4;
    const Vec3 du = point((d + t1 * eps).normalized()) - point((d - t1 * eps).normalized());
    const Vec3 dv = point((d + t2 * eps).normalized()) - point((d - t2 * eps).normalized());
    Vec3 n = du.cross(dv).normalized();
    if (n.dot(d) < 0.0) n = n * -1.0;
    return n;
  }
};

inline Vec3 spherical(double polar_from_z, double azimuth) {
  return {std::sin(polar_from_z) * std::cos(azimuth), std::sin(polar_from_z) * std::sin(azimuth),
          std::cos(polar_from_z)};
}

inline IdentitySurface make_surface(std::uint64_t seed, int identity, const SyntheticConfig& cfg) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(identity) * 0xC2B2AE3D27D4EB4FULL + 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  IdentitySurface s;
  s.axes = {uni(0.7, 1.0), uni(0.9, 1.35), uni(0.78, 1.15)};
  // Shared face template with identity-specific strength.
  const double k = 1.0;
  s.shape.push_back({Vec3{0.0, -0.08, 1.0}.normalized(), k * uni(0.12, 0.28), uni(0.14, 0.22)});  // nose
  s.shape.push_back({Vec3{-0.3, 0.32, 0.9}.normalized(), uni(0.02, 0.08), uni(0.15, 0.25)});       // brows
  s.shape.push_back({Vec3{0.3, 0.32, 0.9}.normalized(), uni(0.02, 0.08), uni(0.15, 0.25)});
  s.shape.push_back({Vec3{-0.3, 0.18, 0.94}.normalized(), -uni(0.03, 0.09), uni(0.12, 0.2)});      // eye sockets
  s.shape.push_back({Vec3{0.3, 0.18, 0.94}.normalized(), -uni(0.03, 0.09), uni(0.12, 0.2)});
  s.shape.push_back({Vec3{0.0, -0.62, 0.78}.normalized(), uni(0.02, 0.1), uni(0.2, 0.3)});         // chin
  s.shape.push_back({Vec3{-0.95, 0.1, 0.1}.normalized(), uni(0.02, 0.07), uni(0.15, 0.25)});       // ears
  s.shape.push_back({Vec3{0.95, 0.1, 0.1}.normalized(), uni(0.02, 0.07), uni(0.15, 0.25)});
  for (std::size_t i = 0; i < cfg.bumps; ++i) {
    const Vec3 c = spherical(std::acos(uni(-0.2, 1.0)), uni(0.0, 2.0 * std::numbers::pi));
    s.shape.push_back({c, uni(-cfg.bump_amplitude, cfg.bump_amplitude), uni(0.2, 0.45)});
  }
  s.base_albedo = uni(0.55, 0.8);
  s.albedo.push_back({Vec3{-0.3, 0.3, 0.9}.normalized(), -uni(0.1, 0.3), 0.12});  // brows
  s.albedo.push_back({Vec3{0.3, 0.3, 0.9}.normalized(), -uni(0.1, 0.3), 0.12});
  s.albedo.push_back({Vec3{0.0, -0.38, 0.92}.normalized(), -uni(0.05, 0.25), 0.12});  // lips
  for (int i = 0; i < 4; ++i) {
    const Vec3 c = spherical(std::acos(uni(-0.5, 1.0)), uni(0.0, 2.0 * std::numbers::pi));
    s.albedo.push_back({c, uni(-0.25, 0.25), uni(0.2, 0.4)});
  }
  return s;
}

inline std::vector<Vec3> fibonacci_sphere(std::size_t n) {
  std::vector<Vec3> out(n);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double y = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * static_cast<double>(i);
    out[i] = {r * std::cos(phi), y, r * std::sin(phi)};
  }
  return out;
}

}  // namespace detail

/// Deterministic canonical constellation for (seed, identity).
inline IdentityConstellation sample_identity(std::uint64_t seed, int identity, const SyntheticConfig& cfg,
                                             std::size_t point_count) {
  const detail::IdentitySurface surf = detail::make_surface(seed, identity, cfg);
  IdentityConstellation c;
  c.identity = identity;
  for (const Vec3& d : detail::fibonacci_sphere(point_count)) {
    c.points.push_back(surf.point(d));
    c.normals.push_back(surf.normal(d));
    c.albedo.push_back(surf.rho(d));
  }
  Vec3 centroid;
  for (const Vec3& p : c.points) centroid = centroid + p;
  centroid = centroid * (1.0 / static_cast<double>(c.points.size()));
  double rmax = 0.0;
  for (Vec3& p : c.points) {
    p = p - centroid;
    rmax = std::max(rmax, p.norm());
  }
  for (Vec3& p : c.points) p = p * (1.0 / rmax);
  return c;
}

/// Rotation about the vertical (y) axis by `yaw_deg`, applied after a per-point
/// displacement along the normal drawn uniformly from [-jitter, jitter].
inline PosedCloud pose_view(const IdentityConstellation& c, double yaw_deg, double jitter, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-jitter, jitter);
  const double a = yaw_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  auto rot = [&](const Vec3& v) { return Vec3{ca * v.x + sa * v.z, v.y, -sa * v.x + ca * v.z}; };
  PosedCloud out;
  out.points.reserve(c.points.size());
  out.normals.reserve(c.points.size());
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    const double shift = jitter > 0.0 ? u(rng) : 0.0;
    out.points.push_back(rot(c.points[i] + c.normals[i] * shift));
    out.normals.push_back(rot(c.normals[i]));
  }
  return out;
}

/// Orthographic Lambertian render. The viewer looks down -z; each pixel takes
/// the nearest (largest z) projected point. Back-facing points shade to 0.
inline Tensor render_lambertian(const std::vector<Vec3>& points, const std::vector<Vec3>& normals,
                                const std::vector<double>& albedo, const Vec3& light, std::size_t height,
                                std::size_t width, double extent = 1.05) {
  if (!height || !width) throw std::invalid_argument("render_lambertian: image dims must be positive");
  if (normals.size() != points.size() || albedo.size() != points.size())
    throw std::invalid_argument("render_lambertian: points/normals/albedo size mismatch");
  const Vec3 l = light.normalized();
  Tensor img(Shape{height, width, 1});
  std::vector<double> depth(height * width, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3& p = points[i];
    const double fc = (p.x + extent) / (2.0 * extent) * static_cast<double>(width);
    const double fr = (extent - p.y) / (2.0 * extent) * static_cast<double>(height);
    if (fc < 0.0 || fr < 0.0) continue;
    const auto col = static_cast<std::size_t>(fc);
    const auto row = static_cast<std::size_t>(fr);
    if (col >= width || row >= height) continue;
    const std::size_t px = row * width + col;
    if (p.z <= depth[px]) continue;
    depth[px] = p.z;
    const Vec3& n = normals[i];
    img[px] = n.z > 0.0 ? albedo[i] * std::max(0.0, n.dot(l)) : 0.0;
  }
  return img;
}

/// Greedy farthest-point subsample starting from index 0.
inline std::vector<std::size_t> farthest_point_sample(const std::vector<Vec3>& pts, std::size_t k) {
  if (k > pts.size()) throw std::invalid_argument("farthest_point_sample: k > point count");
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  std::vector<double> dist(pts.size(), std::numeric_limits<double>::infinity());
  std::size_t next = 0;
  for (std::size_t i = 0; i < k; ++i) {
    chosen.push_back(next);
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      const Vec3 d = pts[j] - pts[next];
      dist[j] = std::min(dist[j], d.dot(d));
      if (dist[j] > best_d) {
        best_d = dist[j];
        best = j;
      }
    }
    next = best;
  }
  return chosen;
}

/// Symmetric Chamfer distance: mean nearest-neighbour distance, averaged over both directions.
inline double chamfer_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  auto one_way = [](const std::vector<Vec3>& x, const std::vector<Vec3>& y) {
    double total = 0.0;
    for (const Vec3& p : x) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& q : y) best = std::min(best, (p - q).dot(p - q));
      total += std::sqrt(best);
    }
    return total / static_cast<double>(x.size());
  };
  return 0.5 * (one_way(a, b) + one_way(b, a));
}

inline Tensor to_tensor(const std::vector<Vec3>& pts) {
  Tensor t(Shape{pts.size(), 3});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t[3 * i] = pts[i].x;
    t[3 * i + 1] = pts[i].y;
    t[3 * i + 2] = pts[i].z;
  }
  return t;
}

/// Per-bin sample counts for `n` samples: largest-remainder rounding of n * fractions.
inline std::array<std::size_t, kNumPoseBins> allocate_bins(std::size_t n,
                                                           const std::array<double, kNumPoseBins>& fractions) {
  std::array<std::size_t, kNumPoseBins> counts{};
  std::array<double, kNumPoseBins> rem{};
  std::size_t used = 0;
  for (int b = 0; b < kNumPoseBins; ++b) {
    const double exact = fractions[b] * static_cast<double>(n);
    counts[b] = static_cast<std::size_t>(std::floor(exact));
    rem[b] = exact - static_cast<double>(counts[b]);
    used += counts[b];
  }
  while (used < n) {
    const auto it = std::max_element(rem.begin(), rem.end());
    ++counts[it - rem.begin()];
    *it = -1.0;
    ++used;
  }
  return counts;
}

/// Disjoint-identity folds: each fold evaluates on its own block of
/// round((1 - split_fraction) * identities) shuffled identities.
inline std::vector<FoldSplit> make_folds(std::size_t identities, double split_fraction, std::size_t folds,
                                         std::uint64_t seed) {
  const auto train_count = static_cast<std::size_t>(std::llround(split_fraction * static_cast<double>(identities)));
  const std::size_t eval_count = identities - train_count;
  if (!eval_count || !train_count) throw std::invalid_argument("make_folds: split leaves an empty side");
  if (folds == 0 || folds * eval_count > identities)
    throw std::invalid_argument("make_folds: too few identities for " + std::to_string(folds) +
                                " disjoint eval sets of " + std::to_string(eval_count));
  std::vector<int> ids(identities);
  for (std::size_t i = 0; i < identities; ++i) ids[i] = static_cast<int>(i);
  std::mt19937_64 rng(seed ^ 0x5F0D5u);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<FoldSplit> out;
  for (std::size_t f = 0; f < folds; ++f) {
    FoldSplit s;
    s.fold = static_cast<int>(f);
    for (std::size_t i = 0; i < identities; ++i) {
      const bool is_eval = i >= f * eval_count && i < (f + 1) * eval_count;
      (is_eval ? s.eval : s.train).push_back(ids[i]);
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.eval.begin(), s.eval.end());
    out.push_back(std::move(s));
  }
  return out;
}

/// Renders one sample: the posed image and the frontal jittered cloud.
struct RenderedSample {
  Tensor image;  // (H, W, 1)
  Tensor cloud;  // (cloud_points, 3)
};

inline RenderedSample render_sample(const IdentityConstellation& c, const std::vector<std::size_t>& cloud_index,
                                    double yaw_deg, std::uint64_t sample_seed, const SyntheticConfig& cfg) {
  const PosedCloud frontal = pose_view(c, 0.0, cfg.jitter, sample_seed);
  const PosedCloud posed = pose_view(c, yaw_deg, cfg.jitter, sample_seed);
  RenderedSample out;
  out.image = render_lambertian(posed.points, posed.normals, c.albedo, cfg.light, cfg.image_size, cfg.image_size,
                                cfg.extent);
  std::vector<Vec3> sub;
  sub.reserve(cloud_index.size());
  for (std::size_t i : cloud_index) sub.push_back(frontal.points[i]);
  out.cloud = to_tensor(sub);
  return out;
}

/// Writes the full dataset under `out_dir` and returns its manifest.
inline Manifest build_dataset(const SyntheticConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "clouds", ec);
  if (ec || !fs::is_directory(out_dir / "images")) throw IoError("cannot create dataset directory " + out_dir.string());

  Manifest m;
  m.image_height = m.image_width = cfg.image_size;
  m.cloud_points = cfg.cloud_points;
  m.identities = cfg.identities;
  m.seed = cfg.seed;
  m.folds = make_folds(cfg.identities, cfg.split_fraction, cfg.folds, cfg.seed);

  const std::size_t probes = cfg.samples_per_identity - cfg.gallery_per_identity;
  const auto counts = allocate_bins(probes, cfg.pose_fractions);
  for (std::size_t id = 0; id < cfg.identities; ++id) {
    const auto ident = static_cast<int>(id);
    const IdentityConstellation c = sample_identity(cfg.seed, ident, cfg, cfg.render_points);
    const std::vector<std::size_t> index = farthest_point_sample(c.points, cfg.cloud_points);
    std::mt19937_64 rng(cfg.seed * 1000003ULL + id);
    std::vector<std::pair<double, SampleRole>> poses;
    std::uniform_real_distribution<double> frontal(kPoseBinEdges[0], kPoseBinEdges[1]);
    for (std::size_t g = 0; g < cfg.gallery_per_identity; ++g) poses.emplace_back(frontal(rng), SampleRole::kGallery);
    for (int b = 0; b < kNumPoseBins; ++b) {
      std::uniform_real_distribution<double> yaw(kPoseBinEdges[b], kPoseBinEdges[b + 1]);
      for (std::size_t i = 0; i < counts[b]; ++i) {
        double y = yaw(rng);
        if (pose_bin(y) != b) y = kPoseBinEdges[b];
        poses.emplace_back(y, SampleRole::kProbe);
      }
    }
    for (std::size_t s = 0; s < poses.size(); ++s) {
      const RenderedSample r = render_sample(c, index, poses[s].first, rng(), cfg);
      char stem[64];
      std::snprintf(stem, sizeof stem, "id%03zu_s%02zu", id, s);
      SampleRecord rec;
      rec.identity = ident;
      rec.pose_deg = poses[s].first;
      rec.bin = pose_bin(rec.pose_deg);
      rec.image = std::string("images/") + stem + ".img";
      rec.cloud = std::string("clouds/") + stem + ".cld";
      rec.role = poses[s].second;
      write_image(out_dir / rec.image, r.image);
      write_cloud(out_dir / rec.cloud, r.cloud);
      m.samples.push_back(std::move(rec));
    }
  }
  write_manifest(out_dir / "manifest.json", m);
  m.root = out_dir;
  return m;
}

}  // namespace jamje
