#pragma once

// On-disk formats.
//
//   image: u32 height, u32 width, then height*width float32 (row-major)
//   cloud: u32 count, then count*3 float32 (x, y, z per point)
//   manifest.json: dataset description, one record per sample, fold splits
//
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jamje/tensor.hpp"

namespace jamje {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Process-wide record of every data file opened for reading.
class FileAccessLog {
 public:
  static FileAccessLog& instance() {
    static FileAccessLog log;
    return log;
  }

  void record(const fs::path& p) {
    std::lock_guard lock(mu_);
    opened_.push_back(p.lexically_normal().string());
  }

  std::vector<std::string> snapshot() const {
    std::lock_guard lock(mu_);
    return opened_;
  }

  void clear() {
    std::lock_guard lock(mu_);
    opened_.clear();
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::string> opened_;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw IoError("unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, double v) { put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
inline double get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

inline std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  return os;
}

inline std::ifstream open_in(const fs::path& p) {
  FileAccessLog::instance().record(p);
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  return is;
}

}  // namespace detail

/// Writes an (H, W) or (H, W, 1) image.
inline void write_image(const fs::path& p, const Tensor& img) {
  if (img.rank() < 2 || (img.rank() == 3 && img.dim(2) != 1) || img.rank() > 3)
    throw ShapeError("write_image: expected (H,W[,1]), got " + to_string(img.shape()));
  auto os = detail::open_out(p);
  detail::put_u32(os, static_cast<std::uint32_t>(img.dim(0)));
  detail::put_u32(os, static_cast<std::uint32_t>(img.dim(1)));
  for (double v : img.values()) detail::put_f32(os, v);
  if (!os) throw IoError("write failed: " + p.string());
}

/// Reads an image as (H, W, 1).
inline Tensor read_image(const fs::path& p) {
  auto is = detail::open_in(p);
  const std::size_t h = detail::get_u32(is), w = detail::get_u32(is);
  if (!h || !w || h > 1u << 14 || w > 1u << 14) throw IoError("bad image header in " + p.string());
  Tensor img(Shape{h, w, 1});
  for (double& v : img.values()) v = detail::get_f32(is);
  return img;
}

inline void write_cloud(const fs::path& p, const Tensor& cloud) {
  if (cloud.rank() != 2 || cloud.dim(1) != 3)
    throw ShapeError("write_cloud: expected (N,3), got " + to_string(cloud.shape()));
  auto os = detail::open_out(p);
  detail::put_u32(os, static_cast<std::uint32_t>(cloud.dim(0)));
  for (double v : cloud.values()) detail::put_f32(os, v);
  if (!os) throw IoError("write failed: " + p.string());
}

inline Tensor read_cloud(const fs::path& p) {
  auto is = detail::open_in(p);
  const std::size_t n = detail::get_u32(is);
  if (!n || n > 1u << 22) throw IoError("bad cloud header in " + p.string());
  Tensor cloud(Shape{n, 3});
  for (double& v : cloud.values()) v = detail::get_f32(is);
  return cloud;
}

inline constexpr int kNumPoseBins = 5;
inline constexpr std::array<const char*, kNumPoseBins> kPoseBinLabels{"0-10", "10-30", "30-60", "60-90", "90+"};
inline constexpr std::array<double, kNumPoseBins + 1> kPoseBinEdges{0.0, 10.0, 30.0, 60.0, 90.0, 120.0};

/// Yaw in degrees to bin index; negative yaw is treated by magnitude.
inline int pose_bin(double yaw_deg) {
  const double a = std::abs(yaw_deg);
  for (int b = kNumPoseBins - 1; b > 0; --b)
    if (a >= kPoseBinEdges[b]) return b;
  return 0;
}

enum class SampleRole { kGallery, kProbe };

struct SampleRecord {
  int identity = 0;
  double pose_deg = 0.0;
  int bin = 0;
  std::string image;  // relative to the manifest directory
  std::string cloud;
  SampleRole role = SampleRole::kProbe;
};

struct FoldSplit {
  int fold = 0;
  std::vector<int> train;
  std::vector<int> eval;
};

struct Manifest {
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::size_t cloud_points = 0;
  std::size_t identities = 0;
  std::uint64_t seed = 0;
  std::vector<SampleRecord> samples;
  std::vector<FoldSplit> folds;
  fs::path root;  // directory holding the manifest; not serialized
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json j;
  j["format"] = "jamje-dataset";
  j["version"] = 1;
  j["image_height"] = m.image_height;
  j["image_width"] = m.image_width;
  j["cloud_points"] = m.cloud_points;
  j["identities"] = m.identities;
  j["seed"] = m.seed;
  auto& samples = j["samples"] = nlohmann::json::array();
  for (const SampleRecord& s : m.samples)
    samples.push_back({{"id", s.identity},
                       {"pose_deg", s.pose_deg},
                       {"bin", s.bin},
                       {"image", s.image},
                       {"cloud", s.cloud},
                       {"role", s.role == SampleRole::kGallery ? "gallery" : "probe"}});
  auto& folds = j["folds"] = nlohmann::json::array();
  for (const FoldSplit& f : m.folds) folds.push_back({{"fold", f.fold}, {"train", f.train}, {"eval", f.eval}});
  return j;
}

inline void write_manifest(const fs::path& p, const Manifest& m) {
  auto os = detail::open_out(p);
  os << to_json(m).dump(1) << '\n';
  if (!os) throw IoError("write failed: " + p.string());
}

inline Manifest read_manifest(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot read manifest " + p.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + p.string() + ": " + e.what());
  }
  if (j.value("format", "") != "jamje-dataset") throw IoError("not a dataset manifest: " + p.string());
  Manifest m;
  m.image_height = j.at("image_height");
  m.image_width = j.at("image_width");
  m.cloud_points = j.at("cloud_points");
  m.identities = j.at("identities");
  m.seed = j.at("seed");
  for (const auto& s : j.at("samples")) {
    SampleRecord r;
    r.identity = s.at("id");
    r.pose_deg = s.at("pose_deg");
    r.bin = s.at("bin");
    r.image = s.at("image");
    r.cloud = s.at("cloud");
    r.role = s.at("role") == "gallery" ? SampleRole::kGallery : SampleRole::kProbe;
    if (r.bin != pose_bin(r.pose_deg)) throw IoError("manifest: bin inconsistent with pose for " + r.image);
    m.samples.push_back(std::move(r));
  }
  for (const auto& f : j.at("folds"))
    m.folds.push_back(FoldSplit{f.at("fold"), f.at("train").get<std::vector<int>>(), f.at("eval").get<std::vector<int>>()});
  m.root = p.parent_path();
  return m;
}

}  // namespace jamje
