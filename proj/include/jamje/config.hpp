#pragma once

// Experiment configuration. Every key is optional in the JSON file; a missing
// key takes the default below, an unknown key is an error.
//
// {
//   "dataset":  synthetic generator settings (see SyntheticConfig) plus "path"
//   "model":    encoder dims, attention channels, gamma tying
//   "binning":  bins, normalization, assignment, kernel_width, joint_mode
//   "margin":   m, h, t_alpha, s
//   "optimizer": lr, weight_decay, momentum, milestones, decay
//   "batch_size", "reference_batch_size", "max_epochs",
//   "early_stopping": patience, min_epochs
//   "ablation": enable_jam, enable_je
//   "loss_weights": l2d, l3d, lje
//   "eval":     far_target, fusion, average
//   "validation_fraction", "seed", "folds", "threads"
// }

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jamje/adaface.hpp"
#include "jamje/encoders.hpp"
#include "jamje/joint_entropy.hpp"
#include "jamje/metrics.hpp"
#include "jamje/synthetic.hpp"

namespace jamje {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct OptimizerConfig {
  double lr = 0.001;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::vector<int> milestones{8, 12, 14};
  double decay = 0.1;

  /// Step schedule over 0-based epochs; the drop takes effect at the milestone epoch itself.
  double lr_at(int epoch) const {
    double lr_e = lr;
    for (int m : milestones)
      if (epoch >= m) lr_e *= decay;
    return lr_e;
  }
};

struct EarlyStopping {
  int patience = 9;
  int min_epochs = 10;
};

struct AblationFlags {
  bool enable_jam = true;
  bool enable_je = true;
};

struct EvalConfig {
  double far_target = 0.01;
  GalleryFusion fusion = GalleryFusion::kMax;
  BinAverage average = BinAverage::kBinMean;
};

struct ExperimentConfig {
  SyntheticConfig dataset;
  std::string dataset_path = "data";
  EncoderDims dims;
  std::size_t attention_channels = 16;
  bool tie_gamma = true;
  BinningConfig binning;
  JointMode joint_mode = JointMode::kAligned;
  MarginParams margin;
  OptimizerConfig optimizer;
  std::size_t batch_size = 16;
  std::size_t reference_batch_size = 64;  // documentation only
  int max_epochs = 20;
  EarlyStopping early_stopping;
  AblationFlags ablation;
  LossWeights loss_weights;
  EvalConfig eval;
  double validation_fraction = 0.2;
  std::uint64_t seed = 7;
  std::size_t folds = 3;
  std::size_t threads = 1;

  void validate() const {
    dataset.validate();
    dims.validate();
    binning.validate();
    margin.validate();
    if (dims.image_height != dataset.image_size || dims.image_width != dataset.image_size || dims.image_channels != 1)
      throw ConfigError("config: model image dims must match dataset.image_size with one channel");
    if (dims.points != dataset.cloud_points) throw ConfigError("config: model.points must equal dataset.cloud_points");
    if (!attention_channels) throw ConfigError("config: attention_channels must be > 0");
    if (!batch_size) throw ConfigError("config: batch_size must be > 0");
    if (max_epochs < 1) throw ConfigError("config: max_epochs must be >= 1");
    if (!(optimizer.lr > 0.0)) throw ConfigError("config: optimizer.lr must be > 0");
    if (optimizer.weight_decay < 0.0 || optimizer.momentum < 0.0 || optimizer.momentum >= 1.0)
      throw ConfigError("config: bad weight_decay or momentum");
    if (!(optimizer.decay > 0.0 && optimizer.decay <= 1.0)) throw ConfigError("config: optimizer.decay in (0,1]");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
      throw ConfigError("config: validation_fraction in (0,1)");
    if (ablation.enable_je && !ablation.enable_jam)
      throw ConfigError("config: enable_je requires enable_jam (the entropy term reads attention maps)");
    if (!folds) throw ConfigError("config: folds must be >= 1");
    if (!threads) throw ConfigError("config: threads must be >= 1");
    if (!(eval.far_target > 0.0 && eval.far_target < 1.0)) throw ConfigError("config: eval.far_target in (0,1)");
  }
};

namespace detail {

/// Reads optional keys from one JSON object and rejects leftovers.
class KeyReader {
 public:
  KeyReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("config: " + where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: bad value for " + where_ + key);
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key " + where_ + k);
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class E>
E parse_enum(const std::string& v, std::initializer_list<std::pair<const char*, E>> table, const char* key) {
  for (const auto& [name, e] : table)
    if (v == name) return e;
  throw ConfigError(std::string("config: bad value for ") + key + ": " + v);
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const SyntheticConfig& d = c.dataset;
  json j;
  j["dataset"] = {{"path", c.dataset_path},
                  {"identities", d.identities},
                  {"samples_per_identity", d.samples_per_identity},
                  {"gallery_per_identity", d.gallery_per_identity},
                  {"render_points", d.render_points},
                  {"cloud_points", d.cloud_points},
                  {"image_size", d.image_size},
                  {"jitter", d.jitter},
                  {"split_fraction", d.split_fraction},
                  {"pose_fractions", d.pose_fractions},
                  {"light", {d.light.x, d.light.y, d.light.z}},
                  {"bumps", d.bumps},
                  {"bump_amplitude", d.bump_amplitude},
                  {"extent", d.extent},
                  {"seed", d.seed}};
  j["model"] = {{"conv_channels", c.dims.conv_channels},
                {"point_hidden1", c.dims.point_hidden1},
                {"point_hidden2", c.dims.point_hidden2},
                {"compress_channels", c.dims.compress_channels},
                {"embedding", c.dims.embedding},
                {"attention_channels", c.attention_channels},
                {"tie_gamma", c.tie_gamma}};
  j["binning"] = {{"bins", c.binning.bins},
                  {"normalization", c.binning.normalization == Normalization::kPerMapMinMax ? "per_map_minmax" : "fixed_unit"},
                  {"assignment", c.binning.assignment == Assignment::kSoftTriangular ? "soft" : "hard"},
                  {"kernel_width", c.binning.kernel_width},
                  {"joint_mode", c.joint_mode == JointMode::kAligned ? "aligned" : "pairwise_literal"}};
  j["margin"] = {{"m", c.margin.m}, {"h", c.margin.h}, {"t_alpha", c.margin.t_alpha}, {"s", c.margin.s}};
  j["optimizer"] = {{"kind", "sgd"},
                    {"lr", c.optimizer.lr},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"momentum", c.optimizer.momentum},
                    {"milestones", c.optimizer.milestones},
                    {"decay", c.optimizer.decay}};
  j["batch_size"] = c.batch_size;
  j["reference_batch_size"] = c.reference_batch_size;
  j["max_epochs"] = c.max_epochs;
  j["early_stopping"] = {{"patience", c.early_stopping.patience}, {"min_epochs", c.early_stopping.min_epochs}};
  j["ablation"] = {{"enable_jam", c.ablation.enable_jam}, {"enable_je", c.ablation.enable_je}};
  j["loss_weights"] = {{"l2d", c.loss_weights.l2d}, {"l3d", c.loss_weights.l3d}, {"lje", c.loss_weights.lje}};
  j["eval"] = {{"far_target", c.eval.far_target},
               {"fusion", c.eval.fusion == GalleryFusion::kMax ? "max" : "mean"},
               {"average", c.eval.average == BinAverage::kBinMean ? "bin_mean" : "probe_weighted"}};
  j["validation_fraction"] = c.validation_fraction;
  j["seed"] = c.seed;
  j["folds"] = c.folds;
  j["threads"] = c.threads;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::KeyReader;
  ExperimentConfig c;
  KeyReader top(j, "");
  if (const auto* ds = top.child("dataset")) {
    KeyReader r(*ds, "dataset.");
    SyntheticConfig& d = c.dataset;
    r.get("path", c.dataset_path);
    r.get("identities", d.identities);
    r.get("samples_per_identity", d.samples_per_identity);
    r.get("gallery_per_identity", d.gallery_per_identity);
    r.get("render_points", d.render_points);
    r.get("cloud_points", d.cloud_points);
    r.get("image_size", d.image_size);
    r.get("jitter", d.jitter);
    r.get("split_fraction", d.split_fraction);
    r.get("pose_fractions", d.pose_fractions);
    std::array<double, 3> light{d.light.x, d.light.y, d.light.z};
    r.get("light", light);
    d.light = {light[0], light[1], light[2]};
    r.get("bumps", d.bumps);
    r.get("bump_amplitude", d.bump_amplitude);
    r.get("extent", d.extent);
    r.get("seed", d.seed);
    r.finish();
  }
  if (const auto* m = top.child("model")) {
    KeyReader r(*m, "model.");
    r.get("conv_channels", c.dims.conv_channels);
    r.get("point_hidden1", c.dims.point_hidden1);
    r.get("point_hidden2", c.dims.point_hidden2);
    r.get("compress_channels", c.dims.compress_channels);
    r.get("embedding", c.dims.embedding);
    r.get("attention_channels", c.attention_channels);
    r.get("tie_gamma", c.tie_gamma);
    r.finish();
  }
  if (const auto* b = top.child("binning")) {
    KeyReader r(*b, "binning.");
    std::string norm = "per_map_minmax", assign = "soft", mode = "aligned";
    r.get("bins", c.binning.bins);
    r.get("normalization", norm);
    r.get("assignment", assign);
    r.get("kernel_width", c.binning.kernel_width);
    r.get("joint_mode", mode);
    c.binning.normalization = detail::parse_enum<Normalization>(
        norm, {{"per_map_minmax", Normalization::kPerMapMinMax}, {"fixed_unit", Normalization::kFixedUnit}},
        "binning.normalization");
    c.binning.assignment = detail::parse_enum<Assignment>(
        assign, {{"soft", Assignment::kSoftTriangular}, {"hard", Assignment::kHard}}, "binning.assignment");
    c.joint_mode = detail::parse_enum<JointMode>(
        mode, {{"aligned", JointMode::kAligned}, {"pairwise_literal", JointMode::kPairwiseLiteral}}, "binning.joint_mode");
    r.finish();
  }
  if (const auto* m = top.child("margin")) {
    KeyReader r(*m, "margin.");
    r.get("m", c.margin.m);
    r.get("h", c.margin.h);
    r.get("t_alpha", c.margin.t_alpha);
    r.get("s", c.margin.s);
    r.finish();
  }
  if (const auto* o = top.child("optimizer")) {
    KeyReader r(*o, "optimizer.");
    std::string kind = "sgd";
    r.get("kind", kind);
    if (kind != "sgd") throw ConfigError("config: optimizer.kind must be sgd");
    r.get("lr", c.optimizer.lr);
    r.get("weight_decay", c.optimizer.weight_decay);
    r.get("momentum", c.optimizer.momentum);
    r.get("milestones", c.optimizer.milestones);
    r.get("decay", c.optimizer.decay);
    r.finish();
  }
  top.get("batch_size", c.batch_size);
  top.get("reference_batch_size", c.reference_batch_size);
  top.get("max_epochs", c.max_epochs);
  if (const auto* e = top.child("early_stopping")) {
    KeyReader r(*e, "early_stopping.");
    r.get("patience", c.early_stopping.patience);
    r.get("min_epochs", c.early_stopping.min_epochs);
    r.finish();
  }
  if (const auto* a = top.child("ablation")) {
    KeyReader r(*a, "ablation.");
    r.get("enable_jam", c.ablation.enable_jam);
    r.get("enable_je", c.ablation.enable_je);
    r.finish();
  }
  if (const auto* w = top.child("loss_weights")) {
    KeyReader r(*w, "loss_weights.");
    r.get("l2d", c.loss_weights.l2d);
    r.get("l3d", c.loss_weights.l3d);
    r.get("lje", c.loss_weights.lje);
    r.finish();
  }
  if (const auto* e = top.child("eval")) {
    KeyReader r(*e, "eval.");
    std::string fusion = "max", average = "bin_mean";
    r.get("far_target", c.eval.far_target);
    r.get("fusion", fusion);
    r.get("average", average);
    c.eval.fusion = detail::parse_enum<GalleryFusion>(fusion, {{"max", GalleryFusion::kMax}, {"mean", GalleryFusion::kMean}}, "eval.fusion");
    c.eval.average = detail::parse_enum<BinAverage>(
        average, {{"bin_mean", BinAverage::kBinMean}, {"probe_weighted", BinAverage::kProbeWeighted}}, "eval.average");
    r.finish();
  }
  top.get("validation_fraction", c.validation_fraction);
  top.get("seed", c.seed);
  top.get("folds", c.folds);
  top.get("threads", c.threads);
  top.finish();

  c.dataset.folds = c.folds;
  c.dims.image_height = c.dims.image_width = c.dataset.image_size;
  c.dims.points = c.dataset.cloud_points;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot read config file " + p.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + p.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const fs::path& p, const ExperimentConfig& c) {
  auto os = detail::open_out(p);
  os << to_json(c).dump(2) << '\n';
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Fingerprint of everything that shapes training. Thread count is excluded.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("threads");
  return fnv1a(j.dump());
}

}  // namespace jamje
