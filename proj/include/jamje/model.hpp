#pragma once

// The full two-branch network: encoders, joint attention, shared compression
// and one AdaFace head per domain.

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "jamje/adaface.hpp"
#include "jamje/encoders.hpp"
#include "jamje/jam.hpp"
#include "jamje/joint_entropy.hpp"

namespace jamje {

struct ModelConfig {
  EncoderDims dims;
  std::size_t attention_channels = 16;
  bool tie_gamma = true;
  std::size_t classes = 1;
};

struct FaceModel {
  Encoder2D enc2d;
  Encoder3D enc3d;
  JamParams jam;
  CompressionHead compression;
  ClassifierHead head2d;
  ClassifierHead head3d;

  static FaceModel create(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    FaceModel m;
    m.enc2d = Encoder2D::create(cfg.dims, rng);
    m.enc3d = Encoder3D::create(cfg.dims, rng);
    m.jam = JamParams::create(JamConfig{cfg.dims.feature_channels(), cfg.attention_channels, cfg.tie_gamma}, rng);
    m.compression = CompressionHead::create(cfg.dims, rng);
    m.head2d = ClassifierHead::create("head2d.w", cfg.classes, cfg.dims.embedding, rng);
    m.head3d = ClassifierHead::create("head3d.w", cfg.classes, cfg.dims.embedding, rng);
    return m;
  }

  /// Every distinct parameter storage in a stable order.
  std::vector<ParamPtr> parameters() const {
    std::vector<ParamPtr> out;
    for (const auto& group : {enc2d.parameters(), enc3d.parameters(), jam.parameters(), compression.parameters()})
      for (const ParamPtr& p : group) append_unique(out, p);
    append_unique(out, head2d.weights);
    append_unique(out, head3d.weights);
    return out;
  }

  ClassifierHead& head(Domain d) { return d == Domain::k2D ? head2d : head3d; }
  const ClassifierHead& head(Domain d) const { return d == Domain::k2D ? head2d : head3d; }
};

/// Output of one branch on a batch.
struct BranchOutput {
  ad::Var features;                  // backbone output z
  std::optional<ad::Var> attention;  // present when the joint attention is enabled
  ad::Var embeddings;                // (B, E)
};

/// images (B, H, W, C) -> embeddings through encode_2d -> [jam 2D] -> compress.
inline BranchOutput forward_2d(const FaceModel& m, ad::Var images, bool use_jam, ParamBinding& bind) {
  BranchOutput out;
  out.features = m.enc2d.forward(images, bind);
  ad::Var j = out.features;
  if (use_jam) {
    JamOutput jo = jam_forward(out.features, m.jam, Domain::k2D, bind);
    j = jo.features;
    out.attention = jo.attention;
  }
  out.embeddings = m.compression.forward(j, bind);
  return out;
}

/// clouds (B, N, 3) -> embeddings through encode_3d -> [jam 3D] -> compress.
inline BranchOutput forward_3d(const FaceModel& m, ad::Var clouds, bool use_jam, ParamBinding& bind) {
  BranchOutput out;
  out.features = m.enc3d.forward(clouds, bind);
  ad::Var j = out.features;
  if (use_jam) {
    JamOutput jo = jam_forward(out.features, m.jam, Domain::k3D, bind);
    j = jo.features;
    out.attention = jo.attention;
  }
  out.embeddings = m.compression.forward(j, bind);
  return out;
}

}  // namespace jamje
