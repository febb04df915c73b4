#pragma once

// 2D-3D joint attention mapping.
//
//   A_d = softmax_rows( Q(z_d) K(z_d)^T )        (P x P, P = H_F * W_F)
//   J_d = gamma_d * A_d V_d(z_d) + z_d
//
// Q and K are 1x1 convolutions whose weights are one storage read by both
// domains; V_d is per domain. Attention is spatial: rows and columns index
// the flattened feature positions, channels are the feature axis.

#include <random>
#include <string>
#include <utility>

#include "jamje/autodiff.hpp"
#include "jamje/parameter.hpp"

namespace jamje {

enum class Domain { k2D = 0, k3D = 1 };

inline const char* domain_name(Domain d) { return d == Domain::k2D ? "2d" : "3d"; }

/// Backbone output for a single sample, row-major (H_F, W_F, C_F).
struct FeatureMap {
  Tensor values;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }
  std::size_t positions() const { return height() * width(); }
};

/// Row-stochastic P x P attention of one sample in one domain.
struct AttentionMap {
  Tensor values;
  Domain domain = Domain::k2D;

  std::size_t positions() const { return values.dim(0); }
};

struct JamConfig {
  std::size_t channels = 32;            // C_F
  std::size_t attention_channels = 16;  // C_a
  bool tie_gamma = true;
};

struct JamParams {
  ParamPtr query_2d, query_3d;
  ParamPtr key_2d, key_3d;
  ParamPtr value_2d, value_3d;
  ParamPtr gamma_2d, gamma_3d;

  static JamParams create(const JamConfig& cfg, std::mt19937_64& rng) {
    if (cfg.channels == 0 || cfg.attention_channels == 0) throw std::invalid_argument("JamConfig: zero channels");
    JamParams p;
    p.query_2d = p.query_3d = he_normal("jam.query", cfg.channels, cfg.attention_channels, rng, 1.0);
    p.key_2d = p.key_3d = he_normal("jam.key", cfg.channels, cfg.attention_channels, rng, 1.0);
    p.value_2d = he_normal("jam.value_2d", cfg.channels, cfg.channels, rng, 1.0);
    p.value_3d = he_normal("jam.value_3d", cfg.channels, cfg.channels, rng, 1.0);
    if (cfg.tie_gamma) {
      p.gamma_2d = p.gamma_3d = zeros("jam.gamma", Shape{1});
    } else {
      p.gamma_2d = zeros("jam.gamma_2d", Shape{1});
      p.gamma_3d = zeros("jam.gamma_3d", Shape{1});
    }
    return p;
  }

  const ParamPtr& query(Domain d) const { return d == Domain::k2D ? query_2d : query_3d; }
  const ParamPtr& key(Domain d) const { return d == Domain::k2D ? key_2d : key_3d; }
  const ParamPtr& value(Domain d) const { return d == Domain::k2D ? value_2d : value_3d; }
  const ParamPtr& gamma(Domain d) const { return d == Domain::k2D ? gamma_2d : gamma_3d; }

  std::size_t channels() const { return query_2d->value.dim(0); }
  std::size_t attention_channels() const { return query_2d->value.dim(1); }

  std::vector<ParamPtr> parameters() const {
    std::vector<ParamPtr> out;
    for (const ParamPtr& p : {query_2d, query_3d, key_2d, key_3d, value_2d, value_3d, gamma_2d, gamma_3d})
      append_unique(out, p);
    return out;
  }
};

/// True iff both domains read the very same query and key storage.
inline bool shared_parameter_audit(const JamParams& p) {
  return p.query_2d && p.key_2d && p.query_2d.get() == p.query_3d.get() && p.key_2d.get() == p.key_3d.get();
}

struct JamOutput {
  ad::Var features;   // (B, H_F, W_F, C_F)
  ad::Var attention;  // (B, P, P)
};

/// Batched joint attention on z of shape (B, H_F, W_F, C_F).
inline JamOutput jam_forward(ad::Var z, const JamParams& params, Domain domain, ParamBinding& bind) {
  const Shape s = z.shape();
  if (s.size() != 4 || s[3] != params.channels())
    throw ShapeError("jam_forward: feature map " + to_string(s) + " vs channels " + std::to_string(params.channels()));
  const std::size_t batch = s[0], positions = s[1] * s[2], channels = s[3];

  ad::Var flat = ad::reshape(z, Shape{batch, positions, channels});
  ad::Var q = ad::conv1x1(flat, bind(params.query(domain)));
  ad::Var k = ad::conv1x1(flat, bind(params.key(domain)));
  ad::Var attention = ad::softmax_rows(ad::matmul(q, ad::transpose(k)));
  ad::Var v = ad::conv1x1(flat, bind(params.value(domain)));
  ad::Var attended = ad::mul_scalar(ad::matmul(attention, v), bind(params.gamma(domain)));
  ad::Var out = ad::reshape(ad::add(attended, flat), s);
  return {out, attention};
}

/// Single-sample convenience wrapper evaluated on a private tape.
inline std::pair<FeatureMap, AttentionMap> jam_forward(const FeatureMap& z, const JamParams& params, Domain domain) {
  if (z.values.rank() != 3) throw ShapeError("jam_forward: expected (H,W,C), got " + to_string(z.values.shape()));
  ad::Tape tape;
  ParamBinding bind(tape, false);
  Shape batched{1, z.height(), z.width(), z.channels()};
  JamOutput out = jam_forward(tape.constant(z.values.reshaped(batched)), params, domain, bind);
  const std::size_t p = z.positions();
  return {FeatureMap{out.features.value().reshaped(z.values.shape())},
          AttentionMap{out.attention.value().reshaped(Shape{p, p}), domain}};
}

}  // namespace jamje
