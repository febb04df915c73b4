#pragma once

// Desk-scale backbones and the shared compression head.
//
//   Encoder2D: repeated [2x2 space-to-depth -> 1x1 conv -> bias -> relu]
//   Encoder3D: shared per-point MLP -> max-pool -> linear -> reshape
//   Compression: 1x1 conv -> relu -> flatten -> fully connected
//
// Both encoders emit (B, H_F, W_F, C_F) so the joint attention can read
// either branch with one set of query/key weights.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "jamje/autodiff.hpp"
#include "jamje/jam.hpp"
#include "jamje/parameter.hpp"

namespace jamje {

struct EncoderDims {
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::size_t image_channels = 1;
  std::size_t points = 256;
  std::vector<std::size_t> conv_channels{8, 16, 32};
  std::size_t point_hidden1 = 64;
  std::size_t point_hidden2 = 128;
  std::size_t compress_channels = 8;
  std::size_t embedding = 64;

  std::size_t feature_height() const { return image_height >> conv_channels.size(); }
  std::size_t feature_width() const { return image_width >> conv_channels.size(); }
  std::size_t feature_channels() const { return conv_channels.back(); }
  std::size_t positions() const { return feature_height() * feature_width(); }

  void validate() const {
    if (conv_channels.empty()) throw std::invalid_argument("EncoderDims: need at least one conv block");
    const std::size_t f = std::size_t{1} << conv_channels.size();
    if (image_height % f || image_width % f || image_height < f || image_width < f)
      throw std::invalid_argument("EncoderDims: image dims must be divisible by 2^blocks");
    if (!points || !point_hidden1 || !point_hidden2 || !compress_channels || !embedding || !image_channels)
      throw std::invalid_argument("EncoderDims: zero dimension");
  }
};

struct Encoder2D {
  std::vector<ParamPtr> weights;
  std::vector<ParamPtr> biases;

  static Encoder2D create(const EncoderDims& d, std::mt19937_64& rng) {
    d.validate();
    Encoder2D e;
    std::size_t cin = d.image_channels;
    for (std::size_t i = 0; i < d.conv_channels.size(); ++i) {
      const std::size_t cout = d.conv_channels[i];
      e.weights.push_back(he_normal("enc2d.conv" + std::to_string(i) + ".w", 4 * cin, cout, rng));
      e.biases.push_back(zeros("enc2d.conv" + std::to_string(i) + ".b", Shape{cout}));
      cin = cout;
    }
    return e;
  }

  /// images (B, H, W, C) -> (B, H_F, W_F, C_F)
  ad::Var forward(ad::Var images, ParamBinding& bind) const {
    if (images.shape().size() != 4) throw ShapeError("encode_2d: expected (B,H,W,C), got " + to_string(images.shape()));
    if (images.shape()[3] * 4 != weights.front()->value.dim(0))
      throw ShapeError("encode_2d: image channels", images.shape(), weights.front()->value.shape());
    ad::Var x = images;
    for (std::size_t i = 0; i < weights.size(); ++i)
      x = ad::relu(ad::add_bias(ad::conv1x1(ad::space_to_depth(x, 2), bind(weights[i])), bind(biases[i])));
    return x;
  }

  std::vector<ParamPtr> parameters() const {
    std::vector<ParamPtr> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(weights[i]);
      out.push_back(biases[i]);
    }
    return out;
  }
};

struct Encoder3D {
  ParamPtr w1, b1, w2, b2, proj_w, proj_b;
  std::size_t points = 0;
  std::size_t feature_height = 0, feature_width = 0, feature_channels = 0;

  static Encoder3D create(const EncoderDims& d, std::mt19937_64& rng) {
    d.validate();
    Encoder3D e;
    const std::size_t out = d.positions() * d.feature_channels();
    e.w1 = he_normal("enc3d.point1.w", 3, d.point_hidden1, rng);
    e.b1 = zeros("enc3d.point1.b", Shape{d.point_hidden1});
    e.w2 = he_normal("enc3d.point2.w", d.point_hidden1, d.point_hidden2, rng);
    e.b2 = zeros("enc3d.point2.b", Shape{d.point_hidden2});
    e.proj_w = he_normal("enc3d.proj.w", d.point_hidden2, out, rng);
    e.proj_b = zeros("enc3d.proj.b", Shape{out});
    e.points = d.points;
    e.feature_height = d.feature_height();
    e.feature_width = d.feature_width();
    e.feature_channels = d.feature_channels();
    return e;
  }

  /// points (B, N, 3) -> (B, H_F, W_F, C_F)
  ad::Var forward(ad::Var cloud, ParamBinding& bind) const {
    const Shape s = cloud.shape();
    if (s.size() != 3 || s[1] != points || s[2] != 3)
      throw ShapeError("encode_3d: expected (B," + std::to_string(points) + ",3), got " + to_string(s));
    ad::Var h = ad::relu(ad::add_bias(ad::conv1x1(cloud, bind(w1)), bind(b1)));
    h = ad::relu(ad::add_bias(ad::conv1x1(h, bind(w2)), bind(b2)));
    ad::Var pooled = ad::max_over_points(h);
    ad::Var feat = ad::add_bias(ad::matmul(pooled, bind(proj_w)), bind(proj_b));
    return ad::reshape(feat, Shape{s[0], feature_height, feature_width, feature_channels});
  }

  std::vector<ParamPtr> parameters() const { return {w1, b1, w2, b2, proj_w, proj_b}; }
};

/// Shared between domains: a single storage read by both branches.
struct CompressionHead {
  ParamPtr conv_w, conv_b, fc_w, fc_b;

  static CompressionHead create(const EncoderDims& d, std::mt19937_64& rng) {
    d.validate();
    CompressionHead c;
    c.conv_w = he_normal("compress.conv.w", d.feature_channels(), d.compress_channels, rng);
    c.conv_b = zeros("compress.conv.b", Shape{d.compress_channels});
    c.fc_w = he_normal("compress.fc.w", d.positions() * d.compress_channels, d.embedding, rng, 1.0);
    c.fc_b = zeros("compress.fc.b", Shape{d.embedding});
    return c;
  }

  std::size_t embedding_dim() const { return fc_w->value.dim(1); }

  /// J (B, H_F, W_F, C_F) -> embeddings (B, E)
  ad::Var forward(ad::Var features, ParamBinding& bind) const {
    const Shape s = features.shape();
    if (s.size() != 4 || s[3] != conv_w->value.dim(0) ||
        s[1] * s[2] * conv_w->value.dim(1) != fc_w->value.dim(0))
      throw ShapeError("compress", s, conv_w->value.shape());
    ad::Var c = ad::relu(ad::add_bias(ad::conv1x1(features, bind(conv_w)), bind(conv_b)));
    ad::Var flat = ad::reshape(c, Shape{s[0], fc_w->value.dim(0)});
    return ad::add_bias(ad::matmul(flat, bind(fc_w)), bind(fc_b));
  }

  std::vector<ParamPtr> parameters() const { return {conv_w, conv_b, fc_w, fc_b}; }
};

// Single-sample wrappers.

inline FeatureMap encode_2d(const Tensor& image, const Encoder2D& enc) {
  if (image.rank() != 3) throw ShapeError("encode_2d: expected (H,W,C), got " + to_string(image.shape()));
  ad::Tape tape;
  ParamBinding bind(tape, false);
  ad::Var out = enc.forward(tape.constant(image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)})), bind);
  const Shape& s = out.shape();
  return FeatureMap{out.value().reshaped(Shape{s[1], s[2], s[3]})};
}

inline FeatureMap encode_3d(const Tensor& points, const Encoder3D& enc) {
  if (points.rank() != 2 || points.dim(1) != 3)
    throw ShapeError("encode_3d: expected (N,3), got " + to_string(points.shape()));
  ad::Tape tape;
  ParamBinding bind(tape, false);
  ad::Var out = enc.forward(tape.constant(points.reshaped(Shape{1, points.dim(0), 3})), bind);
  const Shape& s = out.shape();
  return FeatureMap{out.value().reshaped(Shape{s[1], s[2], s[3]})};
}

inline std::vector<double> compress(const FeatureMap& j, const CompressionHead& head) {
  ad::Tape tape;
  ParamBinding bind(tape, false);
  const Shape& s = j.values.shape();
  if (s.size() != 3) throw ShapeError("compress: expected (H,W,C), got " + to_string(s));
  ad::Var e = head.forward(tape.constant(j.values.reshaped(Shape{1, s[0], s[1], s[2]})), bind);
  return std::vector<double>(e.value().values().begin(), e.value().values().end());
}

}  // namespace jamje
