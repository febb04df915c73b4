#pragma once

// Finite-difference checks of every training loss term on a small model.

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "jamje/config.hpp"
#include "jamje/gradcheck.hpp"
#include "jamje/model.hpp"
#include "jamje/trainer.hpp"

namespace jamje {

struct GradSuiteEntry {
  std::string term;
  double max_relative_error = 0.0;
  std::size_t points = 0;
  double seconds = 0.0;
};

struct GradSuiteOptions {
  std::size_t points = 20;
  std::size_t coords_per_point = 24;
  double step = 1e-7;  // small enough that max-pool and min-max kinks are rarely straddled
  std::uint64_t seed = 1;
  MarginParams margin;
  BinningConfig binning;
  JointMode joint_mode = JointMode::kAligned;
};

namespace detail {

inline ExperimentConfig gradsuite_config(const GradSuiteOptions& o) {
  ExperimentConfig c;
  c.dataset.image_size = 16;
  c.dataset.cloud_points = 12;
  c.dims.image_height = c.dims.image_width = 16;
  c.dims.conv_channels = {4, 8};
  c.dims.points = 12;
  c.dims.point_hidden1 = 8;
  c.dims.point_hidden2 = 8;
  c.dims.compress_channels = 4;
  c.dims.embedding = 8;
  c.attention_channels = 4;
  c.margin = o.margin;
  c.binning = o.binning;
  c.binning.assignment = Assignment::kSoftTriangular;
  c.joint_mode = o.joint_mode;
  return c;
}

/// Every parameter of `model` laid end to end.
struct FlatParams {
  std::vector<ParamPtr> params;
  std::vector<std::size_t> offsets;
  Tensor values;
};

inline FlatParams flatten(const FaceModel& model) {
  FlatParams f;
  f.params = model.parameters();
  std::size_t n = 0;
  for (const ParamPtr& p : f.params) {
    f.offsets.push_back(n);
    n += p->value.size();
  }
  f.values = Tensor(Shape{n});
  for (std::size_t i = 0; i < f.params.size(); ++i)
    std::copy(f.params[i]->value.values().begin(), f.params[i]->value.values().end(), f.values.data() + f.offsets[i]);
  return f;
}

inline void bind_flat(ParamBinding& bind, const FlatParams& f, ad::Var x) {
  for (std::size_t i = 0; i < f.params.size(); ++i)
    bind.assign(f.params[i], ad::slice(x, f.offsets[i], f.params[i]->value.shape()));
}

}  // namespace detail

/// Runs the suite. Each term is differentiated with respect to every model
/// parameter it reads; a random subset of coordinates is perturbed per point.
inline std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& opt = {}) {
  const ExperimentConfig cfg = detail::gradsuite_config(opt);
  const std::size_t batch = 3, classes = 4;
  enum class Term { k2D, k3D, kJE, kTotal };
  const std::vector<std::pair<std::string, Term>> terms{
      {"L_2D", Term::k2D}, {"L_3D", Term::k3D}, {"L_JE(soft)", Term::kJE}, {"L_total", Term::kTotal}};

  std::vector<GradSuiteEntry> out;
  for (const auto& [name, term] : terms) {
    const auto t0 = std::chrono::steady_clock::now();
    GradSuiteEntry e{name, 0.0, 0, 0.0};
    for (std::size_t pt = 0; pt < opt.points; ++pt) {
      std::mt19937_64 rng(mix_seed(opt.seed, static_cast<std::uint64_t>(term), pt));
      FaceModel model = FaceModel::create(model_config(cfg, classes), rng());
      std::normal_distribution<double> gauss(0.0, 1.0);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      // Non-zero gamma so the attention path carries gradient, and positive
      // biases so no feature position is exactly zero. Dead positions tie in
      // the attention map, where min-max normalization has a kink.
      for (const ParamPtr& p : model.parameters())
        if (p->name.size() > 2 && p->name.compare(p->name.size() - 2, 2, ".b") == 0)
          for (double& v : p->value.values()) v = 0.05 + 0.25 * unit(rng);
      model.jam.gamma_2d->value[0] = 0.5 + unit(rng);
      model.jam.gamma_3d->value[0] = 0.5 + unit(rng);
      Tensor images(Shape{batch, cfg.dims.image_height, cfg.dims.image_width, 1});
      for (double& v : images.values()) v = unit(rng);
      Tensor clouds(Shape{batch, cfg.dims.points, 3});
      for (double& v : clouds.values()) v = gauss(rng);
      std::vector<std::size_t> labels(batch);
      for (auto& y : labels) y = rng() % classes;

      const detail::FlatParams flat = detail::flatten(model);
      auto f = [&, term = term](ad::Tape& tape, ad::Var x) {
        ParamBinding bind(tape, true);
        detail::bind_flat(bind, flat, x);
        const bool jam = term != Term::k2D;
        ad::Var loss;
        if (term == Term::k2D) {
          BranchOutput o2 = forward_2d(model, tape.constant(images), false, bind);
          loss = domain_loss(o2.embeddings, model.head2d, labels, cfg.margin, bind);
        } else if (term == Term::k3D) {
          BranchOutput o3 = forward_3d(model, tape.constant(clouds), jam, bind);
          loss = domain_loss(o3.embeddings, model.head3d, labels, cfg.margin, bind);
        } else if (term == Term::kJE) {
          BranchOutput o2 = forward_2d(model, tape.constant(images), true, bind);
          BranchOutput o3 = forward_3d(model, tape.constant(clouds), true, bind);
          loss = je_loss(*o2.attention, *o3.attention, cfg.binning, cfg.joint_mode);
        } else {
          StepLosses parts;
          loss = batch_objective(model, cfg, bind, images, &clouds, labels, parts, false);
        }
        return loss;
      };

      // Restrict perturbations to coordinates the term actually reads.
      std::vector<std::size_t> used;
      {
        ad::Tape tape;
        ad::Var x = tape.leaf(flat.values);
        ad::Var loss = f(tape, x);
        const ad::Gradients grads = tape.backward(loss);
        const Tensor& g = grads[x];
        for (std::size_t i = 0; i < g.size(); ++i)
          if (g[i] != 0.0) used.push_back(i);
      }
      std::shuffle(used.begin(), used.end(), rng);
      if (used.size() > opt.coords_per_point) used.resize(opt.coords_per_point);
      const ad::GradCheckResult r = ad::grad_check_detailed(f, flat.values, opt.step, used);
      e.max_relative_error = std::max(e.max_relative_error, r.max_relative_error);
      ++e.points;
    }
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(e);
  }
  return out;
}

}  // namespace jamje
