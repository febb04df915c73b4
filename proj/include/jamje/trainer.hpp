#pragma once

// Training, 2D-only evaluation, fold aggregation and ablation.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "jamje/checkpoint.hpp"
#include "jamje/config.hpp"
#include "jamje/io.hpp"
#include "jamje/metrics.hpp"
#include "jamje/model.hpp"

namespace jamje {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

/// Identities used by one fold.
struct FoldPlan {
  int fold = 0;
  std::vector<int> train;       // classifier classes, in label order
  std::vector<int> validation;  // held out from training, used for early stopping
  std::vector<int> eval;
};

inline FoldPlan plan_fold(const Manifest& m, int fold, double validation_fraction, std::uint64_t seed) {
  if (fold < 0 || static_cast<std::size_t>(fold) >= m.folds.size())
    throw TrainingError("fold " + std::to_string(fold) + " not in manifest (" + std::to_string(m.folds.size()) +
                        " folds)");
  const FoldSplit& split = m.folds[fold];
  std::vector<int> ids = split.train;
  std::mt19937_64 rng(mix_seed(seed, 0x7a11, static_cast<std::uint64_t>(fold)));
  std::shuffle(ids.begin(), ids.end(), rng);
  auto nval = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(ids.size())));
  // Two identities minimum, otherwise validation has no impostor pairs to score.
  nval = std::clamp<std::size_t>(nval, std::min<std::size_t>(2, ids.size() - 1), ids.size() - 1);
  FoldPlan plan;
  plan.fold = fold;
  plan.validation.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(nval));
  plan.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(nval), ids.end());
  std::sort(plan.validation.begin(), plan.validation.end());
  std::sort(plan.train.begin(), plan.train.end());
  plan.eval = split.eval;
  return plan;
}

inline ModelConfig model_config(const ExperimentConfig& cfg, std::size_t classes) {
  ModelConfig mc;
  mc.dims = cfg.dims;
  mc.attention_channels = cfg.attention_channels;
  mc.tie_gamma = cfg.tie_gamma;
  mc.classes = classes;
  return mc;
}

inline void check_manifest(const Manifest& m, const ExperimentConfig& cfg) {
  if (m.image_height != cfg.dims.image_height || m.image_width != cfg.dims.image_width)
    throw TrainingError("dataset/config mismatch: images are " + std::to_string(m.image_height) + "x" +
                        std::to_string(m.image_width) + ", model expects " + std::to_string(cfg.dims.image_height) +
                        "x" + std::to_string(cfg.dims.image_width));
  if (m.cloud_points != cfg.dims.points)
    throw TrainingError("dataset/config mismatch: clouds have " + std::to_string(m.cloud_points) +
                        " points, model expects " + std::to_string(cfg.dims.points));
  if (m.folds.size() < cfg.folds)
    throw TrainingError("dataset/config mismatch: manifest has " + std::to_string(m.folds.size()) + " folds, config asks for " +
                        std::to_string(cfg.folds));
}

inline std::vector<std::size_t> samples_of(const Manifest& m, const std::vector<int>& ids,
                                           std::optional<SampleRole> role = std::nullopt) {
  std::vector<bool> want(m.identities, false);
  for (int id : ids) want.at(static_cast<std::size_t>(id)) = true;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.samples.size(); ++i)
    if (want.at(static_cast<std::size_t>(m.samples[i].identity)) && (!role || m.samples[i].role == *role))
      out.push_back(i);
  return out;
}

/// Stacks same-shape tensors along a new leading axis.
inline Tensor stack(const std::vector<const Tensor*>& items) {
  Shape s{items.size()};
  for (std::size_t d : items.front()->shape()) s.push_back(d);
  Tensor out(s);
  const std::size_t n = items.front()->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != items.front()->shape()) throw ShapeError("stack", items[i]->shape(), items.front()->shape());
    std::copy(items[i]->values().begin(), items[i]->values().end(), out.data() + i * n);
  }
  return out;
}

/// 2D-path embeddings of `images`, in batches, with parameters bound as constants.
inline std::vector<std::vector<double>> embed_images(const FaceModel& model, bool use_jam,
                                                     const std::vector<const Tensor*>& images, std::size_t batch = 64) {
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    ad::Tape tape;
    ParamBinding bind(tape, false);
    std::vector<const Tensor*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                     images.begin() + static_cast<std::ptrdiff_t>(end));
    const BranchOutput o = forward_2d(model, tape.constant(stack(chunk)), use_jam, bind);
    const Tensor& e = o.embeddings.value();
    const std::size_t dim = e.dim(1);
    for (std::size_t r = 0; r < chunk.size(); ++r) out.emplace_back(e.data() + r * dim, e.data() + (r + 1) * dim);
  }
  return out;
}

struct EvalEmbeddings {
  std::vector<EmbeddingRow> gallery;
  std::vector<EmbeddingRow> probes;
};

/// Reads the images (never the clouds) of `ids` and embeds them through the 2D path.
inline EvalEmbeddings embed_split(const FaceModel& model, bool use_jam, const Manifest& m, const std::vector<int>& ids,
                                  const std::unordered_map<std::size_t, Tensor>* cache = nullptr) {
  EvalEmbeddings out;
  for (SampleRole role : {SampleRole::kGallery, SampleRole::kProbe}) {
    const std::vector<std::size_t> idx = samples_of(m, ids, role);
    std::vector<Tensor> owned;
    std::vector<const Tensor*> imgs;
    owned.reserve(idx.size());
    for (std::size_t i : idx) {
      if (cache && cache->count(i)) {
        imgs.push_back(&cache->at(i));
      } else {
        owned.push_back(read_image(m.root / m.samples[i].image));
        imgs.push_back(&owned.back());
      }
    }
    const auto emb = embed_images(model, use_jam, imgs);
    auto& dst = role == SampleRole::kGallery ? out.gallery : out.probes;
    for (std::size_t k = 0; k < idx.size(); ++k)
      dst.push_back(EmbeddingRow{m.samples[idx[k]].identity, m.samples[idx[k]].bin, emb[k]});
  }
  return out;
}

inline VerificationReport report_for(const EvalEmbeddings& e, const EvalConfig& ec, int fold) {
  return pose_binned_report(cosine_scores(e.gallery, e.probes, ec.fusion), ec.far_target, ec.average, fold);
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_2d = 0.0;
  double loss_3d = 0.0;
  double loss_je = 0.0;
  double val_tar = 0.0;
  double gamma = 0.0;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"lr", r.lr},         {"loss", r.loss},     {"loss_2d", r.loss_2d}, {"loss_3d", r.loss_3d},
          {"loss_je", r.loss_je}, {"val_tar", r.val_tar}, {"gamma", r.gamma}, {"seconds", r.seconds}};
}

inline EpochRecord epoch_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch");
  r.lr = j.at("lr");
  r.loss = j.at("loss");
  r.loss_2d = j.at("loss_2d");
  r.loss_3d = j.at("loss_3d");
  r.loss_je = j.at("loss_je");
  r.val_tar = j.at("val_tar");
  r.gamma = j.at("gamma");
  r.seconds = j.at("seconds");
  return r;
}

struct TrainOptions {
  fs::path out_dir;
  int fold = 0;
  bool resume = false;
  std::optional<int> stop_after;  // stop once this many epochs are complete
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  FaceModel model;  // state after the last completed epoch
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val = -1.0;
  bool early_stopped = false;
  fs::path best_checkpoint;
  fs::path last_checkpoint;
};

namespace detail {

struct TrainState {
  FaceModel model;
  std::map<const Parameter*, Tensor> momentum;
  std::vector<EpochRecord> history;
  int next_epoch = 0;
  int best_epoch = -1;
  double best_val = -1.0;
};

inline Checkpoint make_checkpoint(const ExperimentConfig& cfg, const FoldPlan& plan, const TrainState& st) {
  Checkpoint ck;
  ck.config_hash = config_hash(cfg);
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : st.history) hist.push_back(to_json(r));
  ck.meta = {{"epoch", st.next_epoch},
             {"fold", plan.fold},
             {"classes", plan.train.size()},
             {"train_ids", plan.train},
             {"enable_jam", cfg.ablation.enable_jam},
             {"enable_je", cfg.ablation.enable_je},
             {"best_epoch", st.best_epoch},
             {"best_val", st.best_val},
             {"history", hist},
             {"config", to_json(cfg)}};
  const std::vector<ParamPtr> params = st.model.parameters();
  store_parameters(ck, params);
  for (const ParamPtr& p : params) {
    const auto it = st.momentum.find(p.get());
    if (it != st.momentum.end()) ck.tensors["momentum/" + p->name] = it->second;
  }
  ck.tensors["state/head2d.norm"] = Tensor(Shape{2}, {st.model.head2d.norm_mean, st.model.head2d.norm_std});
  ck.tensors["state/head3d.norm"] = Tensor(Shape{2}, {st.model.head3d.norm_mean, st.model.head3d.norm_std});
  return ck;
}

inline void restore_state(const Checkpoint& ck, TrainState& st) {
  const std::vector<ParamPtr> params = st.model.parameters();
  restore_parameters(ck, params);
  st.momentum.clear();
  for (const ParamPtr& p : params) {
    const auto it = ck.tensors.find("momentum/" + p->name);
    if (it != ck.tensors.end()) st.momentum[p.get()] = it->second;
  }
  const Tensor& n2 = ck.tensors.at("state/head2d.norm");
  const Tensor& n3 = ck.tensors.at("state/head3d.norm");
  st.model.head2d.norm_mean = n2[0];
  st.model.head2d.norm_std = n2[1];
  st.model.head3d.norm_mean = n3[0];
  st.model.head3d.norm_std = n3[1];
  st.next_epoch = ck.meta.at("epoch");
  st.best_epoch = ck.meta.at("best_epoch");
  st.best_val = ck.meta.at("best_val");
  st.history.clear();
  for (const auto& r : ck.meta.at("history")) st.history.push_back(epoch_from_json(r));
}

/// SGD with momentum and L2 weight decay: v = mu v + g + wd w; w -= lr v.
inline void sgd_step(TrainState& st, const ParamBinding& bind, const ad::Gradients& grads, double lr,
                     const OptimizerConfig& opt) {
  for (const ParamPtr& p : bind.bound()) {
    const Tensor& g = grads[bind.var(p)];
    auto [it, fresh] = st.momentum.try_emplace(p.get(), Tensor(p->value.shape()));
    Tensor& v = it->second;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = opt.momentum * v[i] + g[i] + opt.weight_decay * p->value[i];
      p->value[i] -= lr * v[i];
    }
  }
}

}  // namespace detail

struct StepLosses {
  double total = 0.0, l2d = 0.0, l3d = 0.0, lje = 0.0;
};

/// Builds the training objective for one batch of aligned samples and returns
/// the scalar loss variable. Norm statistics of the heads are updated in place.
inline ad::Var batch_objective(FaceModel& model, const ExperimentConfig& cfg, ParamBinding& bind, const Tensor& images,
                               const Tensor* clouds, const std::vector<std::size_t>& labels, StepLosses& parts,
                               bool update_norms = true) {
  ad::Tape& tape = bind.tape();
  const bool jam = cfg.ablation.enable_jam;
  BranchOutput o2 = forward_2d(model, tape.constant(images), jam, bind);
  if (update_norms) norm_stats_update(model.head2d, row_norms(o2.embeddings.value()), cfg.margin.t_alpha);
  ad::Var l2 = domain_loss(o2.embeddings, model.head2d, labels, cfg.margin, bind);
  parts.l2d = l2.value().item();
  std::optional<ad::Var> l3, lje;
  if (jam) {
    if (!clouds) throw std::invalid_argument("batch_objective: the joint objective needs point clouds");
    BranchOutput o3 = forward_3d(model, tape.constant(*clouds), jam, bind);
    if (update_norms) norm_stats_update(model.head3d, row_norms(o3.embeddings.value()), cfg.margin.t_alpha);
    l3 = domain_loss(o3.embeddings, model.head3d, labels, cfg.margin, bind);
    parts.l3d = l3->value().item();
    if (cfg.ablation.enable_je) {
      lje = je_loss(*o2.attention, *o3.attention, cfg.binning, cfg.joint_mode);
      parts.lje = lje->value().item();
    }
  }
  ad::Var total = total_loss(l2, l3, lje, cfg.loss_weights);
  parts.total = total.value().item();
  return total;
}

/// Trains one fold. Writes last.ckpt, best.ckpt and metrics.jsonl under options.out_dir.
inline TrainResult train(const ExperimentConfig& cfg, const Manifest& m, const TrainOptions& opt) {
  cfg.validate();
  check_manifest(m, cfg);
  const FoldPlan plan = plan_fold(m, opt.fold, cfg.validation_fraction, cfg.seed);
  fs::create_directories(opt.out_dir);
  const fs::path last_path = opt.out_dir / "last.ckpt", best_path = opt.out_dir / "best.ckpt";
  const fs::path log_path = opt.out_dir / "metrics.jsonl";

  detail::TrainState st;
  st.model = FaceModel::create(model_config(cfg, plan.train.size()), mix_seed(cfg.seed, 0x30de1, plan.fold));
  if (opt.resume) {
    const Checkpoint ck = load_checkpoint(last_path);
    if (ck.config_hash != config_hash(cfg))
      throw TrainingError("resume: config hash mismatch with " + last_path.string());
    detail::restore_state(ck, st);
  }

  // Labels follow the sorted training identities.
  std::unordered_map<int, std::size_t> label_of;
  for (std::size_t i = 0; i < plan.train.size(); ++i) label_of[plan.train[i]] = i;
  const std::vector<std::size_t> train_idx = samples_of(m, plan.train);
  std::unordered_map<std::size_t, Tensor> images, clouds;
  for (std::size_t i : train_idx) {
    images.emplace(i, read_image(m.root / m.samples[i].image));
    if (cfg.ablation.enable_jam) clouds.emplace(i, read_cloud(m.root / m.samples[i].cloud));
  }
  std::unordered_map<std::size_t, Tensor> val_images;
  for (std::size_t i : samples_of(m, plan.validation)) val_images.emplace(i, read_image(m.root / m.samples[i].image));

  std::ofstream log(log_path, opt.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());

  TrainResult res;
  int epoch = st.next_epoch;
  for (; epoch < cfg.max_epochs; ++epoch) {
    if (opt.stop_after && epoch >= *opt.stop_after) break;
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.optimizer.lr_at(epoch);
    std::vector<std::size_t> order = train_idx;
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(plan.fold), static_cast<std::uint64_t>(epoch) + 1));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++steps) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Tensor*> imgs, clds;
      std::vector<std::size_t> labels;
      for (std::size_t k = start; k < end; ++k) {
        imgs.push_back(&images.at(order[k]));
        if (cfg.ablation.enable_jam) clds.push_back(&clouds.at(order[k]));
        labels.push_back(label_of.at(m.samples[order[k]].identity));
      }
      const Tensor img_batch = stack(imgs);
      const std::optional<Tensor> cloud_batch = cfg.ablation.enable_jam ? std::optional<Tensor>(stack(clds)) : std::nullopt;
      StepLosses parts;
      try {
        ad::Tape tape;
        ParamBinding bind(tape, true);
        ad::Var loss = batch_objective(st.model, cfg, bind, img_batch, cloud_batch ? &*cloud_batch : nullptr, labels, parts);
        if (!std::isfinite(parts.total)) throw NumericError("non-finite loss");
        const ad::Gradients grads = tape.backward(loss);
        detail::sgd_step(st, bind, grads, lr, cfg.optimizer);
      } catch (const NumericError& e) {
        const nlohmann::json event = {{"event", "divergence"}, {"epoch", epoch}, {"step", steps}, {"what", e.what()}};
        log << event.dump() << '\n';
        throw TrainingError("training diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(steps) +
                            ": " + e.what());
      }
      rec.loss += parts.total;
      rec.loss_2d += parts.l2d;
      rec.loss_3d += parts.l3d;
      rec.loss_je += parts.lje;
    }
    const double n = static_cast<double>(std::max<std::size_t>(steps, 1));
    rec.loss /= n;
    rec.loss_2d /= n;
    rec.loss_3d /= n;
    rec.loss_je /= n;
    rec.gamma = st.model.jam.gamma_2d->value[0];
    rec.val_tar = report_for(embed_split(st.model, cfg.ablation.enable_jam, m, plan.validation, &val_images), cfg.eval,
                             plan.fold)
                      .average_tar;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.history.push_back(rec);
    st.next_epoch = epoch + 1;

    if (rec.val_tar > st.best_val) {
      st.best_val = rec.val_tar;
      st.best_epoch = epoch;
      save_checkpoint(best_path, detail::make_checkpoint(cfg, plan, st));
    }
    save_checkpoint(last_path, detail::make_checkpoint(cfg, plan, st));
    log << to_json(rec).dump() << '\n';
    log.flush();
    if (opt.on_epoch) opt.on_epoch(rec);

    if (epoch + 1 >= cfg.early_stopping.min_epochs && epoch - st.best_epoch >= cfg.early_stopping.patience) {
      res.early_stopped = true;
      break;
    }
  }
  res.model = std::move(st.model);
  res.history = std::move(st.history);
  res.best_epoch = st.best_epoch;
  res.best_val = st.best_val;
  res.best_checkpoint = best_path;
  res.last_checkpoint = last_path;
  return res;
}

/// Rebuilds the 2D inference path from a checkpoint. Only 2D-path tensors are required.
inline FaceModel load_inference_model(const Checkpoint& ck, const ExperimentConfig& cfg, bool& use_jam) {
  use_jam = ck.meta.at("enable_jam");
  const std::size_t classes = ck.meta.at("classes");
  FaceModel model = FaceModel::create(model_config(cfg, classes), 0);
  restore_parameters(ck, inference_parameters(model, use_jam));
  return model;
}

/// 2D-only evaluation of a checkpoint on a fold's eval identities.
inline VerificationReport evaluate(const fs::path& checkpoint, const ExperimentConfig& cfg, const Manifest& m, int fold,
                                   EvalEmbeddings* embeddings_out = nullptr, RocCurve* curve_out = nullptr) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  bool use_jam = false;
  const FaceModel model = load_inference_model(ck, cfg, use_jam);
  if (fold < 0 || static_cast<std::size_t>(fold) >= m.folds.size()) throw TrainingError("evaluate: fold not in manifest");
  EvalEmbeddings e = embed_split(model, use_jam, m, m.folds[fold].eval);
  if (e.gallery.empty() || e.probes.empty()) throw TrainingError("evaluate: eval split has no gallery or probes");
  const ScoreSet scores = cosine_scores(e.gallery, e.probes, cfg.eval.fusion);
  VerificationReport rep = pose_binned_report(scores, cfg.eval.far_target, cfg.eval.average, fold);
  if (curve_out) *curve_out = roc_curve(scores);
  if (embeddings_out) *embeddings_out = std::move(e);
  return rep;
}

struct AggregateReport {
  std::vector<VerificationReport> folds;
  VerificationReport mean;
  VerificationReport stddev;  // population standard deviation per column
};

inline AggregateReport aggregate(const std::vector<VerificationReport>& folds) {
  if (folds.empty()) throw std::invalid_argument("aggregate: no folds");
  AggregateReport a;
  a.folds = folds;
  a.mean.fold = a.stddev.fold = -1;
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    sd = std::sqrt(var / static_cast<double>(v.size()));
  };
  for (int b = 0; b < kNumPoseBins; ++b) {
    std::vector<double> v;
    for (const auto& r : folds)
      if (r.bin_tar[b]) v.push_back(*r.bin_tar[b]);
    if (v.empty()) continue;
    double mu = 0.0, sd = 0.0;
    stats(v, mu, sd);
    a.mean.bin_tar[b] = mu;
    a.stddev.bin_tar[b] = sd;
  }
  auto column = [&](double VerificationReport::*field) {
    std::vector<double> v;
    for (const auto& r : folds) v.push_back(r.*field);
    stats(v, a.mean.*field, a.stddev.*field);
  };
  column(&VerificationReport::average_tar);
  column(&VerificationReport::pooled_tar);
  column(&VerificationReport::auc);
  column(&VerificationReport::eer);
  return a;
}

inline nlohmann::json to_json(const AggregateReport& a) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& r : a.folds) folds.push_back(to_json(r));
  return {{"folds", folds}, {"mean", to_json(a.mean)}, {"std", to_json(a.stddev)}};
}

/// Trains and evaluates every fold under `out_dir/fold<k>`. Folds run on up to cfg.threads threads.
inline AggregateReport run_folds(const ExperimentConfig& cfg, const Manifest& m, const fs::path& out_dir,
                                 std::function<void(int, const EpochRecord&)> on_epoch = {}) {
  if (cfg.folds < 1) throw TrainingError("run_folds: need k >= 1");
  if (m.folds.size() < cfg.folds)
    throw TrainingError("run_folds: too few identities for " + std::to_string(cfg.folds) + " disjoint eval sets");
  std::vector<VerificationReport> reports(cfg.folds);
  std::vector<std::exception_ptr> errors(cfg.folds);
  std::mutex cb_mu;
  auto work = [&](std::size_t f) {
    try {
      TrainOptions opt;
      opt.out_dir = out_dir / ("fold" + std::to_string(f));
      opt.fold = static_cast<int>(f);
      if (on_epoch)
        opt.on_epoch = [&, f](const EpochRecord& r) {
          std::lock_guard lock(cb_mu);
          on_epoch(static_cast<int>(f), r);
        };
      const TrainResult tr = train(cfg, m, opt);
      reports[f] = evaluate(tr.best_checkpoint, cfg, m, static_cast<int>(f));
      std::ofstream(opt.out_dir / "report.json") << to_json(reports[f]).dump(2) << '\n';
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };
  const std::size_t nthreads = std::min(cfg.threads, cfg.folds);
  if (nthreads <= 1) {
    for (std::size_t f = 0; f < cfg.folds; ++f) work(f);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t)
      pool.emplace_back([&] {
        for (std::size_t f; (f = next.fetch_add(1)) < cfg.folds;) work(f);
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  AggregateReport agg = aggregate(reports);
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "aggregate.json") << to_json(agg).dump(2) << '\n';
  return agg;
}

struct AblationRow {
  std::string name;
  AblationFlags flags;
  AggregateReport report;
};

/// Trains each variant under the same config. JAM and JAM+JE always; the 2D-only baseline on request.
inline std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const Manifest& m, const fs::path& out_dir,
                                       bool with_baseline, std::function<void(const std::string&, int, const EpochRecord&)> on_epoch = {}) {
  std::vector<AblationRow> rows;
  if (with_baseline) rows.push_back({"baseline_2d", {false, false}, {}});
  rows.push_back({"jam", {true, false}, {}});
  rows.push_back({"jam_je", {true, true}, {}});
  std::string table = table_header() + "\n";
  for (AblationRow& row : rows) {
    ExperimentConfig c = cfg;
    c.ablation = row.flags;
    std::function<void(int, const EpochRecord&)> cb;
    if (on_epoch) cb = [&](int f, const EpochRecord& r) { on_epoch(row.name, f, r); };
    row.report = run_folds(c, m, out_dir / row.name, cb);
    table += table_row(row.name, row.report.mean) + "\n";
  }
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "ablation.csv") << table;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"name", r.name}, {"report", to_json(r.report)}});
  std::ofstream(out_dir / "ablation.json") << j.dump(2) << '\n';
  return rows;
}

}  // namespace jamje
