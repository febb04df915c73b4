// Command-line front end: generate, train, evaluate, ablate, export-embeddings, gradcheck.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "jamje/config.hpp"
#include "jamje/gradsuite.hpp"
#include "jamje/metrics.hpp"
#include "jamje/synthetic.hpp"
#include "jamje/trainer.hpp"

namespace {

using namespace jamje;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON experiment config (defaults for missing keys)");
  cmd->add_option("--seed", c.seed, "Override the experiment and dataset seed");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--data", c.data, "Dataset directory (overrides dataset.path)");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.dataset.seed = *c.seed;
  }
  if (!c.data.empty()) cfg.dataset_path = c.data;
  cfg.validate();
  return cfg;
}

Manifest open_dataset(const ExperimentConfig& cfg) {
  const fs::path p = fs::path(cfg.dataset_path) / "manifest.json";
  if (!fs::exists(p)) throw IoError("dataset manifest not found: " + p.string());
  return read_manifest(p);
}

void print_epoch(const std::string& tag, const EpochRecord& r) {
  std::printf("%sepoch %2d lr %.2g loss %.4f (2d %.4f 3d %.4f je %.4f) val_tar %.3f %.1fs\n", tag.c_str(), r.epoch, r.lr,
              r.loss, r.loss_2d, r.loss_3d, r.loss_je, r.val_tar, r.seconds);
  std::fflush(stdout);
}

void write_report(const fs::path& dir, const VerificationReport& rep, const std::string& name) {
  fs::create_directories(dir);
  std::ofstream(dir / "report.json") << to_json(rep).dump(2) << '\n';
  std::ofstream(dir / "report.csv") << table_header() << '\n' << table_row(name, rep) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint 2D/3D attention face verification at desk scale"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common gen_c, train_c, eval_c, abl_c, exp_c;
  CLI::App* gen = app.add_subcommand("generate", "Build the synthetic paired 2D/3D dataset");
  add_common(gen, gen_c);

  CLI::App* tr = app.add_subcommand("train", "Train one fold, or every fold with --all-folds");
  add_common(tr, train_c);
  int train_fold = 0;
  bool all_folds = false, resume = false;
  std::optional<int> stop_after;
  tr->add_option("--fold", train_fold, "Fold index");
  tr->add_flag("--all-folds", all_folds, "Train and evaluate every fold and aggregate");
  tr->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
  tr->add_option("--stop-after", stop_after, "Stop once this many epochs are complete");

  CLI::App* ev = app.add_subcommand("evaluate", "2D-only evaluation of a checkpoint");
  add_common(ev, eval_c);
  std::string eval_ckpt;
  int eval_fold = 0;
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  ev->add_option("--fold", eval_fold, "Fold whose eval identities are scored");

  CLI::App* ab = app.add_subcommand("ablate", "Train JAM and JAM+JE under one config and compare");
  add_common(ab, abl_c);
  bool with_baseline = false;
  ab->add_flag("--baseline", with_baseline, "Also train the 2D-only baseline");

  CLI::App* ex = app.add_subcommand("export-embeddings", "Write gallery and probe embeddings as CSV");
  add_common(ex, exp_c);
  std::string exp_ckpt;
  int exp_fold = 0;
  ex->add_option("--checkpoint", exp_ckpt, "Checkpoint file")->required();
  ex->add_option("--fold", exp_fold, "Fold whose eval identities are embedded");

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss term");
  Common gc_c;
  add_common(gc, gc_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      const ExperimentConfig cfg = resolve(gen_c);
      const fs::path out = gen_c.out.empty() ? fs::path(cfg.dataset_path) : fs::path(gen_c.out);
      const Manifest m = build_dataset(cfg.dataset, out);
      std::printf("generated %zu samples of %zu identities in %s\n", m.samples.size(), m.identities, out.c_str());
      for (const FoldSplit& f : m.folds)
        std::printf("fold %d: %zu train / %zu eval identities\n", f.fold, f.train.size(), f.eval.size());
    } else if (*tr) {
      const ExperimentConfig cfg = resolve(train_c);
      const Manifest m = open_dataset(cfg);
      const fs::path out = train_c.out.empty() ? fs::path("runs") : fs::path(train_c.out);
      if (all_folds) {
        const AggregateReport agg = run_folds(cfg, m, out, [](int f, const EpochRecord& r) {
          print_epoch("fold " + std::to_string(f) + " ", r);
        });
        std::printf("%s\n%s\n%s\n", table_header().c_str(), table_row("mean", agg.mean).c_str(),
                    table_row("std", agg.stddev).c_str());
      } else {
        TrainOptions opt;
        opt.out_dir = out;
        opt.fold = train_fold;
        opt.resume = resume;
        opt.stop_after = stop_after;
        opt.on_epoch = [](const EpochRecord& r) { print_epoch("", r); };
        save_config(out / "config.json", cfg);
        const TrainResult res = train(cfg, m, opt);
        std::printf("best epoch %d val_tar %.3f%s\n", res.best_epoch, res.best_val,
                    res.early_stopped ? " (early stop)" : "");
      }
    } else if (*ev) {
      const ExperimentConfig cfg = resolve(eval_c);
      const Manifest m = open_dataset(cfg);
      RocCurve curve;
      const VerificationReport rep = evaluate(eval_ckpt, cfg, m, eval_fold, nullptr, &curve);
      const fs::path out = eval_c.out.empty() ? fs::path(eval_ckpt).parent_path() : fs::path(eval_c.out);
      write_report(out, rep, "eval");
      write_curve_csv(out / "roc.csv", curve);
      std::printf("%s\n%s\n", table_header().c_str(), table_row("eval", rep).c_str());
    } else if (*ab) {
      const ExperimentConfig cfg = resolve(abl_c);
      const Manifest m = open_dataset(cfg);
      const fs::path out = abl_c.out.empty() ? fs::path("ablation") : fs::path(abl_c.out);
      const auto rows = ablate(cfg, m, out, with_baseline, [](const std::string& n, int f, const EpochRecord& r) {
        print_epoch(n + " fold " + std::to_string(f) + " ", r);
      });
      std::printf("%s\n", table_header().c_str());
      for (const auto& r : rows) std::printf("%s\n", table_row(r.name, r.report.mean).c_str());
    } else if (*ex) {
      const ExperimentConfig cfg = resolve(exp_c);
      const Manifest m = open_dataset(cfg);
      EvalEmbeddings e;
      evaluate(exp_ckpt, cfg, m, exp_fold, &e);
      const fs::path out = exp_c.out.empty() ? fs::path("embeddings") : fs::path(exp_c.out);
      write_embeddings(out / "gallery.csv", e.gallery);
      write_embeddings(out / "probes.csv", e.probes);
      std::printf("wrote %zu gallery and %zu probe embeddings to %s\n", e.gallery.size(), e.probes.size(), out.c_str());
    } else if (*gc) {
      const ExperimentConfig cfg = resolve(gc_c);
      GradSuiteOptions opt;
      opt.seed = cfg.seed;
      opt.margin = cfg.margin;
      opt.binning = cfg.binning;
      opt.joint_mode = cfg.joint_mode;
      bool ok = true;
      for (const GradSuiteEntry& e : run_grad_suite(opt)) {
        const bool pass = e.max_relative_error < 1e-4;
        ok = ok && pass;
        std::printf("%-12s max_rel_error %.3e over %zu points (%.2fs) %s\n", e.term.c_str(), e.max_relative_error,
                    e.points, e.seconds, pass ? "ok" : "FAIL");
      }
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: io: %s\n", e.what());
    return 3;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "error: training: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
