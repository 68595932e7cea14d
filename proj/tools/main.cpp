// Command-line front end for the amortised-BNN toolkit: training runs,
// the ELBO comparison table, 1-D regression figures, image completion and
// checkpoint inspection. Settings come from an optional JSON config file;
// the flags below override it and the effective config is echoed to the
// output directory.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "abnn/checkpoint.hpp"
#include "abnn/errors.hpp"
#include "abnn/experiments.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  abnn::CliOverrides overrides;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "JSON configuration file")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", args.overrides.seed, "seed for all derived random streams");
  sub->add_option("--out", args.overrides.out_dir, "output directory");
  sub->add_option("--model", args.overrides.model,
                  "model (mfvi|amfvi|povi|apovi|cnp|convcnp|lininterp)");
  sub->add_option("--meta-size", args.overrides.meta_size,
                  "number of tasks in the meta-dataset");
}

abnn::ExperimentConfig resolve(const CommonArgs& args, abnn::ExperimentKind kind) {
  abnn::ExperimentConfig cfg =
      args.config_path.empty() ? abnn::ExperimentConfig{} : abnn::load_config(args.config_path);
  cfg.experiment = kind;
  abnn::apply_overrides(cfg, args.overrides);
  return cfg;
}

void print_metric(const abnn::ExperimentConfig& cfg, const abnn::MetricsRecord& rec) {
  std::printf("%s  %s = %.4f +/- %.4f  (%zu repetitions x %zu units)\n",
              abnn::to_string(cfg.model), rec.metric.c_str(), rec.mean, rec.sd,
              rec.per_repetition.size(), rec.raw.size() / rec.per_repetition.size());
  std::printf("results written to %s\n", cfg.out_dir.c_str());
}

void print_training(const abnn::TrainingRun& run) {
  std::printf("stopped at epoch %zu%s; final objective %.6f\n", run.stop_epoch,
              run.stopped_early ? " (early stop)" : "",
              run.smoothed.empty() ? 0.0 : run.smoothed.back());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amortised Bayesian neural network toolkit"};
  app.require_subcommand(1);

  CommonArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model on a meta-dataset");
  add_common(train, train_args);
  std::string train_experiment = "regress_1d";
  train->add_option("--experiment", train_experiment,
                    "data pipeline to train for (regress_1d|elbo_table|image_complete)");

  CommonArgs elbo_args;
  CLI::App* elbo = app.add_subcommand(
      "elbo-table", "evidence lower bounds of trained posteriors on held-out tasks");
  add_common(elbo, elbo_args);

  CommonArgs reg_args;
  CLI::App* reg = app.add_subcommand(
      "regress-1d", "posterior predictive figure for a held-out regression task");
  add_common(reg, reg_args);

  CommonArgs img_args;
  CLI::App* img = app.add_subcommand("complete-image",
                                     "image completion from partial observations");
  add_common(img, img_args);

  std::string ckpt_path;
  CLI::App* inspect =
      app.add_subcommand("inspect-checkpoint", "describe a saved model checkpoint");
  inspect->add_option("path", ckpt_path, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      abnn::ExperimentConfig cfg = resolve(train_args, abnn::ExperimentKind::regress_1d);
      if (train->count("--experiment") > 0) {
        if (train_experiment == "regress_1d")
          cfg.experiment = abnn::ExperimentKind::regress_1d;
        else if (train_experiment == "elbo_table")
          cfg.experiment = abnn::ExperimentKind::elbo_table;
        else if (train_experiment == "image_complete")
          cfg.experiment = abnn::ExperimentKind::image_complete;
        else
          throw abnn::ContractError("unknown experiment '" + train_experiment + "'");
      } else if (!train_args.config_path.empty()) {
        cfg.experiment = abnn::load_config(train_args.config_path).experiment;
      }
      const abnn::TrainingRun run = abnn::run_train(cfg);
      print_training(run);
      std::printf("checkpoint written to %s/model.ckpt\n", cfg.out_dir.c_str());
    } else if (elbo->parsed()) {
      const abnn::ExperimentConfig cfg = resolve(elbo_args, abnn::ExperimentKind::elbo_table);
      print_metric(cfg, abnn::run_elbo_table(cfg));
    } else if (reg->parsed()) {
      const abnn::ExperimentConfig cfg = resolve(reg_args, abnn::ExperimentKind::regress_1d);
      const abnn::Regress1dResult res = abnn::run_regress_1d(cfg);
      print_training(res.training);
      std::printf("predictions, history and figure written to %s\n", cfg.out_dir.c_str());
    } else if (img->parsed()) {
      const abnn::ExperimentConfig cfg =
          resolve(img_args, abnn::ExperimentKind::image_complete);
      print_metric(cfg, abnn::run_image_complete(cfg));
    } else if (inspect->parsed()) {
      std::printf("%s", abnn::describe_checkpoint(abnn::load_checkpoint(ckpt_path)).c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
