#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "abnn/data.hpp"
#include "abnn/task.hpp"
#include "abnn/training.hpp"

namespace abnn {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class ExperimentKind { elbo_table, regress_1d, image_complete };
enum class ExperimentModel { mfvi, amfvi, povi, apovi, cnp, convcnp, lininterp };

const char* to_string(ExperimentKind k);
const char* to_string(ExperimentModel m);
const char* to_string(ObjectiveType t);

/// Everything an experiment run depends on. Every run is a pure function of
/// this structure: repeated invocations write identical metrics and figures.
struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::regress_1d;
  ExperimentModel model = ExperimentModel::apovi;

  /// Training objective; when no config file / flag picks one, the model's
  /// natural objective is used (mean-field and inducing-point posteriors:
  /// elbo; amortised posteriors: npvi; neural processes: npml).
  ObjectiveKind objective{ObjectiveType::npvi, 4};
  bool objective_explicit = false;

  TrainConfig train{1e-3, 5, 100, 100, 50, 50, 0};
  std::uint64_t seed = 0;
  std::string out_dir = "runs/out";

  // --- task generation ---
  KernelSpec kernel;                     // GP prior for 1-d experiments
  std::size_t meta_size = 10;            // meta-dataset size (0 = test task itself)
  std::size_t n_lo = 10, n_hi = 50;      // points per GP task
  double interval_lo = -2.0, interval_hi = 2.0;
  double noise_sd = 0.05;                // observation noise in generated tasks
  std::string eval_task = "se";          // held-out task source: "se" | "cubic"
  std::size_t grid_points = 80;          // 1-d evaluation grid resolution
  std::size_t test_tasks = 5;
  std::size_t repetitions = 5;

  // --- images ---
  std::string image_source;              // IDX file; empty uses drawn digits
  std::size_t image_size = 16;           // square resolution after resampling
  std::size_t test_images = 10;
  double mask_p_lo = 0.05, mask_p_hi = 0.95;
  double test_mask_p_lo = 0.1, test_mask_p_hi = 0.3;
  bool binarise = true;

  // --- architectures ---
  std::vector<std::size_t> bnn_hidden{16, 16};
  Act activation = Act::tanh;
  double prior_var = 1.0;
  double noise_var = 0.05;               // gaussian likelihood variance
  std::vector<std::size_t> infer_hidden{32};   // amortisation networks
  std::size_t povi_inducing = 10;
  std::size_t repr_dim = 32;                   // conditional NP representation
  std::vector<std::size_t> np_hidden{32, 32};
  std::vector<std::size_t> cnn_channels{8, 8};
  std::vector<std::size_t> cnn_kernels{5, 5};
  std::vector<std::size_t> head_hidden{16};
  double points_per_unit = 16.0;
  std::size_t eval_samples = 64;         // posterior draws for evaluation

  /// Model/experiment compatibility plus field sanity; ContractError on
  /// violations (e.g. lininterp outside image completion).
  void validate() const;

  /// The objective actually used (resolves the per-model default).
  ObjectiveKind resolved_objective() const;
};

/// Strict JSON parsing: unknown keys raise FormatError naming the key; type
/// mismatches raise FormatError. Missing keys keep their defaults.
ExperimentConfig config_from_json(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

/// Effective configuration as pretty-printed JSON (round-trips through
/// config_from_json); every run echoes this into its output directory.
std::string config_to_json(const ExperimentConfig& cfg);

/// Command-line overrides applied on top of a config file.
struct CliOverrides {
  std::optional<std::string> model;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> meta_size;
};
void apply_overrides(ExperimentConfig& cfg, const CliOverrides& o);

ExperimentModel model_from_string(const std::string& name);  // ContractError on junk

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// One scalar measurement: `unit` indexes the test task or test image inside
/// a repetition.
struct MetricsRow {
  std::size_t repetition = 0;
  std::size_t unit = 0;
  double value = 0.0;
};

/// Raw measurements plus the aggregate: each repetition is first averaged
/// over its units, the aggregate is mean +/- sample standard deviation over
/// those per-repetition values (zero when all repetitions agree bitwise).
struct MetricsRecord {
  std::string metric;
  std::vector<MetricsRow> raw;
  std::vector<double> per_repetition;
  double mean = 0.0;
  double sd = 0.0;
};

MetricsRecord aggregate_metrics(const std::string& metric, std::vector<MetricsRow> raw);

/// Writes `raw.csv` (repetition, unit, value) and `aggregate.csv` (metric,
/// mean, sd, repetitions) into the directory. Values print with 17
/// significant digits, so parsing them back is lossless.
void write_metrics(const MetricsRecord& record, const std::string& dir);

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

/// Builds the configured model with freshly initialised parameters drawn
/// from `rng`. `x_dim` is 1 for the 1-d experiments and 2 for images.
MetaModel build_model(const ExperimentConfig& cfg, std::size_t x_dim, Rng& rng);

/// Stable parameter names for checkpointing, aligned with
/// MetaModel::parameters().
std::vector<std::string> parameter_names(const MetaModel& model);

/// Short identifier ("apovi 2x16x16x1" style) stored in checkpoints.
std::string model_identifier(const MetaModel& model);

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

/// Comparison of achieved evidence bounds. Builds deterministic held-out
/// tasks, trains the inducing-point posterior per test task (or the
/// amortised one per meta-dataset, one-shot evaluated; meta-size 0 trains on
/// the test task itself) and reports the test-task bound per (repetition,
/// task). Writes raw.csv, aggregate.csv, and config.json into out_dir.
MetricsRecord run_elbo_table(const ExperimentConfig& cfg);

/// Curves produced by the 1-d regression experiment.
struct Regress1dResult {
  std::vector<double> grid;    // evaluation inputs
  std::vector<double> mean;    // predictive mean
  std::vector<double> lower;   // mean - 1.96 sd
  std::vector<double> upper;   // mean + 1.96 sd
  Task eval_task;              // the held-out task (context points)
  TrainingRun training;
};

/// Trains on a GP meta-dataset, conditions on one held-out task, and writes
/// predictions.csv (x, mean, sd, lower, upper), figure.svg, history.csv and
/// config.json into out_dir.
Regress1dResult run_regress_1d(const ExperimentConfig& cfg);

/// Image completion: per (repetition, test image) the sum over all pixels of
/// the squared difference between the predicted mean and the original image.
/// The first repetition also writes per-image panel figures
/// (original / context / mean / sd). Writes raw.csv, aggregate.csv and
/// config.json into out_dir.
MetricsRecord run_image_complete(const ExperimentConfig& cfg);

/// Generic training entry (`train` command): trains the configured model on
/// the experiment's meta-dataset and writes model.ckpt, history.csv and
/// config.json into out_dir.
TrainingRun run_train(const ExperimentConfig& cfg);

}  // namespace abnn
