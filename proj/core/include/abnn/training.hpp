#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "abnn/neural_process.hpp"
#include "abnn/posteriors.hpp"
#include "abnn/task.hpp"
#include "abnn/tensor.hpp"

namespace abnn {

// ---------------------------------------------------------------------------
// Models under training
// ---------------------------------------------------------------------------

enum class ModelKind { mfvi, amfvi, apovi, povi, cnp, convcnp };

/// Tagged bundle of every trainable model the toolkit knows about. Exactly
/// the member selected by `kind` is meaningful; `bnn` is shared by the four
/// Bayesian-network posteriors and ignored by the neural processes.
struct MetaModel {
  ModelKind kind = ModelKind::apovi;
  BNNConfig bnn;
  MFVIPosterior mfvi;
  AMFVIModel amfvi;
  APOVIModel apovi;
  POVIPosterior povi;
  CNPModel cnp;
  ConvCNPModel convcnp;

  bool is_bnn() const {
    return kind == ModelKind::mfvi || kind == ModelKind::amfvi || kind == ModelKind::apovi ||
           kind == ModelKind::povi;
  }
  /// Leaf parameter handles, including a trainable observation noise if the
  /// likelihood carries one.
  std::vector<Tensor> parameters() const;
};

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

enum class ObjectiveType { elbo, npml, npvi };

struct ObjectiveKind {
  ObjectiveType type = ObjectiveType::elbo;
  std::size_t mc_samples = 1;

  void validate() const;  // ContractError unless mc_samples >= 1
};

/// Evidence lower bound on one task, to be maximised. Sampled posteriors use
/// the Monte Carlo form (1/M)·sum[log_lik + log_p - log_q]; mean-field ones
/// use the analytic KL. Noise for sample m derives from mix_seed(seed, m+1).
Tensor elbo_objective(const MetaModel& model, const Task& task, std::size_t m_samples,
                      std::uint64_t seed);

/// Meta log-likelihood of the target set under the context-conditioned
/// posterior: exact for conditional neural processes, log-mean-exp over M
/// weight samples for the amortised Bayesian posteriors.
Tensor npml_objective(const MetaModel& model, const Task& context, const Task& target,
                      std::size_t m_samples, std::uint64_t seed);

/// Variational neural-process bound: expected target log-likelihood under the
/// posterior conditioned on the full target set (which by convention contains
/// the context) minus the KL from that posterior to the context-conditioned
/// one. The KL is analytic for the amortised mean-field model and a Monte
/// Carlo average of log-density differences at the sampled weights for the
/// layerwise pseudo-observation model.
Tensor npvi_objective(const MetaModel& model, const Task& context, const Task& target,
                      std::size_t m_samples, std::uint64_t seed);

/// Draws a context fraction uniformly from [0.1, 0.9], includes each point in
/// the context with that probability, and returns the full task as target.
std::pair<Task, Task> context_target_split(const Task& task, Rng& rng);

/// Dispatches to the objective selected by `kind`, deriving the context /
/// target split from the task's own mask when present and from
/// context_target_split otherwise. This is the per-task quantity meta_train
/// maximises.
Tensor task_objective(const MetaModel& model, const Task& task, const ObjectiveKind& kind,
                      std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 5;
  std::size_t max_epochs = 100;
  std::size_t early_stop_start = 100;  // disabled when >= max_epochs
  std::size_t patience = 50;
  std::size_t window = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainingRun {
  std::vector<double> raw;       // per-epoch mean objective over all tasks
  std::vector<double> smoothed;  // trailing-window mean of `raw`
  std::size_t stop_epoch = 0;    // epochs actually run
  bool stopped_early = false;
  std::uint64_t seed = 0;
  std::vector<std::vector<double>> final_parameters;  // value snapshot at stop
};

/// Adam with moment coefficients (0.9, 0.999) and stabiliser 1e-8. Applies an
/// ascent step on the accumulated gradients of a loss (= negated objective)
/// and clears them.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr);

  void step();
  std::size_t step_count() const { return t_; }

 private:
  std::vector<Tensor> params_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Trailing-mean smoothing: element t is the mean of the last
/// min(window, t+1) raw values.
std::vector<double> smooth_history(const std::vector<double>& raw, std::size_t window);

/// First epoch >= start at which the smoothed series has gone `patience`
/// consecutive epochs without improving on its running best; nullopt if that
/// never happens. The series to be smoothed is `history` (higher is better).
std::optional<std::size_t> early_stop(const std::vector<double>& history, std::size_t start,
                                      std::size_t patience, std::size_t window);

/// Per-task objective evaluated under a derived seed; must return a scalar
/// recorded on the active tape.
using TaskObjective = std::function<Tensor(const Task& task, std::uint64_t seed)>;

/// Generic minibatched ascent on the mean per-task objective. Task order is
/// reshuffled every epoch; the seed for task i in epoch e is
/// mix_seed(cfg.seed, e+1, i+1), so results do not depend on batch layout.
/// Non-finite objectives abort with a TrainingError naming the epoch and the
/// offending task indices.
TrainingRun train_loop(const std::vector<Tensor>& params, const MetaDataset& meta,
                       const TaskObjective& objective, const TrainConfig& cfg);

/// Meta-training of a model under the selected objective: train_loop over the
/// model's parameters with task_objective as the per-task quantity.
TrainingRun meta_train(MetaModel& model, const MetaDataset& meta, const ObjectiveKind& objective,
                       const TrainConfig& cfg);

}  // namespace abnn
