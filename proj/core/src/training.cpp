#include "abnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "abnn/errors.hpp"
#include "abnn/rng.hpp"

namespace abnn {
namespace {

constexpr std::uint64_t kSplitSalt = 0x74696c7073ull;
constexpr std::uint64_t kShuffleSalt = 0x6c66756873ull;

void check_mc(std::size_t m_samples, const char* who) {
  if (m_samples < 1)
    throw ContractError(std::string(who) + ": at least one Monte Carlo sample is required");
}

Tensor mean_of(Tensor acc, std::size_t m) {
  return scale(std::move(acc), 1.0 / static_cast<double>(m));
}

/// Target log-likelihood of one weight sample.
Tensor sample_ll(const BNNConfig& cfg, const std::vector<Tensor>& weights, const Task& target) {
  return log_likelihood(cfg, bnn_forward(cfg, weights, target.x), target.y);
}

}  // namespace

// ---------------------------------------------------------------------------
// MetaModel
// ---------------------------------------------------------------------------

std::vector<Tensor> MetaModel::parameters() const {
  std::vector<Tensor> out;
  switch (kind) {
    case ModelKind::mfvi: out = mfvi.parameters(); break;
    case ModelKind::amfvi: out = amfvi.parameters(); break;
    case ModelKind::apovi: out = apovi.parameters(); break;
    case ModelKind::povi: out = povi.parameters(); break;
    case ModelKind::cnp: return cnp.parameters();
    case ModelKind::convcnp: return convcnp.parameters();
  }
  const auto lik = bnn.likelihood.parameters();
  out.insert(out.end(), lik.begin(), lik.end());
  return out;
}

void ObjectiveKind::validate() const { check_mc(mc_samples, "ObjectiveKind"); }

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

Tensor elbo_objective(const MetaModel& model, const Task& task, std::size_t m_samples,
                      std::uint64_t seed) {
  check_mc(m_samples, "elbo_objective");
  task.validate();
  if (task.size() == 0) throw ContractError("elbo_objective: empty task");
  switch (model.kind) {
    case ModelKind::mfvi:
    case ModelKind::amfvi: {
      const MFVIPosterior q = model.kind == ModelKind::mfvi
                                  ? model.mfvi
                                  : amfvi_posterior(model.amfvi, task, model.bnn);
      Tensor ll_acc = Tensor::scalar(0.0);
      for (std::size_t m = 0; m < m_samples; ++m) {
        GaussianNoise noise(mix_seed(seed, m + 1));
        ll_acc = add(ll_acc, sample_ll(model.bnn, mfvi_sample(q, model.bnn, noise).weights, task));
      }
      return sub(mean_of(ll_acc, m_samples), mfvi_kl_to_prior(q, model.bnn));
    }
    case ModelKind::apovi:
    case ModelKind::povi: {
      Tensor acc = Tensor::scalar(0.0);
      for (std::size_t m = 0; m < m_samples; ++m) {
        GaussianNoise noise(mix_seed(seed, m + 1));
        const SampleDetail det = model.kind == ModelKind::apovi
                                     ? apovi_sample(model.apovi, task, model.bnn, noise)
                                     : povi_sample(model.povi, model.bnn, noise);
        Tensor term = add(sample_ll(model.bnn, det.sample.weights, task),
                          sub(det.sample.log_p, det.sample.log_q));
        acc = add(acc, term);
      }
      return mean_of(acc, m_samples);
    }
    default:
      throw ContractError("elbo_objective: not defined for conditional neural processes");
  }
}

Tensor npml_objective(const MetaModel& model, const Task& context, const Task& target,
                      std::size_t m_samples, std::uint64_t seed) {
  check_mc(m_samples, "npml_objective");
  context.validate();
  target.validate();
  if (target.size() == 0) throw ContractError("npml_objective: empty target");
  switch (model.kind) {
    case ModelKind::cnp:
      return np_log_likelihood(cnp_predict(model.cnp, context, target.x), target.y);
    case ModelKind::convcnp:
      return np_log_likelihood(convcnp_predict(model.convcnp, context, target.x), target.y);
    case ModelKind::amfvi:
    case ModelKind::apovi: {
      const bool amf = model.kind == ModelKind::amfvi;
      MFVIPosterior q_ctx;
      if (amf) q_ctx = amfvi_posterior(model.amfvi, context, model.bnn);
      std::vector<Tensor> lls;
      lls.reserve(m_samples);
      for (std::size_t m = 0; m < m_samples; ++m) {
        GaussianNoise noise(mix_seed(seed, m + 1));
        const std::vector<Tensor> weights =
            amf ? mfvi_sample(q_ctx, model.bnn, noise).weights
                : apovi_sample(model.apovi, context, model.bnn, noise).sample.weights;
        lls.push_back(sample_ll(model.bnn, weights, target));
      }
      return logmeanexp(lls);
    }
    default:
      throw ContractError("npml_objective: model cannot condition on a context");
  }
}

Tensor npvi_objective(const MetaModel& model, const Task& context, const Task& target,
                      std::size_t m_samples, std::uint64_t seed) {
  check_mc(m_samples, "npvi_objective");
  context.validate();
  target.validate();
  if (context.size() == 0 && target.size() == 0)
    throw ContractError("npvi_objective: context and target cannot both be empty");
  // By the neural-process convention the target set contains the context, so
  // the union posterior conditions on the target (or the context alone when
  // asked to score an empty target).
  const Task& cond = target.size() > 0 ? target : context;
  switch (model.kind) {
    case ModelKind::amfvi: {
      // Both posteriors are diagonal Gaussians, so the KL is analytic — the
      // same form the amortised mean-field ELBO uses against the prior.
      const MFVIPosterior q_full = amfvi_posterior(model.amfvi, cond, model.bnn);
      const MFVIPosterior q_ctx = amfvi_posterior(model.amfvi, context, model.bnn);
      Tensor ll_acc = Tensor::scalar(0.0);
      for (std::size_t m = 0; m < m_samples; ++m) {
        GaussianNoise noise(mix_seed(seed, m + 1));
        WeightSample sample = mfvi_sample(q_full, model.bnn, noise);
        if (target.size() > 0)
          ll_acc = add(ll_acc, sample_ll(model.bnn, sample.weights, target));
      }
      return sub(mean_of(ll_acc, m_samples), mfvi_kl(q_full, q_ctx, model.bnn));
    }
    case ModelKind::apovi: {
      Tensor ll_acc = Tensor::scalar(0.0);
      Tensor kl_acc = Tensor::scalar(0.0);
      for (std::size_t m = 0; m < m_samples; ++m) {
        GaussianNoise noise(mix_seed(seed, m + 1));
        WeightSample sample = apovi_sample(model.apovi, cond, model.bnn, noise).sample;
        if (target.size() > 0)
          ll_acc = add(ll_acc, sample_ll(model.bnn, sample.weights, target));
        // Conditioning on an empty context gives the prior, whose density at
        // the sample is already recorded.
        Tensor log_q_ctx =
            context.size() == 0
                ? sample.log_p
                : apovi_log_density(model.apovi, context, model.bnn, sample.weights);
        kl_acc = add(kl_acc, sub(sample.log_q, log_q_ctx));
      }
      return sub(mean_of(ll_acc, m_samples), mean_of(kl_acc, m_samples));
    }
    default:
      throw ContractError("npvi_objective: only amortised Bayesian posteriors are supported");
  }
}

std::pair<Task, Task> context_target_split(const Task& task, Rng& rng) {
  task.validate();
  if (task.size() == 0) throw ContractError("context_target_split: empty task");
  const double frac = rng.uniform(0.1, 0.9);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < task.size(); ++i)
    if (rng.bernoulli(frac)) rows.push_back(i);
  return {task.subset(rows), task};
}

Tensor task_objective(const MetaModel& model, const Task& task, const ObjectiveKind& kind,
                      std::uint64_t seed) {
  kind.validate();
  if (kind.type == ObjectiveType::elbo)
    return elbo_objective(model, task, kind.mc_samples, seed);
  Task context, target;
  if (task.has_mask()) {
    // Image-style tasks carry their split; the on-grid model consumes the
    // masked grid directly, everything else the unmasked context rows.
    if (model.kind == ModelKind::convcnp && model.convcnp.on_grid) {
      context = task;
    } else {
      context = task.context_subset();
    }
    target = task.without_mask();
  } else {
    Rng rng(mix_seed(seed, kSplitSalt));
    std::tie(context, target) = context_target_split(task, rng);
  }
  if (kind.type == ObjectiveType::npml)
    return npml_objective(model, context, target, kind.mc_samples, seed);
  return npvi_objective(model, context, target, kind.mc_samples, seed);
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {
  if (!(lr > 0.0)) throw ContractError("Adam: learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::vector<double> g = params_[i].grad_or_zeros();
    std::vector<double>& val = params_[i].mutable_value();
    for (std::size_t j = 0; j < g.size(); ++j) {
      m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g[j];
      v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g[j] * g[j];
      val[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + kEps);
    }
    params_[i].zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

std::vector<double> smooth_history(const std::vector<double>& raw, std::size_t window) {
  if (window < 1) throw ContractError("smooth_history: window must be positive");
  std::vector<double> out(raw.size());
  for (std::size_t t = 0; t < raw.size(); ++t) {
    const std::size_t n = std::min(window, t + 1);
    double acc = 0.0;
    for (std::size_t k = t + 1 - n; k <= t; ++k) acc += raw[k];
    out[t] = acc / static_cast<double>(n);
  }
  return out;
}

std::optional<std::size_t> early_stop(const std::vector<double>& history, std::size_t start,
                                      std::size_t patience, std::size_t window) {
  const std::vector<double> sm = smooth_history(history, window);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t streak = 0;
  for (std::size_t t = 0; t < sm.size(); ++t) {
    if (sm[t] > best) {
      best = sm[t];
      streak = 0;
    } else {
      ++streak;
    }
    if (t >= start && streak >= patience) return t;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning rate must be positive");
  if (batch_size < 1) throw ContractError("TrainConfig: batch size must be positive");
  if (max_epochs < 1) throw ContractError("TrainConfig: max epochs must be positive");
  if (patience < 1) throw ContractError("TrainConfig: patience must be positive");
  if (window < 1) throw ContractError("TrainConfig: smoothing window must be positive");
  if (early_stop_start > max_epochs)
    throw ContractError("TrainConfig: early-stop start cannot exceed max epochs");
}

TrainingRun train_loop(const std::vector<Tensor>& params, const MetaDataset& meta,
                       const TaskObjective& objective, const TrainConfig& cfg) {
  cfg.validate();
  if (meta.empty()) throw ContractError("train_loop: empty meta-dataset");
  Adam opt(params, cfg.learning_rate);
  TrainingRun run;
  run.seed = cfg.seed;
  const std::size_t n = meta.size();
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(mix_seed(cfg.seed, kShuffleSalt, epoch + 1));
    for (std::size_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(0, static_cast<long>(i))]);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t bend = std::min(n, b + cfg.batch_size);
      {
        Tape tape;
        Tensor acc = Tensor::scalar(0.0);
        for (std::size_t k = b; k < bend; ++k) {
          const std::size_t task_id = order[k];
          Tensor obj = objective(meta.tasks[task_id], mix_seed(cfg.seed, epoch + 1, task_id + 1));
          if (!std::isfinite(obj.scalar_value()))
            throw TrainingError("train_loop: non-finite objective at epoch " +
                                std::to_string(epoch) + " on task " + std::to_string(task_id));
          epoch_sum += obj.scalar_value();
          acc = add(acc, obj);
        }
        Tensor loss = neg(mean_of(acc, bend - b));
        // A loss with no trainable dependencies never joins the tape; there is
        // nothing to differentiate, so the step below becomes a no-op.
        if (loss.requires_grad()) {
          try {
            tape.backward(loss);
          } catch (const NumericError& e) {
            throw TrainingError("train_loop: non-finite gradient at epoch " +
                                std::to_string(epoch) + ": " + e.what());
          }
        }
      }
      opt.step();
    }
    run.raw.push_back(epoch_sum / static_cast<double>(n));
    if (early_stop(run.raw, cfg.early_stop_start, cfg.patience, cfg.window).has_value()) {
      run.stopped_early = true;
      break;
    }
  }
  run.stop_epoch = run.raw.size();
  run.smoothed = smooth_history(run.raw, cfg.window);
  for (const auto& p : params) run.final_parameters.push_back(p.value());
  return run;
}

TrainingRun meta_train(MetaModel& model, const MetaDataset& meta, const ObjectiveKind& objective,
                       const TrainConfig& cfg) {
  objective.validate();
  const auto fn = [&](const Task& task, std::uint64_t seed) {
    return task_objective(model, task, objective, seed);
  };
  return train_loop(model.parameters(), meta, fn, cfg);
}

}  // namespace abnn
