#include "abnn/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <utility>

#include "json.hpp"

#include "abnn/checkpoint.hpp"
#include "abnn/errors.hpp"
#include "abnn/svg.hpp"

namespace abnn {
namespace {

using nlohmann::json;

// Independent seed streams for the parts of an experiment; every stream is
// derived from (cfg.seed, salt, indices), so adding repetitions or tasks
// never shifts another stream.
constexpr std::uint64_t kTestTaskSalt = 0x7454747365ull;
constexpr std::uint64_t kMetaSalt = 0x6174656d00ull;
constexpr std::uint64_t kInitSalt = 0x74696e6900ull;
constexpr std::uint64_t kTrainSalt = 0x6e69617274ull;
constexpr std::uint64_t kEvalSalt = 0x6c61766500ull;
constexpr std::uint64_t kImageSalt = 0x67616d6900ull;
constexpr std::uint64_t kMaskSalt = 0x6b73616d00ull;
constexpr std::uint64_t kTestMaskSalt = 0x6b73616d74ull;
constexpr std::uint64_t kPredictSalt = 0x6465727000ull;

std::uint64_t mix4(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Enum <-> string
// ---------------------------------------------------------------------------

ExperimentKind experiment_from_string(const std::string& s) {
  if (s == "elbo_table") return ExperimentKind::elbo_table;
  if (s == "regress_1d") return ExperimentKind::regress_1d;
  if (s == "image_complete") return ExperimentKind::image_complete;
  throw ContractError("unknown experiment '" + s +
                      "' (expected elbo_table, regress_1d or image_complete)");
}

ObjectiveType objective_from_string(const std::string& s) {
  if (s == "elbo") return ObjectiveType::elbo;
  if (s == "npml") return ObjectiveType::npml;
  if (s == "npvi") return ObjectiveType::npvi;
  throw ContractError("unknown objective '" + s + "' (expected elbo, npml or npvi)");
}

Act act_from_string(const std::string& s) {
  if (s == "relu") return Act::relu;
  if (s == "tanh") return Act::tanh;
  if (s == "identity") return Act::identity;
  throw ContractError("unknown activation '" + s + "' (expected relu, tanh or identity)");
}

const char* to_string(Act a) {
  switch (a) {
    case Act::relu: return "relu";
    case Act::tanh: return "tanh";
    case Act::identity: return "identity";
  }
  return "?";
}

KernelKind kernel_from_string(const std::string& s) {
  if (s == "se") return KernelKind::se;
  if (s == "periodic") return KernelKind::periodic;
  if (s == "laplacian") return KernelKind::laplacian;
  throw ContractError("unknown kernel '" + s + "' (expected se, periodic or laplacian)");
}

const char* to_string(KernelKind k) {
  switch (k) {
    case KernelKind::se: return "se";
    case KernelKind::periodic: return "periodic";
    case KernelKind::laplacian: return "laplacian";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Strict JSON helpers
// ---------------------------------------------------------------------------

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const char* where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) known = true;
    if (!known)
      throw FormatError(std::string("config: unknown key '") + item.key() + "' in " + where);
  }
}

const json* maybe(const json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double get_num(const json& j, const char* key, double cur) {
  if (const json* v = maybe(j, key)) {
    if (!v->is_number()) throw FormatError(std::string("config: '") + key + "' must be a number");
    return v->get<double>();
  }
  return cur;
}

std::size_t get_size(const json& j, const char* key, std::size_t cur) {
  if (const json* v = maybe(j, key)) {
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0)
      throw FormatError(std::string("config: '") + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(v->get<std::int64_t>());
  }
  return cur;
}

std::uint64_t get_u64(const json& j, const char* key, std::uint64_t cur) {
  if (const json* v = maybe(j, key)) {
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0)
      throw FormatError(std::string("config: '") + key + "' must be a non-negative integer");
    return v->get<std::uint64_t>();
  }
  return cur;
}

bool get_bool(const json& j, const char* key, bool cur) {
  if (const json* v = maybe(j, key)) {
    if (!v->is_boolean()) throw FormatError(std::string("config: '") + key + "' must be a boolean");
    return v->get<bool>();
  }
  return cur;
}

std::string get_str(const json& j, const char* key, std::string cur) {
  if (const json* v = maybe(j, key)) {
    if (!v->is_string()) throw FormatError(std::string("config: '") + key + "' must be a string");
    return v->get<std::string>();
  }
  return cur;
}

std::vector<std::size_t> get_sizes(const json& j, const char* key,
                                   std::vector<std::size_t> cur) {
  if (const json* v = maybe(j, key)) {
    if (!v->is_array()) throw FormatError(std::string("config: '") + key + "' must be an array");
    std::vector<std::size_t> out;
    for (const json& e : *v) {
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0)
        throw FormatError(std::string("config: '") + key +
                          "' entries must be non-negative integers");
      out.push_back(static_cast<std::size_t>(e.get<std::int64_t>()));
    }
    return out;
  }
  return cur;
}

void get_range(const json& j, const char* key, double& lo, double& hi) {
  if (const json* v = maybe(j, key)) {
    if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number())
      throw FormatError(std::string("config: '") + key + "' must be a [lo, hi] number pair");
    lo = (*v)[0].get<double>();
    hi = (*v)[1].get<double>();
  }
}

// ---------------------------------------------------------------------------
// Shared experiment plumbing
// ---------------------------------------------------------------------------

void ensure_dir(const std::string& dir) { std::filesystem::create_directories(dir); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write failed for " + path);
}

void echo_config(const ExperimentConfig& cfg) {
  ensure_dir(cfg.out_dir);
  write_text(cfg.out_dir + "/config.json", config_to_json(cfg));
}

Task make_test_task(const ExperimentConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  if (cfg.eval_task == "cubic") return cubic_gap_task(rng);
  return gp_sample_task(cfg.kernel, cfg.n_lo, cfg.n_hi, cfg.interval_lo, cfg.interval_hi,
                        cfg.noise_sd, rng);
}

MetaDataset gp_meta(const ExperimentConfig& cfg, std::uint64_t seed) {
  return gp_meta_dataset(cfg.kernel, cfg.meta_size, cfg.n_lo, cfg.n_hi, cfg.interval_lo,
                         cfg.interval_hi, cfg.noise_sd, seed);
}

TrainingRun train_model(const ExperimentConfig& cfg, MetaModel& model, const MetaDataset& meta,
                        std::uint64_t train_seed, const std::string& context) {
  TrainConfig tc = cfg.train;
  tc.seed = train_seed;
  try {
    return meta_train(model, meta, cfg.resolved_objective(), tc);
  } catch (const TrainingError& e) {
    throw TrainingError(context + ": " + e.what());
  }
}

double eval_elbo(const MetaModel& model, const Task& task, std::size_t m, std::uint64_t seed) {
  return elbo_objective(model, task, m, seed).value()[0];
}

/// Moment-matched predictions on arbitrary inputs for any model, conditioned
/// on `cond` (full task for the BNN posteriors, mask-carrying task for the
/// on-grid process).
Prediction predict_any(const MetaModel& model, const Task& cond, const Tensor& x_star,
                       std::size_t samples, std::uint64_t seed) {
  switch (model.kind) {
    case ModelKind::cnp: {
      NPPrediction p = cnp_predict(model.cnp, cond, x_star);
      return {p.mean, p.var};
    }
    case ModelKind::convcnp: {
      NPPrediction p = convcnp_predict(model.convcnp, cond, x_star);
      return {p.mean, p.var};
    }
    case ModelKind::mfvi: {
      std::size_t draw = 0;
      return bnn_predict(
          model.bnn,
          [&]() {
            return mfvi_sample(model.mfvi, model.bnn, GaussianNoise(mix_seed(seed, ++draw)))
                .weights;
          },
          x_star, samples);
    }
    case ModelKind::amfvi: {
      const MFVIPosterior q = amfvi_posterior(model.amfvi, cond, model.bnn);
      std::size_t draw = 0;
      return bnn_predict(
          model.bnn,
          [&]() {
            return mfvi_sample(q, model.bnn, GaussianNoise(mix_seed(seed, ++draw))).weights;
          },
          x_star, samples);
    }
    case ModelKind::apovi: {
      std::size_t draw = 0;
      return bnn_predict(
          model.bnn,
          [&]() {
            return apovi_sample(model.apovi, cond, model.bnn,
                                GaussianNoise(mix_seed(seed, ++draw)))
                .sample.weights;
          },
          x_star, samples);
    }
    case ModelKind::povi: {
      std::size_t draw = 0;
      return bnn_predict(
          model.bnn,
          [&]() {
            return povi_sample(model.povi, model.bnn, GaussianNoise(mix_seed(seed, ++draw)))
                .sample.weights;
          },
          x_star, samples);
    }
  }
  throw ContractError("predict_any: unknown model kind");
}

ModelKind trainable_kind(ExperimentModel m) {
  switch (m) {
    case ExperimentModel::mfvi: return ModelKind::mfvi;
    case ExperimentModel::amfvi: return ModelKind::amfvi;
    case ExperimentModel::povi: return ModelKind::povi;
    case ExperimentModel::apovi: return ModelKind::apovi;
    case ExperimentModel::cnp: return ModelKind::cnp;
    case ExperimentModel::convcnp: return ModelKind::convcnp;
    case ExperimentModel::lininterp: break;
  }
  throw ContractError("the interpolation baseline has no trainable parameters");
}

std::string sizes_string(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(v[i]);
  }
  return s;
}

// Images for the completion experiment: the requested count, resampled to the
// configured square resolution.
std::vector<Image> completion_images(const ExperimentConfig& cfg) {
  const std::size_t need = cfg.meta_size + cfg.test_images;
  std::vector<Image> all;
  if (cfg.image_source.empty()) {
    Rng rng(mix_seed(cfg.seed, kImageSalt));
    all = synthetic_digit_set(need, rng);
  } else {
    all = load_idx_images(cfg.image_source);
    if (all.size() < need)
      throw DataError("image source " + cfg.image_source + " holds " +
                      std::to_string(all.size()) + " images, experiment needs " +
                      std::to_string(need));
    all.resize(need);
  }
  for (Image& img : all)
    if (img.height != cfg.image_size || img.width != cfg.image_size)
      img = area_resize(img, cfg.image_size, cfg.image_size);
  return all;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public enum names
// ---------------------------------------------------------------------------

const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::elbo_table: return "elbo_table";
    case ExperimentKind::regress_1d: return "regress_1d";
    case ExperimentKind::image_complete: return "image_complete";
  }
  return "?";
}

const char* to_string(ExperimentModel m) {
  switch (m) {
    case ExperimentModel::mfvi: return "mfvi";
    case ExperimentModel::amfvi: return "amfvi";
    case ExperimentModel::povi: return "povi";
    case ExperimentModel::apovi: return "apovi";
    case ExperimentModel::cnp: return "cnp";
    case ExperimentModel::convcnp: return "convcnp";
    case ExperimentModel::lininterp: return "lininterp";
  }
  return "?";
}

const char* to_string(ObjectiveType t) {
  switch (t) {
    case ObjectiveType::elbo: return "elbo";
    case ObjectiveType::npml: return "npml";
    case ObjectiveType::npvi: return "npvi";
  }
  return "?";
}

ExperimentModel model_from_string(const std::string& name) {
  if (name == "mfvi") return ExperimentModel::mfvi;
  if (name == "amfvi") return ExperimentModel::amfvi;
  if (name == "povi") return ExperimentModel::povi;
  if (name == "apovi") return ExperimentModel::apovi;
  if (name == "cnp") return ExperimentModel::cnp;
  if (name == "convcnp") return ExperimentModel::convcnp;
  if (name == "lininterp") return ExperimentModel::lininterp;
  throw ContractError("unknown model '" + name +
                      "' (expected mfvi, amfvi, povi, apovi, cnp, convcnp or lininterp)");
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

ObjectiveKind ExperimentConfig::resolved_objective() const {
  if (objective_explicit) return objective;
  ObjectiveKind out = objective;
  switch (model) {
    case ExperimentModel::mfvi:
    case ExperimentModel::povi: out.type = ObjectiveType::elbo; break;
    case ExperimentModel::amfvi:
    case ExperimentModel::apovi: out.type = ObjectiveType::npvi; break;
    case ExperimentModel::cnp:
    case ExperimentModel::convcnp:
    case ExperimentModel::lininterp: out.type = ObjectiveType::npml; break;
  }
  return out;
}

void ExperimentConfig::validate() const {
  kernel.validate();
  train.validate();
  resolved_objective().validate();
  if (n_lo == 0 || n_lo > n_hi) throw ContractError("config: need 1 <= n_lo <= n_hi");
  if (!(interval_lo < interval_hi)) throw ContractError("config: empty input interval");
  if (noise_sd < 0.0) throw ContractError("config: noise_sd must be non-negative");
  if (eval_task != "se" && eval_task != "cubic")
    throw ContractError("config: eval_task must be 'se' or 'cubic'");
  if (grid_points < 2) throw ContractError("config: need at least 2 grid points");
  if (test_tasks == 0 || repetitions == 0)
    throw ContractError("config: test_tasks and repetitions must be positive");
  if (image_size < 2) throw ContractError("config: image_size must be at least 2");
  if (test_images == 0) throw ContractError("config: test_images must be positive");
  if (!(mask_p_lo >= 0.0 && mask_p_lo <= mask_p_hi && mask_p_hi <= 1.0))
    throw ContractError("config: mask_p must be an ordered pair inside [0, 1]");
  if (!(test_mask_p_lo >= 0.0 && test_mask_p_lo <= test_mask_p_hi && test_mask_p_hi <= 1.0))
    throw ContractError("config: test_mask_p must be an ordered pair inside [0, 1]");
  if (prior_var <= 0.0 || noise_var <= 0.0)
    throw ContractError("config: prior_var and noise_var must be positive");
  if (povi_inducing == 0) throw ContractError("config: povi_inducing must be positive");
  if (repr_dim == 0) throw ContractError("config: repr_dim must be positive");
  if (eval_samples < 2) throw ContractError("config: eval_samples must be at least 2");
  if (points_per_unit <= 0.0) throw ContractError("config: points_per_unit must be positive");
  if (cnn_channels.size() != cnn_kernels.size())
    throw ContractError("config: cnn_channels and cnn_kernels must have equal lengths");
  if (model == ExperimentModel::lininterp && experiment != ExperimentKind::image_complete)
    throw ContractError("config: lininterp only supports the image_complete experiment");

  // Objective/model support matrix.
  const ObjectiveType obj = resolved_objective().type;
  switch (model) {
    case ExperimentModel::mfvi:
    case ExperimentModel::povi:
      if (obj != ObjectiveType::elbo)
        throw ContractError("config: this posterior trains with the elbo objective only");
      break;
    case ExperimentModel::cnp:
    case ExperimentModel::convcnp:
      if (obj != ObjectiveType::npml)
        throw ContractError("config: conditional processes train with npml only");
      break;
    default: break;
  }
}

ExperimentConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("config: top level must be a JSON object");

  try {
    ExperimentConfig cfg;
    check_keys(j, {"experiment", "model", "objective", "train", "seed", "out", "data",
                   "network"},
               "the top level");
    if (maybe(j, "experiment"))
      cfg.experiment = experiment_from_string(get_str(j, "experiment", ""));
    if (maybe(j, "model")) cfg.model = model_from_string(get_str(j, "model", ""));
    cfg.seed = get_u64(j, "seed", cfg.seed);
    cfg.out_dir = get_str(j, "out", cfg.out_dir);

    if (const json* o = maybe(j, "objective")) {
      check_keys(*o, {"type", "mc_samples"}, "objective");
      if (maybe(*o, "type")) {
        cfg.objective.type = objective_from_string(get_str(*o, "type", ""));
        cfg.objective_explicit = true;
      }
      cfg.objective.mc_samples = get_size(*o, "mc_samples", cfg.objective.mc_samples);
    }

    if (const json* t = maybe(j, "train")) {
      check_keys(*t,
                 {"learning_rate", "batch_size", "max_epochs", "early_stop_start", "patience",
                  "window"},
                 "train");
      cfg.train.learning_rate = get_num(*t, "learning_rate", cfg.train.learning_rate);
      cfg.train.batch_size = get_size(*t, "batch_size", cfg.train.batch_size);
      cfg.train.max_epochs = get_size(*t, "max_epochs", cfg.train.max_epochs);
      cfg.train.early_stop_start = get_size(*t, "early_stop_start", cfg.train.early_stop_start);
      cfg.train.patience = get_size(*t, "patience", cfg.train.patience);
      cfg.train.window = get_size(*t, "window", cfg.train.window);
    }

    if (const json* d = maybe(j, "data")) {
      check_keys(*d,
                 {"kernel", "meta_size", "n_lo", "n_hi", "interval", "noise_sd", "eval_task",
                  "grid_points", "test_tasks", "repetitions", "image_source", "image_size",
                  "test_images", "mask_p", "test_mask_p", "binarise"},
                 "data");
      if (const json* k = maybe(*d, "kernel")) {
        check_keys(*k, {"kind", "lengthscale", "signal_var", "period"}, "data.kernel");
        if (maybe(*k, "kind")) cfg.kernel.kind = kernel_from_string(get_str(*k, "kind", ""));
        cfg.kernel.lengthscale = get_num(*k, "lengthscale", cfg.kernel.lengthscale);
        cfg.kernel.signal_var = get_num(*k, "signal_var", cfg.kernel.signal_var);
        cfg.kernel.period = get_num(*k, "period", cfg.kernel.period);
      }
      cfg.meta_size = get_size(*d, "meta_size", cfg.meta_size);
      cfg.n_lo = get_size(*d, "n_lo", cfg.n_lo);
      cfg.n_hi = get_size(*d, "n_hi", cfg.n_hi);
      get_range(*d, "interval", cfg.interval_lo, cfg.interval_hi);
      cfg.noise_sd = get_num(*d, "noise_sd", cfg.noise_sd);
      cfg.eval_task = get_str(*d, "eval_task", cfg.eval_task);
      cfg.grid_points = get_size(*d, "grid_points", cfg.grid_points);
      cfg.test_tasks = get_size(*d, "test_tasks", cfg.test_tasks);
      cfg.repetitions = get_size(*d, "repetitions", cfg.repetitions);
      cfg.image_source = get_str(*d, "image_source", cfg.image_source);
      cfg.image_size = get_size(*d, "image_size", cfg.image_size);
      cfg.test_images = get_size(*d, "test_images", cfg.test_images);
      get_range(*d, "mask_p", cfg.mask_p_lo, cfg.mask_p_hi);
      get_range(*d, "test_mask_p", cfg.test_mask_p_lo, cfg.test_mask_p_hi);
      cfg.binarise = get_bool(*d, "binarise", cfg.binarise);
    }

    if (const json* n = maybe(j, "network")) {
      check_keys(*n,
                 {"bnn_hidden", "activation", "prior_var", "noise_var", "infer_hidden",
                  "povi_inducing", "repr_dim", "np_hidden", "cnn_channels", "cnn_kernels",
                  "head_hidden", "points_per_unit", "eval_samples"},
                 "network");
      cfg.bnn_hidden = get_sizes(*n, "bnn_hidden", cfg.bnn_hidden);
      if (maybe(*n, "activation")) cfg.activation = act_from_string(get_str(*n, "activation", ""));
      cfg.prior_var = get_num(*n, "prior_var", cfg.prior_var);
      cfg.noise_var = get_num(*n, "noise_var", cfg.noise_var);
      cfg.infer_hidden = get_sizes(*n, "infer_hidden", cfg.infer_hidden);
      cfg.povi_inducing = get_size(*n, "povi_inducing", cfg.povi_inducing);
      cfg.repr_dim = get_size(*n, "repr_dim", cfg.repr_dim);
      cfg.np_hidden = get_sizes(*n, "np_hidden", cfg.np_hidden);
      cfg.cnn_channels = get_sizes(*n, "cnn_channels", cfg.cnn_channels);
      cfg.cnn_kernels = get_sizes(*n, "cnn_kernels", cfg.cnn_kernels);
      cfg.head_hidden = get_sizes(*n, "head_hidden", cfg.head_hidden);
      cfg.points_per_unit = get_num(*n, "points_per_unit", cfg.points_per_unit);
      cfg.eval_samples = get_size(*n, "eval_samples", cfg.eval_samples);
    }
    return cfg;
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config file " + path);
  const std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  return config_from_json(text);
}

std::string config_to_json(const ExperimentConfig& cfg) {
  const ObjectiveKind obj = cfg.resolved_objective();
  json j;
  j["experiment"] = to_string(cfg.experiment);
  j["model"] = to_string(cfg.model);
  j["objective"] = {{"type", to_string(obj.type)}, {"mc_samples", obj.mc_samples}};
  j["train"] = {{"learning_rate", cfg.train.learning_rate},
                {"batch_size", cfg.train.batch_size},
                {"max_epochs", cfg.train.max_epochs},
                {"early_stop_start", cfg.train.early_stop_start},
                {"patience", cfg.train.patience},
                {"window", cfg.train.window}};
  j["seed"] = cfg.seed;
  j["out"] = cfg.out_dir;
  j["data"] = {{"kernel",
                {{"kind", to_string(cfg.kernel.kind)},
                 {"lengthscale", cfg.kernel.lengthscale},
                 {"signal_var", cfg.kernel.signal_var},
                 {"period", cfg.kernel.period}}},
               {"meta_size", cfg.meta_size},
               {"n_lo", cfg.n_lo},
               {"n_hi", cfg.n_hi},
               {"interval", {cfg.interval_lo, cfg.interval_hi}},
               {"noise_sd", cfg.noise_sd},
               {"eval_task", cfg.eval_task},
               {"grid_points", cfg.grid_points},
               {"test_tasks", cfg.test_tasks},
               {"repetitions", cfg.repetitions},
               {"image_source", cfg.image_source},
               {"image_size", cfg.image_size},
               {"test_images", cfg.test_images},
               {"mask_p", {cfg.mask_p_lo, cfg.mask_p_hi}},
               {"test_mask_p", {cfg.test_mask_p_lo, cfg.test_mask_p_hi}},
               {"binarise", cfg.binarise}};
  j["network"] = {{"bnn_hidden", cfg.bnn_hidden},
                  {"activation", to_string(cfg.activation)},
                  {"prior_var", cfg.prior_var},
                  {"noise_var", cfg.noise_var},
                  {"infer_hidden", cfg.infer_hidden},
                  {"povi_inducing", cfg.povi_inducing},
                  {"repr_dim", cfg.repr_dim},
                  {"np_hidden", cfg.np_hidden},
                  {"cnn_channels", cfg.cnn_channels},
                  {"cnn_kernels", cfg.cnn_kernels},
                  {"head_hidden", cfg.head_hidden},
                  {"points_per_unit", cfg.points_per_unit},
                  {"eval_samples", cfg.eval_samples}};
  return j.dump(2) + "\n";
}

void apply_overrides(ExperimentConfig& cfg, const CliOverrides& o) {
  if (o.model) {
    cfg.model = model_from_string(*o.model);
    // A model switch invalidates an explicitly configured objective choice
    // only if the combination is unsupported; validate() reports that.
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.meta_size) cfg.meta_size = *o.meta_size;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

MetricsRecord aggregate_metrics(const std::string& metric, std::vector<MetricsRow> raw) {
  if (raw.empty()) throw ContractError("aggregate_metrics: no measurements");
  MetricsRecord rec;
  rec.metric = metric;
  rec.raw = std::move(raw);

  std::size_t reps = 0;
  for (const MetricsRow& r : rec.raw) reps = std::max(reps, r.repetition + 1);
  std::vector<double> sums(reps, 0.0);
  std::vector<std::size_t> counts(reps, 0);
  for (const MetricsRow& r : rec.raw) {
    sums[r.repetition] += r.value;
    counts[r.repetition] += 1;
  }
  rec.per_repetition.resize(reps);
  for (std::size_t r = 0; r < reps; ++r) {
    if (counts[r] == 0)
      throw ContractError("aggregate_metrics: repetition " + std::to_string(r) +
                          " has no measurements");
    rec.per_repetition[r] = sums[r] / static_cast<double>(counts[r]);
  }

  double total = 0.0;
  for (double v : rec.per_repetition) total += v;
  rec.mean = total / static_cast<double>(reps);

  bool identical = true;
  for (double v : rec.per_repetition)
    if (v != rec.per_repetition.front()) identical = false;
  if (identical || reps == 1) {
    // Identical repetitions have exactly zero spread; the accumulation
    // round-off of the general formula must not blur that.
    rec.mean = rec.per_repetition.front();
    rec.sd = 0.0;
  } else {
    double acc = 0.0;
    for (double v : rec.per_repetition) acc += (v - rec.mean) * (v - rec.mean);
    rec.sd = std::sqrt(acc / static_cast<double>(reps - 1));
  }
  return rec;
}

void write_metrics(const MetricsRecord& record, const std::string& dir) {
  ensure_dir(dir);
  std::string raw = "repetition,unit," + record.metric + "\n";
  for (const MetricsRow& r : record.raw)
    raw += std::to_string(r.repetition) + "," + std::to_string(r.unit) + "," +
           fmt17(r.value) + "\n";
  write_text(dir + "/raw.csv", raw);

  std::string agg = "metric,mean,sd,repetitions\n";
  agg += record.metric + "," + fmt17(record.mean) + "," + fmt17(record.sd) + "," +
         std::to_string(record.per_repetition.size()) + "\n";
  write_text(dir + "/aggregate.csv", agg);
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

MetaModel build_model(const ExperimentConfig& cfg, std::size_t x_dim, Rng& rng) {
  MetaModel model;
  model.kind = trainable_kind(cfg.model);

  if (model.is_bnn()) {
    model.bnn.widths.clear();
    model.bnn.widths.push_back(x_dim);
    for (std::size_t h : cfg.bnn_hidden) model.bnn.widths.push_back(h);
    model.bnn.widths.push_back(1);
    model.bnn.act = cfg.activation;
    model.bnn.prior_var = cfg.prior_var;
    model.bnn.likelihood = cfg.experiment == ExperimentKind::image_complete && cfg.binarise
                               ? Likelihood::bernoulli()
                               : Likelihood::gaussian(cfg.noise_var);
    model.bnn.validate();
  }

  switch (model.kind) {
    case ModelKind::mfvi: model.mfvi = MFVIPosterior::init(model.bnn, rng); break;
    case ModelKind::amfvi:
      model.amfvi = AMFVIModel::init(model.bnn, cfg.infer_hidden, cfg.activation, rng);
      break;
    case ModelKind::apovi:
      model.apovi = APOVIModel::init(model.bnn, cfg.infer_hidden, cfg.activation, rng);
      break;
    case ModelKind::povi:
      model.povi = POVIPosterior::init(model.bnn, cfg.povi_inducing, rng);
      break;
    case ModelKind::cnp:
      model.cnp = CNPModel::init(x_dim, 1, cfg.repr_dim, cfg.np_hidden, cfg.np_hidden,
                                 cfg.activation, rng);
      break;
    case ModelKind::convcnp:
      if (cfg.experiment == ExperimentKind::image_complete) {
        model.convcnp =
            ConvCNPModel::init_on_grid_2d(cfg.image_size, cfg.image_size, 1, cfg.cnn_channels,
                                          cfg.cnn_kernels, cfg.head_hidden, cfg.activation, rng);
      } else {
        model.convcnp = ConvCNPModel::init_off_grid_1d(
            1, cfg.points_per_unit, 2.0 / cfg.points_per_unit, cfg.cnn_channels,
            cfg.cnn_kernels, cfg.head_hidden, cfg.activation, rng);
      }
      break;
  }
  return model;
}

std::vector<std::string> parameter_names(const MetaModel& model) {
  const std::size_t n = model.parameters().size();
  std::vector<std::string> names(n);
  for (std::size_t i = 0; i < n; ++i) names[i] = "p" + std::to_string(i);
  return names;
}

std::string model_identifier(const MetaModel& model) {
  std::string id;
  switch (model.kind) {
    case ModelKind::mfvi: id = "mfvi"; break;
    case ModelKind::amfvi: id = "amfvi"; break;
    case ModelKind::apovi: id = "apovi"; break;
    case ModelKind::povi: id = "povi"; break;
    case ModelKind::cnp: id = "cnp"; break;
    case ModelKind::convcnp: id = "convcnp"; break;
  }
  if (model.is_bnn()) id += " " + sizes_string(model.bnn.widths);
  return id;
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

MetricsRecord run_elbo_table(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.model != ExperimentModel::povi && cfg.model != ExperimentModel::apovi)
    throw ContractError("run_elbo_table: model must be povi or apovi");
  echo_config(cfg);

  std::vector<Task> tests;
  for (std::size_t t = 0; t < cfg.test_tasks; ++t)
    tests.push_back(make_test_task(cfg, mix_seed(cfg.seed, kTestTaskSalt, t + 1)));

  const bool per_task = cfg.model == ExperimentModel::povi || cfg.meta_size == 0;
  std::vector<MetricsRow> rows;
  for (std::size_t r = 0; r < cfg.repetitions; ++r) {
    if (per_task) {
      // The inducing-point posterior fits each test task; so does the
      // amortised one in the size-0 convention, where the meta-dataset is
      // the test task itself.
      for (std::size_t t = 0; t < cfg.test_tasks; ++t) {
        Rng init(mix4(cfg.seed, kInitSalt, r + 1, t + 1));
        MetaModel model = build_model(cfg, 1, init);
        MetaDataset meta;
        meta.tasks.push_back(tests[t]);
        train_model(cfg, model, meta, mix4(cfg.seed, kTrainSalt, r + 1, t + 1),
                    "elbo-table repetition " + std::to_string(r) + ", task " +
                        std::to_string(t));
        rows.push_back({r, t,
                        eval_elbo(model, tests[t], cfg.eval_samples,
                                  mix4(cfg.seed, kEvalSalt, r + 1, t + 1))});
      }
    } else {
      Rng init(mix_seed(cfg.seed, kInitSalt, r + 1));
      MetaModel model = build_model(cfg, 1, init);
      const MetaDataset meta = gp_meta(cfg, mix_seed(cfg.seed, kMetaSalt, r + 1));
      train_model(cfg, model, meta, mix_seed(cfg.seed, kTrainSalt, r + 1),
                  "elbo-table repetition " + std::to_string(r));
      for (std::size_t t = 0; t < cfg.test_tasks; ++t)
        rows.push_back({r, t,
                        eval_elbo(model, tests[t], cfg.eval_samples,
                                  mix4(cfg.seed, kEvalSalt, r + 1, t + 1))});
    }
  }

  MetricsRecord rec = aggregate_metrics("elbo", std::move(rows));
  write_metrics(rec, cfg.out_dir);
  return rec;
}

Regress1dResult run_regress_1d(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.model != ExperimentModel::amfvi && cfg.model != ExperimentModel::apovi &&
      cfg.model != ExperimentModel::convcnp)
    throw ContractError("run_regress_1d: model must be amfvi, apovi or convcnp");
  if (cfg.meta_size == 0)
    throw ContractError("run_regress_1d: needs a non-empty meta-dataset");
  echo_config(cfg);

  Rng init(mix_seed(cfg.seed, kInitSalt, 1));
  MetaModel model = build_model(cfg, 1, init);
  const MetaDataset meta = gp_meta(cfg, mix_seed(cfg.seed, kMetaSalt, 1));

  Regress1dResult result;
  result.training =
      train_model(cfg, model, meta, mix_seed(cfg.seed, kTrainSalt, 1), "regress-1d");
  result.eval_task = make_test_task(cfg, mix_seed(cfg.seed, kTestTaskSalt, 1));

  // Evaluation grid: the held-out task's input hull, padded by 10%.
  double x_lo = result.eval_task.x.at2(0, 0), x_hi = x_lo;
  for (std::size_t i = 0; i < result.eval_task.size(); ++i) {
    x_lo = std::min(x_lo, result.eval_task.x.at2(i, 0));
    x_hi = std::max(x_hi, result.eval_task.x.at2(i, 0));
  }
  const double pad = 0.1 * (x_hi > x_lo ? x_hi - x_lo : 1.0);
  x_lo -= pad;
  x_hi += pad;
  const std::size_t g = cfg.grid_points;
  std::vector<double> gx(g);
  for (std::size_t i = 0; i < g; ++i)
    gx[i] = x_lo + (x_hi - x_lo) * static_cast<double>(i) / static_cast<double>(g - 1);

  const Prediction pred =
      predict_any(model, result.eval_task, Tensor::from({g, 1}, std::vector<double>(gx)),
                  cfg.eval_samples, mix_seed(cfg.seed, kPredictSalt, 1));

  result.grid = gx;
  result.mean.resize(g);
  result.lower.resize(g);
  result.upper.resize(g);
  std::string csv = "x,mean,sd,lower,upper\n";
  for (std::size_t i = 0; i < g; ++i) {
    const double m = pred.mean.at2(i, 0);
    const double sd = std::sqrt(pred.var.at2(i, 0));
    result.mean[i] = m;
    result.lower[i] = m - 1.96 * sd;
    result.upper[i] = m + 1.96 * sd;
    csv += fmt17(gx[i]) + "," + fmt17(m) + "," + fmt17(sd) + "," + fmt17(result.lower[i]) +
           "," + fmt17(result.upper[i]) + "\n";
  }
  write_text(cfg.out_dir + "/predictions.csv", csv);

  std::string hist = "epoch,raw,smoothed\n";
  for (std::size_t e = 0; e < result.training.raw.size(); ++e)
    hist += std::to_string(e) + "," + fmt17(result.training.raw[e]) + "," +
            fmt17(result.training.smoothed[e]) + "\n";
  write_text(cfg.out_dir + "/history.csv", hist);

  std::vector<double> cx(result.eval_task.size()), cy(result.eval_task.size());
  for (std::size_t i = 0; i < result.eval_task.size(); ++i) {
    cx[i] = result.eval_task.x.at2(i, 0);
    cy[i] = result.eval_task.y.at2(i, 0);
  }
  PlotSeries mean_series{"predictive mean", result.grid, result.mean, "#1f6fb4", true};
  PlotBand band{result.grid, result.lower, result.upper, "#1f6fb4", 0.25};
  PlotPoints context{"observed points", cx, cy, "#222222", 3.0};
  emit_svg_plot({mean_series}, {band}, {context}, cfg.out_dir + "/figure.svg",
                std::string(to_string(cfg.model)) + " on a held-out task (meta size " +
                    std::to_string(cfg.meta_size) + ")");
  return result;
}

MetricsRecord run_image_complete(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.model != ExperimentModel::apovi && cfg.model != ExperimentModel::convcnp &&
      cfg.model != ExperimentModel::lininterp)
    throw ContractError("run_image_complete: model must be apovi, convcnp or lininterp");
  if (cfg.model != ExperimentModel::lininterp && cfg.meta_size == 0)
    throw ContractError("run_image_complete: needs a non-empty meta-dataset");
  echo_config(cfg);

  const std::vector<Image> all = completion_images(cfg);
  const std::vector<Image> train_images(all.begin(),
                                        all.begin() + static_cast<std::ptrdiff_t>(cfg.meta_size));
  std::vector<ImageTask> tests;
  for (std::size_t i = 0; i < cfg.test_images; ++i) {
    Rng rng(mix_seed(cfg.seed, kTestMaskSalt, i + 1));
    const double p = rng.uniform(cfg.test_mask_p_lo, cfg.test_mask_p_hi);
    tests.push_back(make_image_task(all[cfg.meta_size + i], p, cfg.binarise, rng));
  }

  const MetaDataset meta =
      cfg.model == ExperimentModel::lininterp
          ? MetaDataset{}
          : image_meta_dataset(train_images, cfg.mask_p_lo, cfg.mask_p_hi, cfg.binarise,
                               mix_seed(cfg.seed, kMaskSalt, 1));

  const std::size_t hw = cfg.image_size * cfg.image_size;
  std::vector<MetricsRow> rows;
  for (std::size_t r = 0; r < cfg.repetitions; ++r) {
    MetaModel model;
    if (cfg.model != ExperimentModel::lininterp) {
      Rng init(mix_seed(cfg.seed, kInitSalt, r + 1));
      model = build_model(cfg, 2, init);
      train_model(cfg, model, meta, mix_seed(cfg.seed, kTrainSalt, r + 1),
                  "image-complete repetition " + std::to_string(r));
    }

    for (std::size_t i = 0; i < cfg.test_images; ++i) {
      const ImageTask& task = tests[i];
      std::vector<double> mean(hw), sd(hw, 0.0);
      if (cfg.model == ExperimentModel::lininterp) {
        const Image filled = linear_interp_baseline(task);
        mean = filled.pixels;
      } else {
        Prediction pred;
        if (cfg.model == ExperimentModel::convcnp) {
          pred = predict_any(model, task.flat, task.flat.x, cfg.eval_samples,
                             mix4(cfg.seed, kPredictSalt, r + 1, i + 1));
        } else {
          pred = predict_any(model, task.flat.context_subset(), task.flat.x, cfg.eval_samples,
                             mix4(cfg.seed, kPredictSalt, r + 1, i + 1));
        }
        for (std::size_t px = 0; px < hw; ++px) {
          mean[px] = pred.mean.at2(px, 0);
          sd[px] = std::sqrt(pred.var.at2(px, 0));
        }
      }

      double err = 0.0;
      for (std::size_t px = 0; px < hw; ++px) {
        const double d = mean[px] - task.values[px];
        err += d * d;
      }
      rows.push_back({r, i, err});

      if (r == 0) {
        Image original{cfg.image_size, cfg.image_size, task.values};
        std::vector<bool> hidden(hw);
        for (std::size_t px = 0; px < hw; ++px) hidden[px] = !task.mask[px];
        Image mean_img{cfg.image_size, cfg.image_size, mean};
        double sd_max = 0.0;
        for (double v : sd) sd_max = std::max(sd_max, v);
        std::vector<double> sd_scaled(hw, 0.0);
        if (sd_max > 0.0)
          for (std::size_t px = 0; px < hw; ++px) sd_scaled[px] = sd[px] / sd_max;
        Image sd_img{cfg.image_size, cfg.image_size, sd_scaled};
        ensure_dir(cfg.out_dir + "/figures");
        emit_svg_image_row({{"original", original, {}},
                            {"context", original, hidden},
                            {"predicted mean", mean_img, {}},
                            {"predictive sd (scaled)", sd_img, {}}},
                           cfg.out_dir + "/figures/image" + std::to_string(i) + ".svg");
      }
    }
  }

  MetricsRecord rec = aggregate_metrics("sq_error_sum", std::move(rows));
  write_metrics(rec, cfg.out_dir);
  return rec;
}

TrainingRun run_train(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.meta_size == 0) throw ContractError("run_train: needs a non-empty meta-dataset");
  echo_config(cfg);

  MetaDataset meta;
  std::size_t x_dim = 1;
  if (cfg.experiment == ExperimentKind::image_complete) {
    x_dim = 2;
    std::vector<Image> imgs = completion_images(cfg);
    imgs.resize(cfg.meta_size);
    meta = image_meta_dataset(imgs, cfg.mask_p_lo, cfg.mask_p_hi, cfg.binarise,
                              mix_seed(cfg.seed, kMaskSalt, 1));
  } else {
    meta = gp_meta(cfg, mix_seed(cfg.seed, kMetaSalt, 1));
  }

  Rng init(mix_seed(cfg.seed, kInitSalt, 1));
  MetaModel model = build_model(cfg, x_dim, init);
  const TrainingRun run =
      train_model(cfg, model, meta, mix_seed(cfg.seed, kTrainSalt, 1), "train");

  std::string hist = "epoch,raw,smoothed\n";
  for (std::size_t e = 0; e < run.raw.size(); ++e)
    hist += std::to_string(e) + "," + fmt17(run.raw[e]) + "," + fmt17(run.smoothed[e]) + "\n";
  write_text(cfg.out_dir + "/history.csv", hist);

  const std::vector<Tensor> params = model.parameters();
  save_checkpoint(checkpoint_from_params(model_identifier(model), parameter_names(model), params),
                  cfg.out_dir + "/model.ckpt");
  return run;
}

}  // namespace abnn
