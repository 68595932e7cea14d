#include "abnn/neural_process.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "abnn/errors.hpp"

namespace abnn {
namespace {

constexpr double kLog2Pi = 1.8378770664093453;

/// Split a [T x 2P] head output into mean and floored variance.
NPPrediction split_head(const Tensor& out, std::size_t p) {
  NPPrediction pred;
  pred.mean = cols_range(out, 0, p);
  pred.var = add_const(exp(cols_range(out, p, p)), kNpVarianceFloor);
  return pred;
}

}  // namespace

// ---------------------------------------------------------------------------
// Predictive log-likelihood
// ---------------------------------------------------------------------------

Tensor np_log_likelihood(const NPPrediction& pred, const Tensor& y) {
  if (y.ndim() != 2 || pred.mean.rows() != y.rows() || pred.mean.cols() != y.cols())
    throw ShapeError("np_log_likelihood: prediction and target shapes differ");
  if (pred.kind == NPPrediction::Kind::gaussian) {
    Tensor dev = div(square(sub(y, pred.mean)), pred.var);
    return scale(sum(add(add_const(log(pred.var), kLog2Pi), dev)), -0.5);
  }
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y.at(i) != 0.0 && y.at(i) != 1.0)
      throw DataError("np_log_likelihood: bernoulli targets must be exactly 0 or 1");
  Tensor prob = clamp(pred.mean, 1e-12, 1.0 - 1e-12);
  Tensor miss = add_const(neg(y), 1.0);
  return sum(add(mul(y, log(prob)), mul(miss, log(add_const(neg(prob), 1.0)))));
}

// ---------------------------------------------------------------------------
// CNP
// ---------------------------------------------------------------------------

CNPModel CNPModel::init(std::size_t x_dim, std::size_t y_dim, std::size_t repr_dim,
                        const std::vector<std::size_t>& enc_hidden,
                        const std::vector<std::size_t>& dec_hidden, Act act, Rng& rng) {
  if (x_dim == 0 || y_dim == 0 || repr_dim == 0)
    throw ContractError("CNPModel: dimensions must be positive");
  std::vector<std::size_t> ew{x_dim + y_dim};
  ew.insert(ew.end(), enc_hidden.begin(), enc_hidden.end());
  ew.push_back(repr_dim);
  std::vector<std::size_t> dw{repr_dim + x_dim};
  dw.insert(dw.end(), dec_hidden.begin(), dec_hidden.end());
  dw.push_back(2 * y_dim);
  CNPModel m;
  m.encoder = MLPParams::init(std::move(ew), act, rng);
  m.decoder = MLPParams::init(std::move(dw), act, rng);
  return m;
}

std::vector<Tensor> CNPModel::parameters() const {
  std::vector<Tensor> out = encoder.parameters();
  auto dp = decoder.parameters();
  out.insert(out.end(), dp.begin(), dp.end());
  return out;
}

NPPrediction cnp_predict(const CNPModel& m, const Task& context, const Tensor& targets) {
  context.validate();
  if (targets.ndim() != 2 || targets.cols() != m.x_dim())
    throw ShapeError("cnp_predict: target input width does not match the model");
  const std::size_t t = targets.rows();
  const std::size_t r = m.repr_dim();
  Tensor rep;  // [1 x R]
  if (context.size() == 0) {
    rep = Tensor::zeros({1, r});
  } else {
    if (context.x.cols() != m.x_dim() || context.y.cols() != m.y_dim())
      throw ShapeError("cnp_predict: context dimensions do not match the model");
    Tensor enc = mlp_forward(m.encoder, concat_cols(context.x, context.y));  // [N x R]
    rep = reshape(scale(sum_cols(enc), 1.0 / static_cast<double>(context.size())), {1, r});
  }
  Tensor tiled = matmul(Tensor::full({t, 1}, 1.0), rep);  // [T x R]
  Tensor out = mlp_forward(m.decoder, concat_cols(tiled, targets));
  return split_head(out, m.y_dim());
}

// ---------------------------------------------------------------------------
// ConvCNP
// ---------------------------------------------------------------------------

ConvCNPModel ConvCNPModel::init_off_grid_1d(std::size_t y_dim, double points_per_unit,
                                            double lengthscale,
                                            const std::vector<std::size_t>& channels,
                                            const std::vector<std::size_t>& kernels,
                                            const std::vector<std::size_t>& head_hidden,
                                            Act act, Rng& rng) {
  if (y_dim == 0) throw ContractError("ConvCNPModel: y_dim must be positive");
  if (!(points_per_unit > 0.0)) throw ContractError("ConvCNPModel: points_per_unit must be positive");
  if (channels.empty()) throw ContractError("ConvCNPModel: need at least one CNN layer");
  ConvCNPModel m;
  m.on_grid = false;
  m.points_per_unit = points_per_unit;
  m.input_conv = SetConvConfig::init(lengthscale);
  m.output_conv = SetConvConfig::init(lengthscale);
  m.cnn = GridCNNParams::init(/*one_d=*/true, 1 + y_dim, channels, kernels,
                              std::vector<bool>(channels.size(), false), act, rng);
  std::vector<std::size_t> hw{1 + channels.back()};
  hw.insert(hw.end(), head_hidden.begin(), head_hidden.end());
  hw.push_back(2 * y_dim);
  m.head = MLPParams::init(std::move(hw), act, rng);
  return m;
}

ConvCNPModel ConvCNPModel::init_on_grid_2d(std::size_t h, std::size_t w, std::size_t y_dim,
                                           const std::vector<std::size_t>& channels,
                                           const std::vector<std::size_t>& kernels,
                                           const std::vector<std::size_t>& head_hidden,
                                           Act act, Rng& rng) {
  if (h < 2 || w < 2) throw ContractError("ConvCNPModel: grid must be at least 2x2");
  if (y_dim == 0) throw ContractError("ConvCNPModel: y_dim must be positive");
  if (channels.empty()) throw ContractError("ConvCNPModel: need at least one CNN layer");
  ConvCNPModel m;
  m.on_grid = true;
  m.grid_h = h;
  m.grid_w = w;
  m.cnn = GridCNNParams::init(/*one_d=*/false, 1 + y_dim, channels, kernels,
                              std::vector<bool>(channels.size(), false), act, rng);
  std::vector<std::size_t> hw{channels.back()};
  hw.insert(hw.end(), head_hidden.begin(), head_hidden.end());
  hw.push_back(2 * y_dim);
  m.head = MLPParams::init(std::move(hw), act, rng);
  return m;
}

std::vector<Tensor> ConvCNPModel::parameters() const {
  std::vector<Tensor> out;
  if (input_conv.log_lengthscale.defined()) out.push_back(input_conv.log_lengthscale);
  if (output_conv.log_lengthscale.defined()) out.push_back(output_conv.log_lengthscale);
  auto cp = cnn.parameters();
  out.insert(out.end(), cp.begin(), cp.end());
  auto hp = head.parameters();
  out.insert(out.end(), hp.begin(), hp.end());
  return out;
}

namespace {

NPPrediction predict_off_grid(const ConvCNPModel& m, const Task& context,
                              const Tensor& targets) {
  if (targets.cols() != 1)
    throw ShapeError("convcnp_predict: the off-grid variant takes 1-D inputs");
  const std::size_t p = m.y_dim();
  if (context.size() > 0 &&
      (context.x.cols() != 1 || context.y.cols() != p))
    throw ShapeError("convcnp_predict: context dimensions do not match the model");

  // Internal grid at integer multiples of the spacing, covering all inputs
  // plus the margin. Anchoring to multiples makes integer-cell shifts exact.
  double xmin = targets.at(0), xmax = targets.at(0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    xmin = std::min(xmin, targets.at(i));
    xmax = std::max(xmax, targets.at(i));
  }
  for (std::size_t i = 0; i < context.size(); ++i) {
    xmin = std::min(xmin, context.x.at(i));
    xmax = std::max(xmax, context.x.at(i));
  }
  const double ppu = m.points_per_unit;
  const long i0 = static_cast<long>(std::floor((xmin - m.margin) * ppu));
  const long i1 = static_cast<long>(std::ceil((xmax + m.margin) * ppu));
  const std::size_t k = static_cast<std::size_t>(i1 - i0 + 1);
  std::vector<double> gv(k);
  for (std::size_t i = 0; i < k; ++i)
    gv[i] = static_cast<double>(i0 + static_cast<long>(i)) / ppu;
  Tensor grid = Tensor::from({k, 1}, std::move(gv));

  Tensor rep;  // [K x (1+P)] functional representation on the grid
  if (context.size() == 0) {
    rep = Tensor::zeros({k, 1 + p});
  } else {
    rep = set_conv(context.x, context.y, grid, m.input_conv);
  }
  Tensor feat = grid_cnn_forward(m.cnn, transpose(rep));            // [C x K]
  Tensor smoothed = set_conv(grid, transpose(feat), targets, m.output_conv);  // [T x (1+C)]
  return split_head(mlp_forward(m.head, smoothed), p);
}

NPPrediction predict_on_grid(const ConvCNPModel& m, const Task& context,
                             const Tensor& targets) {
  const std::size_t h = m.grid_h, w = m.grid_w, hw = h * w;
  const std::size_t p = m.y_dim();
  if (!context.has_mask())
    throw ContractError("convcnp_predict: the on-grid variant needs a context mask");
  if (context.size() != hw || context.y.cols() != p)
    throw ShapeError("convcnp_predict: context must cover the full grid, row-major");
  if (targets.rows() != hw)
    throw ShapeError("convcnp_predict: on-grid targets must cover every pixel");
  // Density channel (1 where observed) plus the masked value channels;
  // missing pixels carry value 0 so absence and zero stay distinguishable.
  std::vector<double> ch((1 + p) * hw, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    if (!context.context_mask[i]) continue;
    ch[i] = 1.0;
    for (std::size_t c = 0; c < p; ++c) ch[(1 + c) * hw + i] = context.y.at2(i, c);
  }
  Tensor input = Tensor::from({1 + p, h, w}, std::move(ch));
  Tensor feat = grid_cnn_forward(m.cnn, input);  // [C x H x W]
  return split_head(mlp_forward(m.head, channels_to_rows(feat)), p);
}

}  // namespace

NPPrediction convcnp_predict(const ConvCNPModel& m, const Task& context, const Tensor& targets) {
  context.validate();
  if (targets.ndim() != 2) throw ShapeError("convcnp_predict: targets must be 2-D");
  if (targets.rows() == 0) throw ShapeError("convcnp_predict: no target points");
  return m.on_grid ? predict_on_grid(m, context, targets)
                   : predict_off_grid(m, context, targets);
}

}  // namespace abnn
