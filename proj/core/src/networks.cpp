#include "abnn/networks.hpp"

#include <cmath>

namespace abnn {

MLPParams MLPParams::init(std::vector<std::size_t> widths, Act act, Rng& rng) {
  if (widths.size() < 2) throw ContractError("MLPParams: need at least input and output widths");
  for (auto w : widths)
    if (w == 0) throw ContractError("MLPParams: zero layer width");
  MLPParams p;
  p.widths = std::move(widths);
  p.act = act;
  for (std::size_t l = 0; l + 1 < p.widths.size(); ++l) {
    std::size_t win = p.widths[l], wout = p.widths[l + 1];
    std::vector<double> w((win + 1) * wout, 0.0);
    double sd = 1.0 / std::sqrt(static_cast<double>(win));
    for (std::size_t i = 0; i < win; ++i)  // bias row stays zero
      for (std::size_t j = 0; j < wout; ++j) w[i * wout + j] = sd * rng.normal();
    p.weights.push_back(Tensor::param({win + 1, wout}, std::move(w)));
  }
  return p;
}

Tensor mlp_forward(const MLPParams& p, const Tensor& x) {
  if (x.ndim() != 2 || x.cols() != p.in_dim())
    throw ShapeError("mlp_forward: input is " + shape_str(x.shape()) + ", expected [N x " +
                     std::to_string(p.in_dim()) + "]");
  Tensor h = x;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    if (l > 0) h = activation(h, p.act);
    h = matmul(append_ones_col(h), p.weights[l]);
  }
  return h;
}

InferenceNetBank InferenceNetBank::init(std::size_t x_dim, std::size_t y_dim,
                                        const std::vector<std::size_t>& hidden,
                                        const std::vector<std::size_t>& head_dims, Act act,
                                        Rng& rng) {
  if (head_dims.empty()) throw ContractError("InferenceNetBank: no layers");
  InferenceNetBank bank;
  bank.head_dims = head_dims;
  for (std::size_t l = 0; l < head_dims.size(); ++l) {
    bool final_layer = (l + 1 == head_dims.size());
    std::vector<std::size_t> widths;
    widths.push_back(x_dim + y_dim);
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(final_layer ? head_dims[l] : 2 * head_dims[l]);
    bank.nets.push_back(MLPParams::init(std::move(widths), act, rng));
  }
  return bank;
}

std::vector<Tensor> InferenceNetBank::parameters() const {
  std::vector<Tensor> out;
  for (const auto& net : nets) {
    auto ps = net.parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::vector<LayerPseudoParams> infer_pseudo_params(const InferenceNetBank& bank,
                                                   const Tensor& x, const Tensor& y) {
  if (x.ndim() != 2 || y.ndim() != 2 || x.rows() != y.rows())
    throw ShapeError("infer_pseudo_params: x and y must be 2-D with matching rows");
  Tensor xy = concat_cols(x, y);
  std::vector<LayerPseudoParams> out;
  for (std::size_t l = 0; l < bank.nets.size(); ++l) {
    Tensor h = mlp_forward(bank.nets[l], xy);
    LayerPseudoParams lp;
    std::size_t d = bank.head_dims[l];
    if (l + 1 == bank.nets.size()) {
      lp.log_vars = h;  // variance-only head
    } else {
      lp.means = cols_range(h, 0, d);
      lp.log_vars = cols_range(h, d, d);
    }
    out.push_back(std::move(lp));
  }
  return out;
}

double rbf_weight(double distance, double lengthscale) {
  if (lengthscale <= 0.0) throw ContractError("rbf_weight: lengthscale must be positive");
  double r = distance / lengthscale;
  return std::exp(-r * r);
}

SetConvConfig SetConvConfig::init(double lengthscale) {
  if (lengthscale <= 0.0) throw ContractError("SetConvConfig: lengthscale must be positive");
  SetConvConfig cfg;
  cfg.log_lengthscale = Tensor::param({1}, {std::log(lengthscale)});
  return cfg;
}

Tensor set_conv(const Tensor& context_x, const Tensor& context_y, const Tensor& queries,
                const SetConvConfig& cfg) {
  if (queries.ndim() != 2 || queries.rows() == 0)
    throw ContractError("set_conv: queries must be a non-empty [Nq x Dx] tensor");
  if (context_x.ndim() != 2 || context_y.ndim() != 2)
    throw ShapeError("set_conv: context tensors must be 2-D (possibly with zero rows)");
  std::size_t nq = queries.rows(), dx = queries.cols();
  std::size_t nc = context_x.rows(), p = context_y.cols();
  if (nc == 0) {
    // empty sum: zero density, zero values; nothing depends on parameters
    return Tensor::zeros({nq, 1 + p});
  }
  if (context_x.cols() != dx) throw ShapeError("set_conv: context/query position dims differ");
  if (context_y.rows() != nc) throw ShapeError("set_conv: context x/y row mismatch");

  // squared distances are data, not differentiated through
  std::vector<double> d2(nq * nc);
  for (std::size_t q = 0; q < nq; ++q)
    for (std::size_t c = 0; c < nc; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < dx; ++k) {
        double d = queries.at2(q, k) - context_x.at2(c, k);
        acc += d * d;
      }
      d2[q * nc + c] = acc;
    }
  Tensor inv_sq_len = exp(scale(cfg.log_lengthscale, -2.0));
  Tensor w = exp(neg(mul_scalar(Tensor::from({nq, nc}, std::move(d2)), inv_sq_len)));
  Tensor augmented = concat_cols(Tensor::full({nc, 1}, 1.0), context_y);
  return matmul(w, augmented);
}

GridCNNParams GridCNNParams::init(bool one_d, std::size_t in_channels,
                                  const std::vector<std::size_t>& channels,
                                  const std::vector<std::size_t>& kernel_sizes,
                                  const std::vector<bool>& residual, Act act, Rng& rng) {
  if (channels.empty() || channels.size() != kernel_sizes.size() ||
      channels.size() != residual.size())
    throw ContractError("GridCNNParams: channels/kernel_sizes/residual must align");
  GridCNNParams p;
  p.act = act;
  p.one_d = one_d;
  std::size_t cin = in_channels;
  for (std::size_t l = 0; l < channels.size(); ++l) {
    std::size_t cout = channels[l], k = kernel_sizes[l];
    if (k % 2 == 0) throw ContractError("GridCNNParams: kernel sizes must be odd");
    if (residual[l] && cout != cin)
      throw ContractError("GridCNNParams: residual connections need equal channel counts");
    std::size_t fan_in = cin * k * (one_d ? 1 : k);
    std::size_t count = cout * fan_in;
    std::vector<double> w(count);
    double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : w) v = sd * rng.normal();
    Shape shape = one_d ? Shape{cout, cin, k} : Shape{cout, cin, k, k};
    p.layers.push_back({Tensor::param(shape, std::move(w)), residual[l]});
    cin = cout;
  }
  return p;
}

std::vector<Tensor> GridCNNParams::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : layers) out.push_back(l.kernels);
  return out;
}

Tensor grid_cnn_forward(const GridCNNParams& p, const Tensor& signal) {
  if (p.layers.empty()) throw ContractError("grid_cnn_forward: empty layer stack");
  Tensor h = signal;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    if (l > 0) h = activation(h, p.act);
    Tensor out = p.one_d ? conv1d(h, p.layers[l].kernels) : conv2d(h, p.layers[l].kernels);
    h = p.layers[l].residual ? add(out, h) : out;
  }
  return h;
}

}  // namespace abnn
