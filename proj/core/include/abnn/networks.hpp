#pragma once

#include <vector>

#include "abnn/rng.hpp"
#include "abnn/tensor.hpp"

namespace abnn {

/// Plain MLP with biases folded into the weights: layer l multiplies the
/// input extended by a constant 1 against a [(w_l + 1) x w_{l+1}] matrix.
/// The activation sits between layers; the final affine stays linear.
struct MLPParams {
  std::vector<std::size_t> widths;  // [in, hidden..., out]
  std::vector<Tensor> weights;
  Act act = Act::relu;

  /// Weights ~ N(0, 1/fan_in), bias rows zero.
  static MLPParams init(std::vector<std::size_t> widths, Act act, Rng& rng);

  std::vector<Tensor> parameters() const { return weights; }
  std::size_t in_dim() const { return widths.front(); }
  std::size_t out_dim() const { return widths.back(); }
};

/// Batched forward: x is [N x in], result [N x out].
Tensor mlp_forward(const MLPParams& p, const Tensor& x);

/// Per-layer pseudo-observation parameters produced by an inference net.
/// The final layer carries log-variances only; its means tensor is left
/// undefined and the caller substitutes the observed outputs.
struct LayerPseudoParams {
  Tensor means;     // [N x D_l]; undefined for the final layer
  Tensor log_vars;  // [N x D_l]
};

/// One secondary network per primary-network layer. Net l maps concat(x, y)
/// to 2*D_l values (means then log-variances) for hidden layers and to D_l
/// log-variances for the final layer.
struct InferenceNetBank {
  std::vector<MLPParams> nets;
  std::vector<std::size_t> head_dims;  // D_l per primary layer

  static InferenceNetBank init(std::size_t x_dim, std::size_t y_dim,
                               const std::vector<std::size_t>& hidden,
                               const std::vector<std::size_t>& head_dims, Act act, Rng& rng);

  std::vector<Tensor> parameters() const;
  std::size_t layer_count() const { return nets.size(); }
};

/// Batched evaluation over rows of x [N x Dx] and y [N x Dy].
std::vector<LayerPseudoParams> infer_pseudo_params(const InferenceNetBank& bank,
                                                   const Tensor& x, const Tensor& y);

/// exp(-d^2 / lengthscale^2)
double rbf_weight(double distance, double lengthscale);

/// Learnable radial-basis smoothing scale for set convolutions.
struct SetConvConfig {
  Tensor log_lengthscale;  // scalar

  static SetConvConfig init(double lengthscale);
  std::vector<Tensor> parameters() const { return {log_lengthscale}; }
  double lengthscale() const { return std::exp(log_lengthscale.scalar_value()); }
};

/// Weighted sums of (1, y) over the context at each query position; column 0
/// is the density channel. Differentiable w.r.t. context values and the
/// lengthscale; positions are treated as data.
/// context_x [Nc x Dx], context_y [Nc x P], queries [Nq x Dx] -> [Nq x (1+P)].
Tensor set_conv(const Tensor& context_x, const Tensor& context_y, const Tensor& queries,
                const SetConvConfig& cfg);

struct GridCnnLayer {
  Tensor kernels;  // [Cout x Cin x K] (1-D) or [Cout x Cin x K x K] (2-D)
  bool residual = false;
};

/// Stack of same-padded convolutions with optional residual adds. Activation
/// sits between layers; a single-layer stack is a raw convolution.
struct GridCNNParams {
  std::vector<GridCnnLayer> layers;
  Act act = Act::relu;
  bool one_d = false;

  static GridCNNParams init(bool one_d, std::size_t in_channels,
                            const std::vector<std::size_t>& channels,
                            const std::vector<std::size_t>& kernel_sizes,
                            const std::vector<bool>& residual, Act act, Rng& rng);

  std::vector<Tensor> parameters() const;
};

Tensor grid_cnn_forward(const GridCNNParams& p, const Tensor& signal);

}  // namespace abnn
