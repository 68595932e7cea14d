#pragma once

#include <cstddef>
#include <vector>

#include "abnn/networks.hpp"
#include "abnn/rng.hpp"
#include "abnn/task.hpp"
#include "abnn/tensor.hpp"

namespace abnn {

/// Factorised per-target predictive distribution emitted by the neural
/// process models: independent Gaussians (mean, variance) per target and
/// output dimension, or an independent Bernoulli per target whose `mean` is
/// the success probability.
struct NPPrediction {
  enum class Kind { gaussian, bernoulli };
  Kind kind = Kind::gaussian;
  Tensor mean;  // [T x P]
  Tensor var;   // [T x P]; strictly positive (floored)
};

/// Positivity floor added on top of exp(log-variance) in every variance head.
inline constexpr double kNpVarianceFloor = 1e-6;

/// Sum over targets of the per-target log density / log mass.
Tensor np_log_likelihood(const NPPrediction& pred, const Tensor& y);

// ---------------------------------------------------------------------------
// Conditional neural process
// ---------------------------------------------------------------------------

/// Deterministic-encoder conditional model: each context pair is encoded to a
/// representation vector, representations are mean-pooled, and the decoder
/// maps (pooled representation, target input) to a Gaussian per target.
struct CNPModel {
  MLPParams encoder;  // (x, y) -> r
  MLPParams decoder;  // (r, x_t) -> (mean, log-variance) per output dim

  std::size_t x_dim() const { return decoder.in_dim() - encoder.out_dim(); }
  std::size_t y_dim() const { return decoder.out_dim() / 2; }
  std::size_t repr_dim() const { return encoder.out_dim(); }

  static CNPModel init(std::size_t x_dim, std::size_t y_dim, std::size_t repr_dim,
                       const std::vector<std::size_t>& enc_hidden,
                       const std::vector<std::size_t>& dec_hidden, Act act, Rng& rng);
  std::vector<Tensor> parameters() const;
};

/// Empty context decodes the zero representation. Fully deterministic and
/// permutation-invariant in the context.
NPPrediction cnp_predict(const CNPModel& m, const Task& context, const Tensor& targets);

// ---------------------------------------------------------------------------
// Convolutional conditional neural process
// ---------------------------------------------------------------------------

/// Two variants share the CNN trunk and the (mean, log-variance) head:
///  - off_grid_1d: SetConv onto a uniform internal grid (density channel
///    included), 1-D CNN, SetConv back to the target points, pointwise head.
///    The grid spacing is 1/points_per_unit; grid nodes sit at integer
///    multiples of the spacing covering [min(x)-margin, max(x)+margin] over
///    context and target inputs, which is what makes integer-cell shifts an
///    exact symmetry.
///  - on_grid_2d: the context is a fully gridded task (row-major pixels,
///    context mask required); input channels are the mask density and the
///    masked values, the CNN runs on the H x W grid, and the head is applied
///    per pixel.
struct ConvCNPModel {
  bool on_grid = false;

  // off-grid discretisation
  SetConvConfig input_conv;
  SetConvConfig output_conv;
  double points_per_unit = 32.0;
  double margin = 0.1;

  // on-grid geometry
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  GridCNNParams cnn;
  MLPParams head;  // channels -> (mean, log-variance) per output dim

  std::size_t y_dim() const { return head.out_dim() / 2; }

  static ConvCNPModel init_off_grid_1d(std::size_t y_dim, double points_per_unit,
                                       double lengthscale,
                                       const std::vector<std::size_t>& channels,
                                       const std::vector<std::size_t>& kernels,
                                       const std::vector<std::size_t>& head_hidden, Act act,
                                       Rng& rng);
  static ConvCNPModel init_on_grid_2d(std::size_t h, std::size_t w, std::size_t y_dim,
                                      const std::vector<std::size_t>& channels,
                                      const std::vector<std::size_t>& kernels,
                                      const std::vector<std::size_t>& head_hidden, Act act,
                                      Rng& rng);
  std::vector<Tensor> parameters() const;
};

/// Off-grid: targets are arbitrary reals (1-D inputs). On-grid: the context
/// must carry a mask over all H*W pixels and the targets must cover the whole
/// grid (one row per pixel, row-major).
NPPrediction convcnp_predict(const ConvCNPModel& m, const Task& context, const Tensor& targets);

}  // namespace abnn
