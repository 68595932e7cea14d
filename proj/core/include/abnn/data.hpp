#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "abnn/rng.hpp"
#include "abnn/task.hpp"

namespace abnn {

// ---------------------------------------------------------------------------
// Gaussian-process task generation
// ---------------------------------------------------------------------------

enum class KernelKind { se, periodic, laplacian };

struct KernelSpec {
  KernelKind kind = KernelKind::se;
  double lengthscale = 1.0;
  double signal_var = 1.0;
  double period = 1.0;  // periodic kernel only

  void validate() const;  // ContractError on non-positive hyperparameters
};

/// Stationary kernel value between two points of equal dimension.
/// se:        s^2 exp(-|d|^2 / (2 l^2))
/// laplacian: s^2 exp(-|d| / l)
/// periodic:  s^2 exp(-2 sin^2(pi |d| / p) / l^2)
double kernel_eval(const KernelSpec& spec, const std::vector<double>& x,
                   const std::vector<double>& xp);
double kernel_eval(const KernelSpec& spec, double x, double xp);

/// Draws f ~ GP(0, k) at the given 1-D inputs via a Cholesky factor of the
/// Gram matrix, then adds observation noise of the given standard deviation.
/// Singular Gram matrices (coincident inputs) factor with zero-clamped
/// pivots, so duplicated inputs receive identical function values; if that
/// fails the sampler retries under escalating diagonal jitter starting at
/// 1e-6 of the signal variance.
std::vector<double> gp_sample_at(const KernelSpec& spec, const std::vector<double>& xs,
                                 double noise_sd, Rng& rng);

/// One regression task: N ~ uniform{n_lo..n_hi} inputs uniform in [a, b],
/// targets drawn by gp_sample_at. Consumes rng in a fixed order, so a fixed
/// seed reproduces the task bitwise.
Task gp_sample_task(const KernelSpec& spec, std::size_t n_lo, std::size_t n_hi, double a,
                    double b, double noise_sd, Rng& rng);

/// Meta-dataset of independent GP tasks; task i uses a stream derived from
/// (seed, i), so the collection does not depend on generation order.
MetaDataset gp_meta_dataset(const KernelSpec& spec, std::size_t count, std::size_t n_lo,
                            std::size_t n_hi, double a, double b, double noise_sd,
                            std::uint64_t seed);

/// Noisy cubic with a central gap: 100 inputs uniform on [-4, -1.5] or
/// [1.5, 4] (half each in expectation), y = x^3 / 10 + eps with
/// eps ~ N(0, 0.3^2); `noisy = false` drops the noise term.
Task cubic_gap_task(Rng& rng, bool noisy = true);

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Row-major grayscale image with values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t i, std::size_t j) const { return pixels[i * width + j]; }
  double& at(std::size_t i, std::size_t j) { return pixels[i * width + j]; }
  std::size_t size() const { return pixels.size(); }
};

/// Big-endian IDX containers: magic 0x00000803 for image stacks (count, H, W
/// headers then one byte per pixel) and 0x00000801 for label lists. Pixels
/// are scaled to [0, 1]. Unknown magic raises FormatError naming the observed
/// value; short files raise TruncationError with expected vs actual sizes.
std::vector<Image> load_idx_images(const std::string& path);
std::vector<std::uint8_t> load_idx_labels(const std::string& path);
void save_idx_images(const std::string& path, const std::vector<Image>& images);
void save_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

/// Box-filter resampling to a new resolution: each output pixel averages the
/// input pixels its footprint covers, weighted by overlap area.
Image area_resize(const Image& img, std::size_t out_h, std::size_t out_w);

/// Procedurally drawn digit glyph (0-9) on a 28x28 canvas: a stroke font with
/// per-sample affine jitter and stroke-thickness variation.
Image render_digit(int digit, Rng& rng);

/// `count` glyphs cycling through the digits 0..9.
std::vector<Image> synthetic_digit_set(std::size_t count, Rng& rng);

// ---------------------------------------------------------------------------
// Masked-image tasks
// ---------------------------------------------------------------------------

/// An image turned into a flat regression task. Pixel (i, j) of an H x W grid
/// maps to x = (-1 + 2i/(H-1), -1 + 2j/(W-1)), so boundary pixels sit at
/// +/-1; `values` carries the (optionally binarised) intensities and `mask`
/// marks context pixels. `flat` is the same data as a Task whose context_mask
/// equals `mask`.
struct ImageTask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  std::vector<bool> mask;
  Task flat;
};

/// Unmasks each pixel independently with probability p; `binarise` rounds
/// intensities at 0.5. H or W of 1 leaves the coordinate map degenerate and
/// raises ContractError.
ImageTask make_image_task(const Image& img, double p, bool binarise, Rng& rng);

/// Completion baseline: each masked pixel becomes the inverse-distance-
/// weighted (power 2) mean of its 4 nearest context pixels in grid
/// coordinates; context pixels pass through. Needs at least one context
/// pixel.
Image linear_interp_baseline(const ImageTask& task);

/// Meta-dataset of masked-image tasks with a fresh mask probability
/// p ~ U[p_lo, p_hi] per image; masks are fixed here, at construction time.
/// Task i derives its stream from (seed, i).
MetaDataset image_meta_dataset(const std::vector<Image>& images, double p_lo, double p_hi,
                               bool binarise, std::uint64_t seed);

}  // namespace abnn
