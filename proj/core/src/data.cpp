#include "abnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <utility>

#include "abnn/errors.hpp"
#include "abnn/tensor.hpp"

namespace abnn {
namespace {

constexpr double kPi = 3.14159265358979323846;

double norm_of_diff(const std::vector<double>& x, const std::vector<double>& xp) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - xp[i]) * (x[i] - xp[i]);
  return std::sqrt(acc);
}

// Lower factor of a positive SEMIdefinite Gram matrix. Classical Cholesky
// with zero-clamped pivots: a pivot within rounding of zero marks a linearly
// dependent row (e.g. coincident inputs), which keeps zero conditional
// variance instead of the spurious ~sqrt(jitter) noise a jittered strict
// factorization would inject. Returns false when a pivot is negative beyond
// rounding, i.e. the matrix is not a Gram matrix at all.
bool psd_lower_factor(const std::vector<double>& a, std::size_t n, std::vector<double>& l) {
  l.assign(n * n, 0.0);
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a[i * n + i]));
  if (scale == 0.0) scale = 1.0;
  const double tol = 1e-10 * scale;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (d < -tol) return false;
    if (d <= tol) continue;  // dependent row: pivot and column stay zero
    const double root = std::sqrt(d);
    l[j * n + j] = root;
    for (std::size_t i = j + 1; i < n; ++i) {
      double c = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) c -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = c / root;
    }
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernels and GP sampling
// ---------------------------------------------------------------------------

void KernelSpec::validate() const {
  if (!(lengthscale > 0.0)) throw ContractError("KernelSpec: lengthscale must be positive");
  if (!(signal_var > 0.0)) throw ContractError("KernelSpec: signal variance must be positive");
  if (kind == KernelKind::periodic && !(period > 0.0))
    throw ContractError("KernelSpec: period must be positive");
}

double kernel_eval(const KernelSpec& spec, const std::vector<double>& x,
                   const std::vector<double>& xp) {
  spec.validate();
  if (x.size() != xp.size()) throw ShapeError("kernel_eval: point dimensions differ");
  const double d = norm_of_diff(x, xp);
  const double l = spec.lengthscale;
  switch (spec.kind) {
    case KernelKind::se:
      return spec.signal_var * std::exp(-d * d / (2.0 * l * l));
    case KernelKind::laplacian:
      return spec.signal_var * std::exp(-d / l);
    case KernelKind::periodic: {
      const double s = std::sin(kPi * d / spec.period);
      return spec.signal_var * std::exp(-2.0 * s * s / (l * l));
    }
  }
  throw ContractError("kernel_eval: unknown kernel kind");
}

double kernel_eval(const KernelSpec& spec, double x, double xp) {
  return kernel_eval(spec, std::vector<double>{x}, std::vector<double>{xp});
}

std::vector<double> gp_sample_at(const KernelSpec& spec, const std::vector<double>& xs,
                                 double noise_sd, Rng& rng) {
  spec.validate();
  if (noise_sd < 0.0) throw ContractError("gp_sample_at: noise_sd must be non-negative");
  const std::size_t n = xs.size();
  if (n == 0) return {};
  std::vector<double> gram(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) gram[i * n + j] = kernel_eval(spec, xs[i], xs[j]);
  std::vector<double> lower;
  if (!psd_lower_factor(gram, n, lower)) {
    // Defensive fallback: jitter escalation (1e-6 of the mean diagonal,
    // escalating tenfold) raises PsdError if the matrix is truly indefinite.
    const Tensor chol = cholesky_jittered(Tensor::from({n, n}, std::move(gram)));
    lower.assign(chol.value().begin(), chol.value().end());
  }
  const std::vector<double> z = rng.normals(n);
  std::vector<double> f(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) f[i] += lower[i * n + j] * z[j];
  if (noise_sd > 0.0)
    for (auto& v : f) v += noise_sd * rng.normal();
  return f;
}

Task gp_sample_task(const KernelSpec& spec, std::size_t n_lo, std::size_t n_hi, double a,
                    double b, double noise_sd, Rng& rng) {
  if (n_lo > n_hi || n_lo == 0) throw ContractError("gp_sample_task: bad task size range");
  if (!(a < b)) throw ContractError("gp_sample_task: empty input interval");
  const std::size_t n =
      n_lo + static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(n_hi - n_lo)));
  std::vector<double> xs(n);
  for (auto& v : xs) v = rng.uniform(a, b);
  std::vector<double> ys = gp_sample_at(spec, xs, noise_sd, rng);
  Task t;
  t.x = Tensor::from({n, 1}, std::move(xs));
  t.y = Tensor::from({n, 1}, std::move(ys));
  return t;
}

MetaDataset gp_meta_dataset(const KernelSpec& spec, std::size_t count, std::size_t n_lo,
                            std::size_t n_hi, double a, double b, double noise_sd,
                            std::uint64_t seed) {
  MetaDataset meta;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i + 1));
    meta.tasks.push_back(gp_sample_task(spec, n_lo, n_hi, a, b, noise_sd, rng));
  }
  return meta;
}

Task cubic_gap_task(Rng& rng, bool noisy) {
  const std::size_t n = 100;
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double mag = rng.uniform(1.5, 4.0);
    xs[i] = rng.bernoulli(0.5) ? mag : -mag;
    ys[i] = xs[i] * xs[i] * xs[i] / 10.0 + (noisy ? 0.3 * rng.normal() : 0.0);
  }
  Task t;
  t.x = Tensor::from({n, 1}, std::move(xs));
  t.y = Tensor::from({n, 1}, std::move(ys));
  return t;
}

// ---------------------------------------------------------------------------
// IDX containers
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803u;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801u;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_idx: cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<unsigned char>& raw, std::size_t offset) {
  return (static_cast<std::uint32_t>(raw[offset]) << 24) |
         (static_cast<std::uint32_t>(raw[offset + 1]) << 16) |
         (static_cast<std::uint32_t>(raw[offset + 2]) << 8) |
         static_cast<std::uint32_t>(raw[offset + 3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::string hex_magic(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xF];
  return s;
}

void check_magic(const std::vector<unsigned char>& raw, std::uint32_t want,
                 std::size_t header_words) {
  if (raw.size() < 4 * header_words)
    throw TruncationError("load_idx: header needs " + std::to_string(4 * header_words) +
                          " bytes, file has " + std::to_string(raw.size()));
  const std::uint32_t magic = read_be32(raw, 0);
  if (magic != want)
    throw FormatError("load_idx: unexpected magic " + hex_magic(magic) + ", wanted " +
                      hex_magic(want));
}

void check_payload(const std::vector<unsigned char>& raw, std::size_t header,
                   std::size_t payload) {
  if (raw.size() < header + payload)
    throw TruncationError("load_idx: expected " + std::to_string(header + payload) +
                          " bytes, file has " + std::to_string(raw.size()));
}

constexpr std::uint32_t kMaxIdxDim = 1u << 16;

}  // namespace

std::vector<Image> load_idx_images(const std::string& path) {
  const std::vector<unsigned char> raw = read_file(path);
  check_magic(raw, kIdxImagesMagic, 4);
  const std::uint32_t count = read_be32(raw, 4);
  const std::uint32_t h = read_be32(raw, 8);
  const std::uint32_t w = read_be32(raw, 12);
  if (h == 0 || w == 0 || h > kMaxIdxDim || w > kMaxIdxDim || count > kMaxIdxDim)
    throw FormatError("load_idx: implausible dimensions " + std::to_string(count) + " x " +
                      std::to_string(h) + " x " + std::to_string(w));
  const std::size_t payload =
      static_cast<std::size_t>(count) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  check_payload(raw, 16, payload);
  std::vector<Image> out(count);
  std::size_t pos = 16;
  for (auto& img : out) {
    img.height = h;
    img.width = w;
    img.pixels.resize(static_cast<std::size_t>(h) * w);
    for (auto& p : img.pixels) p = raw[pos++] / 255.0;
  }
  return out;
}

std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
  const std::vector<unsigned char> raw = read_file(path);
  check_magic(raw, kIdxLabelsMagic, 2);
  const std::uint32_t count = read_be32(raw, 4);
  if (count > kMaxIdxDim * 16u)
    throw FormatError("load_idx: implausible label count " + std::to_string(count));
  check_payload(raw, 8, count);
  return std::vector<std::uint8_t>(raw.begin() + 8, raw.begin() + 8 + count);
}

void save_idx_images(const std::string& path, const std::vector<Image>& images) {
  if (images.empty()) throw ContractError("save_idx_images: nothing to write");
  const std::size_t h = images.front().height, w = images.front().width;
  for (const auto& img : images)
    if (img.height != h || img.width != w || img.pixels.size() != h * w)
      throw ShapeError("save_idx_images: images must share one shape");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_idx_images: cannot open " + path);
  write_be32(out, kIdxImagesMagic);
  write_be32(out, static_cast<std::uint32_t>(images.size()));
  write_be32(out, static_cast<std::uint32_t>(h));
  write_be32(out, static_cast<std::uint32_t>(w));
  for (const auto& img : images)
    for (double v : img.pixels) {
      const double clamped = std::min(1.0, std::max(0.0, v));
      const unsigned char b = static_cast<unsigned char>(std::lround(clamped * 255.0));
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
}

void save_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_idx_labels: cannot open " + path);
  write_be32(out, kIdxLabelsMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

// ---------------------------------------------------------------------------
// Resampling and glyph rendering
// ---------------------------------------------------------------------------

Image area_resize(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (img.height == 0 || img.width == 0 || img.pixels.size() != img.height * img.width)
    throw ShapeError("area_resize: malformed input image");
  if (out_h == 0 || out_w == 0) throw ContractError("area_resize: zero output size");
  Image out;
  out.height = out_h;
  out.width = out_w;
  out.pixels.assign(out_h * out_w, 0.0);
  const double sh = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double sw = static_cast<double>(img.width) / static_cast<double>(out_w);
  for (std::size_t oi = 0; oi < out_h; ++oi) {
    const double r0 = oi * sh, r1 = (oi + 1) * sh;
    for (std::size_t oj = 0; oj < out_w; ++oj) {
      const double c0 = oj * sw, c1 = (oj + 1) * sw;
      double acc = 0.0, wsum = 0.0;
      for (std::size_t ii = static_cast<std::size_t>(r0); ii < img.height && ii < r1; ++ii) {
        const double oh = std::min(static_cast<double>(ii + 1), r1) -
                          std::max(static_cast<double>(ii), r0);
        for (std::size_t jj = static_cast<std::size_t>(c0); jj < img.width && jj < c1; ++jj) {
          const double ow = std::min(static_cast<double>(jj + 1), c1) -
                            std::max(static_cast<double>(jj), c0);
          acc += oh * ow * img.at(ii, jj);
          wsum += oh * ow;
        }
      }
      out.at(oi, oj) = acc / wsum;
    }
  }
  return out;
}

namespace {

using Stroke = std::vector<std::pair<double, double>>;  // (x right, y down) in [0,1]

Stroke ring(double cx, double cy, double rx, double ry, int sides = 14) {
  Stroke s;
  for (int k = 0; k <= sides; ++k) {
    const double a = 2.0 * kPi * k / sides;
    s.emplace_back(cx + rx * std::sin(a), cy - ry * std::cos(a));
  }
  return s;
}

std::vector<Stroke> digit_strokes(int digit) {
  switch (digit) {
    case 0: return {ring(0.50, 0.50, 0.21, 0.33)};
    case 1: return {{{0.38, 0.30}, {0.52, 0.16}}, {{0.52, 0.16}, {0.52, 0.84}}};
    case 2:
      return {{{0.30, 0.32},
               {0.34, 0.20},
               {0.48, 0.15},
               {0.62, 0.19},
               {0.68, 0.32},
               {0.62, 0.45},
               {0.32, 0.84}},
              {{0.32, 0.84}, {0.70, 0.84}}};
    case 3:
      return {{{0.32, 0.22}, {0.45, 0.15}, {0.60, 0.18}, {0.66, 0.30}, {0.58, 0.44}, {0.46, 0.48}},
              {{0.46, 0.48}, {0.62, 0.54}, {0.68, 0.68}, {0.58, 0.82}, {0.42, 0.85}, {0.31, 0.78}}};
    case 4:
      return {{{0.60, 0.84}, {0.60, 0.16}}, {{0.60, 0.16}, {0.30, 0.62}}, {{0.30, 0.62}, {0.74, 0.62}}};
    case 5:
      return {{{0.66, 0.16}, {0.34, 0.16}},
              {{0.34, 0.16}, {0.32, 0.47}},
              {{0.32, 0.47},
               {0.50, 0.42},
               {0.64, 0.48},
               {0.68, 0.62},
               {0.60, 0.79},
               {0.44, 0.85},
               {0.32, 0.78}}};
    case 6:
      return {{{0.62, 0.18},
               {0.48, 0.15},
               {0.36, 0.26},
               {0.31, 0.45},
               {0.31, 0.64},
               {0.40, 0.82},
               {0.56, 0.84},
               {0.67, 0.72},
               {0.66, 0.57},
               {0.54, 0.49},
               {0.40, 0.52},
               {0.32, 0.62}}};
    case 7: return {{{0.29, 0.16}, {0.71, 0.16}}, {{0.71, 0.16}, {0.46, 0.84}}};
    case 8: return {ring(0.50, 0.32, 0.17, 0.17), ring(0.50, 0.67, 0.20, 0.18)};
    case 9:
      return {{{0.38, 0.82},
               {0.52, 0.85},
               {0.64, 0.74},
               {0.69, 0.55},
               {0.69, 0.36},
               {0.60, 0.18},
               {0.44, 0.16},
               {0.33, 0.28},
               {0.34, 0.43},
               {0.46, 0.51},
               {0.60, 0.48},
               {0.68, 0.38}}};
    default: throw ContractError("render_digit: digit must be 0..9");
  }
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::min(1.0, std::max(0.0, t));
  const double cx = ax + t * dx, cy = ay + t * dy;
  return std::hypot(px - cx, py - cy);
}

}  // namespace

Image render_digit(int digit, Rng& rng) {
  const double theta = rng.uniform(-0.12, 0.12);
  const double scale = rng.uniform(0.85, 1.08);
  const double tx = rng.uniform(-0.06, 0.06);
  const double ty = rng.uniform(-0.06, 0.06);
  const double thick = rng.uniform(0.045, 0.065);
  const double ct = std::cos(theta), st = std::sin(theta);
  auto warp = [&](std::pair<double, double> p) {
    const double x = p.first - 0.5, y = p.second - 0.5;
    return std::pair<double, double>{0.5 + tx + scale * (ct * x - st * y),
                                     0.5 + ty + scale * (st * x + ct * y)};
  };
  std::vector<Stroke> strokes = digit_strokes(digit);
  for (auto& s : strokes)
    for (auto& p : s) p = warp(p);

  const std::size_t n = 28;
  Image img;
  img.height = n;
  img.width = n;
  img.pixels.assign(n * n, 0.0);
  const double soft = 0.6 * thick;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double px = (j + 0.5) / n, py = (i + 0.5) / n;
      double d = 1e9;
      for (const auto& s : strokes)
        for (std::size_t k = 0; k + 1 < s.size(); ++k)
          d = std::min(d, segment_distance(px, py, s[k].first, s[k].second, s[k + 1].first,
                                           s[k + 1].second));
      img.at(i, j) = std::min(1.0, std::max(0.0, (thick - d) / soft + 0.5));
    }
  return img;
}

std::vector<Image> synthetic_digit_set(std::size_t count, Rng& rng) {
  std::vector<Image> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(render_digit(static_cast<int>(i % 10), rng));
  return out;
}

// ---------------------------------------------------------------------------
// Masked-image tasks
// ---------------------------------------------------------------------------

ImageTask make_image_task(const Image& img, double p, bool binarise, Rng& rng) {
  if (img.height < 2 || img.width < 2)
    throw ContractError("make_image_task: grids must be at least 2 x 2 for the coordinate map");
  if (img.pixels.size() != img.height * img.width)
    throw ShapeError("make_image_task: pixel buffer does not match the grid");
  if (!(p >= 0.0 && p <= 1.0))
    throw ContractError("make_image_task: unmask probability must lie in [0, 1]");
  ImageTask out;
  out.height = img.height;
  out.width = img.width;
  const std::size_t hw = img.height * img.width;
  out.values.reserve(hw);
  out.mask.reserve(hw);
  std::vector<double> xv;
  xv.reserve(2 * hw);
  for (std::size_t i = 0; i < img.height; ++i)
    for (std::size_t j = 0; j < img.width; ++j) {
      const double v = img.at(i, j);
      out.values.push_back(binarise ? (v >= 0.5 ? 1.0 : 0.0) : v);
      out.mask.push_back(rng.bernoulli(p));
      xv.push_back(-1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(img.height - 1));
      xv.push_back(-1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(img.width - 1));
    }
  out.flat.x = Tensor::from({hw, 2}, std::move(xv));
  out.flat.y = Tensor::from({hw, 1}, out.values);
  out.flat.context_mask = out.mask;
  return out;
}

Image linear_interp_baseline(const ImageTask& task) {
  const std::size_t h = task.height, w = task.width;
  if (h == 0 || w == 0 || task.values.size() != h * w || task.mask.size() != h * w)
    throw ShapeError("linear_interp_baseline: malformed image task");
  struct Ctx {
    double i, j, v;
  };
  std::vector<Ctx> ctx;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      if (task.mask[i * w + j])
        ctx.push_back({static_cast<double>(i), static_cast<double>(j), task.values[i * w + j]});
  if (ctx.empty())
    throw ContractError("linear_interp_baseline: needs at least one context pixel");
  Image out;
  out.height = h;
  out.width = w;
  out.pixels = task.values;
  const std::size_t k = std::min<std::size_t>(4, ctx.size());
  std::vector<std::pair<double, std::size_t>> order(ctx.size());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      if (task.mask[i * w + j]) continue;
      for (std::size_t c = 0; c < ctx.size(); ++c) {
        const double di = ctx[c].i - static_cast<double>(i);
        const double dj = ctx[c].j - static_cast<double>(j);
        order[c] = {di * di + dj * dj, c};
      }
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                        order.end());
      double acc = 0.0, wsum = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double wgt = 1.0 / order[c].first;  // context pixels pass through, so d > 0
        acc += wgt * ctx[order[c].second].v;
        wsum += wgt;
      }
      out.at(i, j) = acc / wsum;
    }
  return out;
}

MetaDataset image_meta_dataset(const std::vector<Image>& images, double p_lo, double p_hi,
                               bool binarise, std::uint64_t seed) {
  if (!(p_lo >= 0.0 && p_hi <= 1.0 && p_lo <= p_hi))
    throw ContractError("image_meta_dataset: bad unmask probability range");
  MetaDataset meta;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Rng rng(mix_seed(seed, i + 1));
    const double p = rng.uniform(p_lo, p_hi);
    meta.tasks.push_back(make_image_task(images[i], p, binarise, rng).flat);
  }
  return meta;
}

}  // namespace abnn
