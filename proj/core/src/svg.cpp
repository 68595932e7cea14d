#include "abnn/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "abnn/errors.hpp"

namespace abnn {
namespace {

// Canvas geometry for line plots.
constexpr double kWidth = 640.0, kHeight = 420.0;
constexpr double kLeft = 56.0, kRight = 16.0, kTop = 34.0, kBottom = 42.0;
constexpr double kFrameW = kWidth - kLeft - kRight;
constexpr double kFrameH = kHeight - kTop - kBottom;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw DataError(std::string("render_svg_plot: non-finite ") + what);
}

struct Range {
  double lo = 0.0, hi = 0.0;
  bool seen = false;

  void take(const std::vector<double>& v) {
    for (double x : v) {
      if (!seen) {
        lo = hi = x;
        seen = true;
      } else {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    }
  }

  void pad() {
    const double span = hi > lo ? hi - lo : 1.0;
    lo -= 0.05 * span;
    hi += 0.05 * span;
  }

  double unit(double x) const { return (x - lo) / (hi - lo); }
};

std::string grey_hex(double v) {
  const int b = static_cast<int>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", b, b, b);
  return buf;
}

}  // namespace

std::string render_svg_plot(const std::vector<PlotSeries>& series,
                            const std::vector<PlotBand>& bands,
                            const std::vector<PlotPoints>& points, const std::string& title) {
  Range xr, yr;
  for (const PlotSeries& s : series) {
    if (s.x.size() != s.y.size())
      throw ShapeError("render_svg_plot: series '" + s.label + "' has mismatched x/y lengths");
    check_finite(s.x, "series x");
    check_finite(s.y, "series y");
    xr.take(s.x);
    yr.take(s.y);
  }
  for (const PlotBand& b : bands) {
    if (b.x.size() != b.lo.size() || b.x.size() != b.hi.size())
      throw ShapeError("render_svg_plot: band has mismatched x/lo/hi lengths");
    check_finite(b.x, "band x");
    check_finite(b.lo, "band lower edge");
    check_finite(b.hi, "band upper edge");
    xr.take(b.x);
    yr.take(b.lo);
    yr.take(b.hi);
  }
  for (const PlotPoints& p : points) {
    if (p.x.size() != p.y.size())
      throw ShapeError("render_svg_plot: points '" + p.label + "' have mismatched x/y lengths");
    check_finite(p.x, "marker x");
    check_finite(p.y, "marker y");
    xr.take(p.x);
    yr.take(p.y);
  }
  if (!xr.seen) throw ContractError("render_svg_plot: nothing to draw");
  xr.pad();
  yr.pad();

  const auto sx = [&](double x) { return kLeft + xr.unit(x) * kFrameW; };
  const auto sy = [&](double y) { return kTop + kFrameH - yr.unit(y) * kFrameH; };

  std::string out;
  out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(kWidth) + "\" height=\"" +
         fmt(kHeight) + "\" viewBox=\"0 0 " + fmt(kWidth) + " " + fmt(kHeight) + "\">\n";
  out += "<rect width=\"" + fmt(kWidth) + "\" height=\"" + fmt(kHeight) +
         "\" fill=\"#ffffff\"/>\n";

  // Grid and tick labels: five evenly spaced ticks per axis.
  out += "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#333333\">\n";
  for (int i = 0; i < 5; ++i) {
    const double tx = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    const double ty = yr.lo + (yr.hi - yr.lo) * i / 4.0;
    const double px = sx(tx), py = sy(ty);
    out += "<line x1=\"" + fmt(px) + "\" y1=\"" + fmt(kTop) + "\" x2=\"" + fmt(px) +
           "\" y2=\"" + fmt(kTop + kFrameH) + "\" stroke=\"#e3e3e3\" stroke-width=\"1\"/>\n";
    out += "<line x1=\"" + fmt(kLeft) + "\" y1=\"" + fmt(py) + "\" x2=\"" +
           fmt(kLeft + kFrameW) + "\" y2=\"" + fmt(py) +
           "\" stroke=\"#e3e3e3\" stroke-width=\"1\"/>\n";
    out += "<text x=\"" + fmt(px) + "\" y=\"" + fmt(kTop + kFrameH + 16.0) +
           "\" text-anchor=\"middle\">" + fmt(tx) + "</text>\n";
    out += "<text x=\"" + fmt(kLeft - 6.0) + "\" y=\"" + fmt(py + 4.0) +
           "\" text-anchor=\"end\">" + fmt(ty) + "</text>\n";
  }
  out += "</g>\n";

  for (const PlotBand& b : bands) {
    if (b.x.empty()) continue;
    std::string pts;
    for (std::size_t i = 0; i < b.x.size(); ++i)
      pts += fmt(sx(b.x[i])) + "," + fmt(sy(b.hi[i])) + " ";
    for (std::size_t i = b.x.size(); i-- > 0;)
      pts += fmt(sx(b.x[i])) + "," + fmt(sy(b.lo[i])) + " ";
    pts.pop_back();
    out += "<polygon class=\"band\" points=\"" + pts + "\" fill=\"" + b.colour +
           "\" fill-opacity=\"" + fmt(b.opacity) + "\"/>\n";
  }

  for (const PlotSeries& s : series) {
    if (s.x.empty()) continue;
    if (s.x.size() == 1) {
      out += "<circle class=\"series\" cx=\"" + fmt(sx(s.x[0])) + "\" cy=\"" +
             fmt(sy(s.y[0])) + "\" r=\"2.5\" fill=\"" + s.colour + "\"/>\n";
      continue;
    }
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i)
      pts += fmt(sx(s.x[i])) + "," + fmt(sy(s.y[i])) + " ";
    pts.pop_back();
    out += "<polyline class=\"series\" points=\"" + pts + "\" fill=\"none\" stroke=\"" +
           s.colour + "\" stroke-width=\"1.8\"" +
           (s.dashed ? " stroke-dasharray=\"6 4\"" : "") + "/>\n";
  }

  for (const PlotPoints& p : points)
    for (std::size_t i = 0; i < p.x.size(); ++i)
      out += "<circle class=\"pt\" cx=\"" + fmt(sx(p.x[i])) + "\" cy=\"" + fmt(sy(p.y[i])) +
             "\" r=\"" + fmt(p.radius) + "\" fill=\"" + p.colour + "\"/>\n";

  // Frame above the data so band edges stay crisp.
  out += "<rect class=\"frame\" x=\"" + fmt(kLeft) + "\" y=\"" + fmt(kTop) + "\" width=\"" +
         fmt(kFrameW) + "\" height=\"" + fmt(kFrameH) +
         "\" fill=\"none\" stroke=\"#444444\" stroke-width=\"1\"/>\n";

  if (!title.empty())
    out += "<text x=\"" + fmt(kWidth / 2.0) + "\" y=\"22\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"14\" fill=\"#111111\">" +
           escape(title) + "</text>\n";

  double legend_y = kTop + 16.0;
  auto legend_line = [&](const std::string& label, const std::string& colour) {
    if (label.empty()) return;
    out += "<text x=\"" + fmt(kLeft + 10.0) + "\" y=\"" + fmt(legend_y) +
           "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" + colour + "\">" +
           escape(label) + "</text>\n";
    legend_y += 15.0;
  };
  for (const PlotSeries& s : series) legend_line(s.label, s.colour);
  for (const PlotPoints& p : points) legend_line(p.label, p.colour);

  out += "</svg>\n";
  return out;
}

void emit_svg_plot(const std::vector<PlotSeries>& series, const std::vector<PlotBand>& bands,
                   const std::vector<PlotPoints>& points, const std::string& path,
                   const std::string& title) {
  const std::string svg = render_svg_plot(series, bands, points, title);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("emit_svg_plot: cannot open " + path);
  out.write(svg.data(), static_cast<std::streamsize>(svg.size()));
  if (!out) throw DataError("emit_svg_plot: write failed for " + path);
}

std::string render_svg_image_row(const std::vector<SvgImagePanel>& panels,
                                 std::size_t cell_px) {
  if (panels.empty()) throw ContractError("render_svg_image_row: no panels");
  if (cell_px == 0) throw ContractError("render_svg_image_row: zero cell size");
  for (const SvgImagePanel& p : panels) {
    const Image& img = p.image;
    if (img.height == 0 || img.width == 0 || img.pixels.size() != img.height * img.width)
      throw ShapeError("render_svg_image_row: malformed panel image '" + p.label + "'");
    if (!p.highlight.empty() && p.highlight.size() != img.pixels.size())
      throw ShapeError("render_svg_image_row: highlight mask size mismatch in '" + p.label +
                       "'");
  }

  const double margin = 10.0, gap = 14.0, caption = 18.0;
  const double cell = static_cast<double>(cell_px);
  double width = margin, height = 0.0;
  for (const SvgImagePanel& p : panels) {
    width += p.image.width * cell + gap;
    height = std::max(height, p.image.height * cell + caption);
  }
  width += margin - gap;
  height += 2.0 * margin;

  std::string out;
  out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) + "\" height=\"" +
         fmt(height) + "\" viewBox=\"0 0 " + fmt(width) + " " + fmt(height) + "\">\n";
  out += "<rect width=\"" + fmt(width) + "\" height=\"" + fmt(height) +
         "\" fill=\"#ffffff\"/>\n";

  double x0 = margin;
  for (const SvgImagePanel& p : panels) {
    const Image& img = p.image;
    const double y0 = margin + caption;
    out += "<text x=\"" + fmt(x0) + "\" y=\"" + fmt(margin + 12.0) +
           "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#111111\">" +
           escape(p.label) + "</text>\n";
    for (std::size_t i = 0; i < img.height; ++i)
      for (std::size_t j = 0; j < img.width; ++j) {
        const bool hot = !p.highlight.empty() && p.highlight[i * img.width + j];
        const std::string fill = hot ? std::string("#cc4444") : grey_hex(img.at(i, j));
        out += "<rect class=\"px\" x=\"" + fmt(x0 + j * cell) + "\" y=\"" +
               fmt(y0 + i * cell) + "\" width=\"" + fmt(cell) + "\" height=\"" + fmt(cell) +
               "\" fill=\"" + fill + "\"/>\n";
      }
    out += "<rect x=\"" + fmt(x0) + "\" y=\"" + fmt(y0) + "\" width=\"" +
           fmt(img.width * cell) + "\" height=\"" + fmt(img.height * cell) +
           "\" fill=\"none\" stroke=\"#888888\" stroke-width=\"1\"/>\n";
    x0 += img.width * cell + gap;
  }
  out += "</svg>\n";
  return out;
}

void emit_svg_image_row(const std::vector<SvgImagePanel>& panels, const std::string& path,
                        std::size_t cell_px) {
  const std::string svg = render_svg_image_row(panels, cell_px);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("emit_svg_image_row: cannot open " + path);
  out.write(svg.data(), static_cast<std::streamsize>(svg.size()));
  if (!out) throw DataError("emit_svg_image_row: write failed for " + path);
}

}  // namespace abnn
