#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "abnn/data.hpp"

namespace abnn {

/// One curve on a plot.
struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::string colour = "#1f6fb4";
  bool dashed = false;
};

/// A shaded vertical band (e.g. a 95% predictive interval) around a curve.
struct PlotBand {
  std::vector<double> x;
  std::vector<double> lo;
  std::vector<double> hi;
  std::string colour = "#1f6fb4";
  double opacity = 0.25;
};

/// Scatter markers (e.g. context points).
struct PlotPoints {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::string colour = "#222222";
  double radius = 3.0;
};

/// Renders a standalone SVG line plot: shaded bands underneath, curves on
/// top, scatter markers last. Axis limits cover every supplied coordinate
/// with a small pad; the output is a deterministic function of the inputs.
/// The axes frame carries class "frame", curves "series", bands "band" and
/// markers "pt", so emitted geometry can be parsed back. Mismatched series
/// lengths raise ShapeError; non-finite coordinates raise DataError.
std::string render_svg_plot(const std::vector<PlotSeries>& series,
                            const std::vector<PlotBand>& bands,
                            const std::vector<PlotPoints>& points,
                            const std::string& title = "");

void emit_svg_plot(const std::vector<PlotSeries>& series, const std::vector<PlotBand>& bands,
                   const std::vector<PlotPoints>& points, const std::string& path,
                   const std::string& title = "");

/// One captioned grayscale panel in an image strip. Values are clamped to
/// [0, 1]; pixels listed in `highlight` are drawn in an accent colour
/// instead (used to show masked-out pixels).
struct SvgImagePanel {
  std::string label;
  Image image;
  std::vector<bool> highlight;  // empty, or one flag per pixel
};

/// Renders a horizontal strip of image panels, one pixel per `cell_px`
/// square (rects with class "px"). Deterministic bytes, like the plot.
std::string render_svg_image_row(const std::vector<SvgImagePanel>& panels,
                                 std::size_t cell_px = 8);

void emit_svg_image_row(const std::vector<SvgImagePanel>& panels, const std::string& path,
                        std::size_t cell_px = 8);

}  // namespace abnn
