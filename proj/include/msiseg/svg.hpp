#pragma once

// Report graphics rendered as standalone SVG documents: multi-series line
// charts for training curves and a row-normalized confusion-matrix heat map.
// Everything is emitted by direct string assembly so reports stay dependency
// free and byte-for-byte reproducible.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "msiseg/common.hpp"
#include "msiseg/metrics.hpp"

namespace msiseg {

// One named curve. Points are connected in index order; x values do not have
// to be sorted, although training curves always are.
struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Fixed chart geometry, exposed so callers (and tests) can predict exactly
// where a data point lands on the canvas.
struct ChartLayout {
  int width = 640;
  int height = 400;
  int margin_left = 64;
  int margin_right = 24;
  int margin_top = 40;
  int margin_bottom = 52;

  int plot_width() const { return width - margin_left - margin_right; }
  int plot_height() const { return height - margin_top - margin_bottom; }

  void validate() const {
    if (plot_width() < 32 || plot_height() < 32)
      throw ArgumentError("chart: margins leave no room for the plot frame");
  }
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
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

// Canvas coordinates with two decimals: enough for crisp rendering, short
// enough to keep files small, and a stable textual form for reproducibility.
inline std::string svg_coord(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return std::string(buf);
}

// Tick labels use four significant digits; full precision would turn axis
// labels into noise.
inline std::string tick_label(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return std::string(buf);
}

struct AxisSpan {
  double lo = 0.0;
  double hi = 1.0;

  double place(double v) const { return (v - lo) / (hi - lo); }
};

// Pads the data range so extreme points do not sit on the frame; a collapsed
// range (single x value, constant series) is widened symmetrically.
inline AxisSpan span_of(double lo, double hi) {
  AxisSpan s;
  if (hi - lo < 1e-12) {
    s.lo = lo - 0.5;
    s.hi = hi + 0.5;
  } else {
    const double pad = 0.04 * (hi - lo);
    s.lo = lo - pad;
    s.hi = hi + pad;
  }
  return s;
}

inline const char* series_color(size_t index) {
  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                   "#9467bd", "#ff7f0e", "#17becf"};
  return kPalette[index % (sizeof(kPalette) / sizeof(kPalette[0]))];
}

// White-to-dark-blue ramp for heat-map cells; t is clamped to [0, 1].
inline std::string heat_fill(double t) {
  t = std::min(1.0, std::max(0.0, t));
  const int r = static_cast<int>(std::lround(255.0 + t * (8.0 - 255.0)));
  const int g = static_cast<int>(std::lround(255.0 + t * (48.0 - 255.0)));
  const int b = static_cast<int>(std::lround(255.0 + t * (107.0 - 255.0)));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return std::string(buf);
}

}  // namespace detail

// Renders every series into one chart with linear axes, five ticks per axis,
// a legend, and one polyline per series (a lone point becomes a dot). Throws
// if the series list is empty, a series has no points or non-finite values,
// or x and y disagree in length.
inline std::string render_line_chart(const std::vector<PlotSeries>& series,
                                     const std::string& title, const std::string& x_label,
                                     const std::string& y_label,
                                     const ChartLayout& layout = ChartLayout{}) {
  layout.validate();
  require(!series.empty(), "chart: no series to plot");
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo;
  double ylo = xlo, yhi = -xlo;
  for (const auto& s : series) {
    require(!s.x.empty(), "chart: series '" + s.label + "' has no points");
    if (s.x.size() != s.y.size())
      throw ShapeError("chart: series '" + s.label + "' has " + std::to_string(s.x.size()) +
                       " x values but " + std::to_string(s.y.size()) + " y values");
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
        throw ArgumentError("chart: series '" + s.label + "' has a non-finite point");
      xlo = std::min(xlo, s.x[i]);
      xhi = std::max(xhi, s.x[i]);
      ylo = std::min(ylo, s.y[i]);
      yhi = std::max(yhi, s.y[i]);
    }
  }
  const detail::AxisSpan sx = detail::span_of(xlo, xhi);
  const detail::AxisSpan sy = detail::span_of(ylo, yhi);
  const double px0 = layout.margin_left, pw = layout.plot_width();
  const double py0 = layout.margin_top, ph = layout.plot_height();
  auto to_px = [&](double x) { return px0 + sx.place(x) * pw; };
  auto to_py = [&](double y) { return py0 + (1.0 - sy.place(y)) * ph; };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(layout.width) +
         "\" height=\"" + std::to_string(layout.height) + "\" viewBox=\"0 0 " +
         std::to_string(layout.width) + " " + std::to_string(layout.height) + "\">\n";
  out += "  <rect x=\"0\" y=\"0\" width=\"" + std::to_string(layout.width) + "\" height=\"" +
         std::to_string(layout.height) + "\" fill=\"#ffffff\"/>\n";
  out += "  <text x=\"" + detail::svg_coord(layout.width / 2.0) +
         "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         detail::svg_escape(title) + "</text>\n";

  constexpr int kTicks = 5;
  for (int i = 0; i < kTicks; ++i) {
    const double f = static_cast<double>(i) / (kTicks - 1);
    const double vx = sx.lo + f * (sx.hi - sx.lo);
    const double vy = sy.lo + f * (sy.hi - sy.lo);
    const std::string gx = detail::svg_coord(px0 + f * pw);
    const std::string gy = detail::svg_coord(py0 + (1.0 - f) * ph);
    out += "  <line x1=\"" + gx + "\" y1=\"" + detail::svg_coord(py0) + "\" x2=\"" + gx +
           "\" y2=\"" + detail::svg_coord(py0 + ph) + "\" stroke=\"#dddddd\"/>\n";
    out += "  <line x1=\"" + detail::svg_coord(px0) + "\" y1=\"" + gy + "\" x2=\"" +
           detail::svg_coord(px0 + pw) + "\" y2=\"" + gy + "\" stroke=\"#dddddd\"/>\n";
    out += "  <text x=\"" + gx + "\" y=\"" + detail::svg_coord(py0 + ph + 18.0) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
           detail::tick_label(vx) + "</text>\n";
    out += "  <text x=\"" + detail::svg_coord(px0 - 8.0) + "\" y=\"" +
           detail::svg_coord(py0 + (1.0 - f) * ph + 4.0) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
           detail::tick_label(vy) + "</text>\n";
  }
  out += "  <rect x=\"" + detail::svg_coord(px0) + "\" y=\"" + detail::svg_coord(py0) +
         "\" width=\"" + detail::svg_coord(pw) + "\" height=\"" + detail::svg_coord(ph) +
         "\" fill=\"none\" stroke=\"#444444\"/>\n";
  out += "  <text x=\"" + detail::svg_coord(px0 + pw / 2.0) + "\" y=\"" +
         detail::svg_coord(layout.height - 12.0) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
         detail::svg_escape(x_label) + "</text>\n";
  out += "  <text x=\"16\" y=\"" + detail::svg_coord(py0 + ph / 2.0) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 " +
         detail::svg_coord(py0 + ph / 2.0) + ")\">" + detail::svg_escape(y_label) + "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = detail::series_color(si);
    if (s.x.size() == 1) {
      out += "  <circle cx=\"" + detail::svg_coord(to_px(s.x[0])) + "\" cy=\"" +
             detail::svg_coord(to_py(s.y[0])) + "\" r=\"3\" fill=\"" + color + "\"/>\n";
    } else {
      out += "  <polyline fill=\"none\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"1.5\" points=\"";
      for (size_t i = 0; i < s.x.size(); ++i) {
        if (i) out += " ";
        out += detail::svg_coord(to_px(s.x[i])) + "," + detail::svg_coord(to_py(s.y[i]));
      }
      out += "\"/>\n";
    }
    const double ly = py0 + 10.0 + 16.0 * static_cast<double>(si);
    const double lx = px0 + pw - 150.0;
    out += "  <rect x=\"" + detail::svg_coord(lx) + "\" y=\"" + detail::svg_coord(ly - 8.0) +
           "\" width=\"12\" height=\"8\" fill=\"" + color + "\"/>\n";
    out += "  <text x=\"" + detail::svg_coord(lx + 18.0) + "\" y=\"" + detail::svg_coord(ly) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + detail::svg_escape(s.label) +
           "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

// Row-normalized confusion heat map. Rows are the labeled classes 1..N, the
// columns add a leading "none" bucket for pixels predicted as background, and
// every cell is shaded by its share of the row total (an unseen class leaves
// a white row). Charts up to 12 classes also print the share in each cell.
inline std::string render_confusion_heatmap(const ConfusionMatrix& cm, const std::string& title) {
  const int classes = cm.classes;
  require(classes >= 1, "heatmap: confusion matrix has no classes");
  const int cols = classes + 1;
  const int cell = classes <= 12 ? 40 : 14;
  const int left = 76, top = 48, right = 16, bottom = 56;
  const int width = left + cols * cell + right;
  const int height = top + classes * cell + bottom;
  const bool annotate = classes <= 12;

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) +
         " " + std::to_string(height) + "\">\n";
  out += "  <rect x=\"0\" y=\"0\" width=\"" + std::to_string(width) + "\" height=\"" +
         std::to_string(height) + "\" fill=\"#ffffff\"/>\n";
  out += "  <text x=\"" + detail::svg_coord(width / 2.0) +
         "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         detail::svg_escape(title) + "</text>\n";

  for (int truth = 1; truth <= classes; ++truth) {
    int64_t row_total = 0;
    for (int pred = 0; pred <= classes; ++pred) row_total += cm.at(truth, pred);
    for (int pred = 0; pred <= classes; ++pred) {
      const double share =
          row_total > 0 ? static_cast<double>(cm.at(truth, pred)) / static_cast<double>(row_total)
                        : 0.0;
      const int cx = left + pred * cell;
      const int cy = top + (truth - 1) * cell;
      out += "  <rect x=\"" + std::to_string(cx) + "\" y=\"" + std::to_string(cy) +
             "\" width=\"" + std::to_string(cell) + "\" height=\"" + std::to_string(cell) +
             "\" fill=\"" + detail::heat_fill(share) + "\" stroke=\"#cccccc\"/>\n";
      if (annotate && row_total > 0) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.0f", 100.0 * share);
        const bool dark = share > 0.5;
        out += "  <text x=\"" + detail::svg_coord(cx + cell / 2.0) + "\" y=\"" +
               detail::svg_coord(cy + cell / 2.0 + 4.0) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" +
               (dark ? "#ffffff" : "#333333") + "\">" + buf + "</text>\n";
      }
    }
    out += "  <text x=\"" + std::to_string(left - 8) + "\" y=\"" +
           detail::svg_coord(top + (truth - 0.5) * cell + 4.0) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
           std::to_string(truth) + "</text>\n";
  }
  for (int pred = 0; pred <= classes; ++pred) {
    const std::string label = pred == 0 ? "none" : std::to_string(pred);
    out += "  <text x=\"" + detail::svg_coord(left + (pred + 0.5) * cell) + "\" y=\"" +
           std::to_string(top + classes * cell + 18) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + label +
           "</text>\n";
  }
  out += "  <text x=\"" + detail::svg_coord(left + cols * cell / 2.0) + "\" y=\"" +
         std::to_string(height - 14) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">predicted class" +
         "</text>\n";
  out += "  <text x=\"20\" y=\"" + detail::svg_coord(top + classes * cell / 2.0) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 20 " +
         detail::svg_coord(top + classes * cell / 2.0) + ")\">true class</text>\n";
  out += "</svg>\n";
  return out;
}

inline void write_svg(const std::string& path, const std::string& svg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << svg;
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace msiseg
