// SPDX-License-Identifier: Apache-2.0
#include "ilens/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "ilens/error.hpp"

namespace ilens {

namespace {

constexpr const char* kPalette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};

std::string fixed(double v, int digits) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, digits);
  std::string s(buf, r.ptr);
  return s == "-0" || s == "-0.0" || s == "-0.00" || s == "-0.000" ? s.substr(1) : s;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Round-number tick step giving roughly `want` intervals over span.
double tick_step(double span, int want) {
  const double raw = span / want;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10 * mag;
}

int tick_digits(double step) { return std::max(0, static_cast<int>(-std::floor(std::log10(step) + 1e-9))); }

void header(std::ostringstream& o, int w, int h, const std::string& title) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
    << ' ' << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
    << "</text>\n";
}

}  // namespace

std::string line_plot_svg(const PlotLabels& labels, const std::vector<PlotSeries>& series) {
  constexpr int W = 640, H = 400, L = 70, R = 170, T = 40, B = 55;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw DimensionError("plot series '" + s.name + "' has mismatched x and y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || !std::isfinite(s.x[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double ys = tick_step(y1 - y0, 5);
  y0 = std::floor(y0 / ys) * ys;
  y1 = std::ceil(y1 / ys) * ys;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return T + (1 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  header(o, W, H, labels.title);
  o << "<g stroke=\"#dddddd\">\n";
  const int yd = tick_digits(ys);
  std::ostringstream ticks;
  for (double y = y0; y <= y1 + ys * 1e-6; y += ys) {
    o << "<line x1=\"" << L << "\" x2=\"" << L + pw << "\" y1=\"" << fixed(py(y), 1) << "\" y2=\"" << fixed(py(y), 1)
      << "\"/>\n";
    ticks << "<text x=\"" << L - 6 << "\" y=\"" << fixed(py(y) + 4, 1) << "\" text-anchor=\"end\">" << fixed(y, yd)
          << "</text>\n";
  }
  const double xs = tick_step(x1 - x0, 8);
  const double xs_int = std::max(1.0, std::round(xs));
  const double xstep = (x1 - x0) >= 2 ? xs_int : xs;
  const int xd = tick_digits(xstep);
  for (double x = std::ceil(x0 / xstep) * xstep; x <= x1 + xstep * 1e-6; x += xstep) {
    ticks << "<text x=\"" << fixed(px(x), 1) << "\" y=\"" << T + ph + 18 << "\" text-anchor=\"middle\">"
          << fixed(x, xd) << "</text>\n";
  }
  o << "</g>\n" << ticks.str();
  o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << escape(labels.x)
    << "</text>\n";
  o << "<text transform=\"translate(16," << T + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(labels.y) << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    std::string path;
    bool pen = false;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) {
        pen = false;
        continue;
      }
      path += (pen ? " L" : " M") + fixed(px(s.x[i]), 1) + ' ' + fixed(py(s.y[i]), 1);
      pen = true;
      o << "<circle cx=\"" << fixed(px(s.x[i]), 1) << "\" cy=\"" << fixed(py(s.y[i]), 1) << "\" r=\"2.5\" fill=\""
        << color << "\"/>\n";
    }
    if (!path.empty()) {
      o << "<path d=\"" << path.substr(1) << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    }
    const int ly = T + 10 + static_cast<int>(k) * 18;
    o << "<line x1=\"" << W - R + 12 << "\" x2=\"" << W - R + 32 << "\" y1=\"" << ly << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string diverging_color(double v) {
  v = std::clamp(std::isfinite(v) ? v : 0.0, -1.0, 1.0);
  // White at 0 towards #b2182b (red) or #2166ac (blue).
  const int target[2][3] = {{0x21, 0x66, 0xac}, {0xb2, 0x18, 0x2b}};
  const auto& t = target[v >= 0 ? 1 : 0];
  const double a = std::abs(v);
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(255 + (t[0] - 255) * a)),
                static_cast<int>(std::lround(255 + (t[1] - 255) * a)),
                static_cast<int>(std::lround(255 + (t[2] - 255) * a)));
  return buf;
}

std::string heatmap_svg(const PlotLabels& labels, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, const std::vector<std::vector<double>>& values) {
  if (values.size() != row_labels.size()) throw DimensionError("heatmap rows do not match row labels");
  for (const auto& r : values)
    if (r.size() != col_labels.size()) throw DimensionError("heatmap row width does not match column labels");
  double vmax = 0;
  for (const auto& r : values)
    for (double v : r)
      if (std::isfinite(v)) vmax = std::max(vmax, std::abs(v));
  if (vmax == 0) vmax = 1;
  const int rows = static_cast<int>(values.size()), cols = static_cast<int>(col_labels.size());
  const int cell = std::clamp(420 / std::max(1, std::max(rows, cols)), 14, 48);
  constexpr int L = 80, T = 40, legend = 90;
  const int W = L + cols * cell + legend + 20, H = T + rows * cell + 60;

  std::ostringstream o;
  header(o, W, H, labels.title);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const double v = values[i][j];
      o << "<rect x=\"" << L + j * cell << "\" y=\"" << T + i * cell << "\" width=\"" << cell << "\" height=\""
        << cell << "\" fill=\"" << diverging_color(v / vmax) << "\"><title>" << escape(row_labels[i]) << ", "
        << escape(col_labels[j]) << ": " << fixed(v, 4) << "</title></rect>\n";
    }
    o << "<text x=\"" << L - 6 << "\" y=\"" << T + i * cell + cell / 2 + 4 << "\" text-anchor=\"end\">"
      << escape(row_labels[i]) << "</text>\n";
  }
  for (int j = 0; j < cols; ++j) {
    o << "<text x=\"" << L + j * cell + cell / 2 << "\" y=\"" << T + rows * cell + 16 << "\" text-anchor=\"middle\">"
      << escape(col_labels[j]) << "</text>\n";
  }
  o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << cols * cell << "\" height=\"" << rows * cell
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << L + cols * cell / 2 << "\" y=\"" << H - 14 << "\" text-anchor=\"middle\">" << escape(labels.x)
    << "</text>\n";
  o << "<text transform=\"translate(16," << T + rows * cell / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(labels.y) << "</text>\n";

  // Colour bar from +vmax (top) to -vmax (bottom).
  const int bx = L + cols * cell + 20, bh = std::max(100, rows * cell), steps = 20;
  for (int s = 0; s < steps; ++s) {
    const double v = 1.0 - 2.0 * (s + 0.5) / steps;
    o << "<rect x=\"" << bx << "\" y=\"" << T + s * bh / steps << "\" width=\"16\" height=\"" << bh / steps + 1
      << "\" fill=\"" << diverging_color(v) << "\"/>\n";
  }
  o << "<text x=\"" << bx + 22 << "\" y=\"" << T + 8 << "\">" << fixed(vmax, 3) << "</text>\n";
  o << "<text x=\"" << bx + 22 << "\" y=\"" << T + bh / 2 + 4 << "\">0</text>\n";
  o << "<text x=\"" << bx + 22 << "\" y=\"" << T + bh << "\">" << fixed(-vmax, 3) << "</text>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace ilens
