// SPDX-License-Identifier: Apache-2.0
//
// Static SVG figures. Output depends only on the inputs, byte for byte.
#pragma once

#include <string>
#include <vector>

namespace ilens {

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;  // non-finite y values break the line
};

struct PlotLabels {
  std::string title, x, y;
};

std::string line_plot_svg(const PlotLabels& labels, const std::vector<PlotSeries>& series);

/// Diverging palette centred at 0: blue below, white at 0, red above. The
/// colour scale is symmetric about 0 so equal magnitudes get equal intensity.
std::string heatmap_svg(const PlotLabels& labels, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, const std::vector<std::vector<double>>& values);

/// Colour for v in [-1, 1] on the diverging palette, as "#rrggbb".
std::string diverging_color(double v);

}  // namespace ilens
