#pragma once

#include <string>
#include <vector>

#include "lpfa/linalg.hpp"

namespace lpfa {

/// One named curve for the chart renderers.
struct SvgSeries {
  std::string name;
  std::vector<double> xs, ys;
};

/// Polyline chart with axes, ticks and a legend. Self-contained SVG text;
/// non-finite samples are skipped.
std::string svg_line_chart(const std::vector<SvgSeries>& series,
                           const std::string& title,
                           const std::string& x_label,
                           const std::string& y_label);

/// Same frame, but samples joined as horizontal steps (prefix traces).
std::string svg_step_chart(const std::vector<SvgSeries>& series,
                           const std::string& title,
                           const std::string& x_label,
                           const std::string& y_label);

/// Diverging blue-white-red cell map, zero at white when the data spans zero.
std::string svg_heatmap(const Mat& m, const std::string& title);

}  // namespace lpfa
