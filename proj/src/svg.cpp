#include "lpfa/svg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lpfa/serialize.hpp"

namespace lpfa {

namespace {

constexpr double kW = 640.0, kH = 420.0;
constexpr double kLeft = 70.0, kRight = 24.0, kTop = 44.0, kBottom = 54.0;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#17becf"};
constexpr std::size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

std::string num(double v) { return shortest(std::round(v * 100.0) / 100.0); }

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void include(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finalize() {
    if (lo > hi) {
      lo = 0.0;
      hi = 1.0;
    }
    if (lo == hi) {
      lo -= 1.0;
      hi += 1.0;
    }
  }
  double map(double v, double a, double b) const {
    return a + (v - lo) / (hi - lo) * (b - a);
  }
};

void text(std::string& out, double x, double y, const std::string& s,
          const std::string& extra = "") {
  out += "<text x=\"" + num(x) + "\" y=\"" + num(y) +
         "\" font-family=\"monospace\" font-size=\"12\" " + extra + ">" +
         esc(s) + "</text>\n";
}

void frame(std::string& out, const std::vector<SvgSeries>& series,
           const std::string& title, const std::string& x_label,
           const std::string& y_label, Range& rx, Range& ry) {
  for (const SvgSeries& s : series) {
    const std::size_t n = std::min(s.xs.size(), s.ys.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(s.ys[i])) continue;
      rx.include(s.xs[i]);
      ry.include(s.ys[i]);
    }
  }
  rx.finalize();
  ry.finalize();

  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kW) +
         "\" height=\"" + num(kH) + "\" viewBox=\"0 0 " + num(kW) + " " +
         num(kH) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  text(out, kW / 2, 24, title, "text-anchor=\"middle\" font-size=\"14\"");

  const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
  out += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" +
         num(x1) + "\" y2=\"" + num(y0) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" +
         num(x0) + "\" y2=\"" + num(y1) + "\" stroke=\"black\"/>\n";

  for (int t = 0; t <= 4; ++t) {
    const double f = t / 4.0;
    const double vx = rx.lo + f * (rx.hi - rx.lo);
    const double px = x0 + f * (x1 - x0);
    out += "<line x1=\"" + num(px) + "\" y1=\"" + num(y0) + "\" x2=\"" +
           num(px) + "\" y2=\"" + num(y0 + 5) + "\" stroke=\"black\"/>\n";
    text(out, px, y0 + 20, shortest(std::round(vx * 1e6) / 1e6),
         "text-anchor=\"middle\" font-size=\"10\"");
    const double vy = ry.lo + f * (ry.hi - ry.lo);
    const double py = y0 + f * (y1 - y0);
    out += "<line x1=\"" + num(x0 - 5) + "\" y1=\"" + num(py) + "\" x2=\"" +
           num(x0) + "\" y2=\"" + num(py) + "\" stroke=\"black\"/>\n";
    text(out, x0 - 8, py + 4, shortest(std::round(vy * 1e6) / 1e6),
         "text-anchor=\"end\" font-size=\"10\"");
  }
  text(out, (x0 + x1) / 2, kH - 12, x_label, "text-anchor=\"middle\"");
  text(out, 16, (y0 + y1) / 2, y_label,
       "text-anchor=\"middle\" transform=\"rotate(-90 16 " +
           num((y0 + y1) / 2) + ")\"");

  double ly = kTop + 6;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % kPaletteSize];
    out += "<line x1=\"" + num(x1 - 150) + "\" y1=\"" + num(ly) + "\" x2=\"" +
           num(x1 - 130) + "\" y2=\"" + num(ly) + "\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    text(out, x1 - 124, ly + 4, series[s].name, "font-size=\"10\"");
    ly += 16;
  }
}

std::string chart(const std::vector<SvgSeries>& series,
                  const std::string& title, const std::string& x_label,
                  const std::string& y_label, bool steps) {
  std::string out;
  Range rx, ry;
  frame(out, series, title, x_label, y_label, rx, ry);
  const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;

  for (std::size_t s = 0; s < series.size(); ++s) {
    const SvgSeries& sr = series[s];
    const std::size_t n = std::min(sr.xs.size(), sr.ys.size());
    std::string pts;
    double prev_py = 0.0;
    bool have_prev = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(sr.ys[i])) continue;
      const double px = rx.map(sr.xs[i], x0, x1);
      const double py = ry.map(sr.ys[i], y0, y1);
      if (steps && have_prev)
        pts += num(px) + "," + num(prev_py) + " ";
      pts += num(px) + "," + num(py) + " ";
      prev_py = py;
      have_prev = true;
    }
    if (pts.empty()) continue;
    out += "<polyline fill=\"none\" stroke=\"";
    out += kPalette[s % kPaletteSize];
    out += "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
  }
  out += "</svg>\n";
  return out;
}

void lerp_color(double t, int& r, int& g, int& b) {
  // blue (#2166ac) -> white -> red (#b2182b)
  const int blue[3] = {0x21, 0x66, 0xac};
  const int red[3] = {0xb2, 0x18, 0x2b};
  const int white[3] = {0xf7, 0xf7, 0xf7};
  const int* from = t < 0.5 ? blue : white;
  const int* to = t < 0.5 ? white : red;
  const double f = t < 0.5 ? t * 2.0 : (t - 0.5) * 2.0;
  r = static_cast<int>(std::lround(from[0] + f * (to[0] - from[0])));
  g = static_cast<int>(std::lround(from[1] + f * (to[1] - from[1])));
  b = static_cast<int>(std::lround(from[2] + f * (to[2] - from[2])));
}

std::string hex2(int v) {
  const char* digits = "0123456789abcdef";
  std::string s;
  s += digits[(v >> 4) & 0xf];
  s += digits[v & 0xf];
  return s;
}

}  // namespace

std::string svg_line_chart(const std::vector<SvgSeries>& series,
                           const std::string& title,
                           const std::string& x_label,
                           const std::string& y_label) {
  return chart(series, title, x_label, y_label, false);
}

std::string svg_step_chart(const std::vector<SvgSeries>& series,
                           const std::string& title,
                           const std::string& x_label,
                           const std::string& y_label) {
  return chart(series, title, x_label, y_label, true);
}

std::string svg_heatmap(const Mat& m, const std::string& title) {
  double lo = 0.0, hi = 0.0;
  for (double v : m.data) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // Symmetric range keeps zero on white when the data spans both signs.
  const double mag = std::max(std::fabs(lo), std::fabs(hi));
  if (lo < 0.0 && hi > 0.0) {
    lo = -mag;
    hi = mag;
  }
  if (lo == hi) hi = lo + 1.0;

  const double cell =
      std::min((kW - kLeft - kRight) / std::max<std::size_t>(m.cols, 1),
               (kH - kTop - kBottom) / std::max<std::size_t>(m.rows, 1));
  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kW) +
         "\" height=\"" + num(kH) + "\" viewBox=\"0 0 " + num(kW) + " " +
         num(kH) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  text(out, kW / 2, 24, title, "text-anchor=\"middle\" font-size=\"14\"");
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      const double v = m.at(i, j);
      const double t =
          std::isfinite(v) ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.5;
      int r, g, b;
      lerp_color(t, r, g, b);
      out += "<rect x=\"" + num(kLeft + j * cell) + "\" y=\"" +
             num(kTop + i * cell) + "\" width=\"" + num(cell) +
             "\" height=\"" + num(cell) + "\" fill=\"#" + hex2(r) + hex2(g) +
             hex2(b) + "\"/>\n";
    }
  }
  text(out, kLeft, kH - 16, "min " + shortest(lo), "font-size=\"10\"");
  text(out, kLeft + 180, kH - 16, "max " + shortest(hi), "font-size=\"10\"");
  out += "</svg>\n";
  return out;
}

}  // namespace lpfa
