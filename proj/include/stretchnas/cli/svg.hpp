#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "stretchnas/optimization/search.hpp"

namespace stretchnas::cli {

struct Series {
  std::string name;
  std::string color;
  std::vector<double> values;
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// One panel of line plots over x = 1..n at vertical offset `top`.
inline std::string panel(const std::string& title, const std::vector<Series>& series, double top) {
  const double left = 60, width = 520, height = 200;
  double lo = 0, hi = 0;
  std::size_t n = 0;
  bool first = true;
  for (const auto& s : series)
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
      n = std::max(n, s.values.size());
    }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  auto x = [&](std::size_t k) { return left + (n <= 1 ? width / 2 : width * static_cast<double>(k) / static_cast<double>(n - 1)); };
  auto y = [&](double v) { return top + height - height * (v - lo) / (hi - lo); };
  std::string out;
  out += "<text x=\"" + num(left) + "\" y=\"" + num(top - 8) + "\" font-size=\"13\">" + title + "</text>\n";
  out += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(width) + "\" height=\"" + num(height) +
         "\" fill=\"none\" stroke=\"#888\"/>\n";
  out += "<text x=\"" + num(left - 6) + "\" y=\"" + num(top + 4) + "\" font-size=\"10\" text-anchor=\"end\">" + num(hi) + "</text>\n";
  out += "<text x=\"" + num(left - 6) + "\" y=\"" + num(top + height) + "\" font-size=\"10\" text-anchor=\"end\">" + num(lo) +
         "</text>\n";
  out += "<text x=\"" + num(left + width) + "\" y=\"" + num(top + height + 14) +
         "\" font-size=\"10\" text-anchor=\"end\">epoch " + std::to_string(n) + "</text>\n";
  double legend = left + 8;
  for (const auto& s : series) {
    std::string points;
    for (std::size_t k = 0; k < s.values.size(); ++k)
      if (std::isfinite(s.values[k])) points += num(x(k)) + "," + num(y(s.values[k])) + " ";
    out += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
    out += "<text x=\"" + num(legend) + "\" y=\"" + num(top + 14) + "\" font-size=\"11\" fill=\"" + s.color + "\">" + s.name +
           "</text>\n";
    legend += 90;
  }
  return out;
}

}  // namespace detail

/// Self-contained SVG with loss curves on top and topology statistics below.
inline std::string metrics_svg(const std::vector<optimization::EpochMetrics>& metrics) {
  Series tr{"L_tr", "#1f77b4", {}}, val{"L_val", "#d62728", {}};
  Series entropy{"beta entropy", "#2ca02c", {}}, r{"r(beta)", "#9467bd", {}};
  for (const auto& m : metrics) {
    tr.values.push_back(m.train_loss);
    val.values.push_back(m.val_loss);
    entropy.values.push_back(m.beta_entropy_mean);
    r.values.push_back(m.r_beta);
  }
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"620\" height=\"540\" font-family=\"sans-serif\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += detail::panel("search losses", {tr, val}, 30);
  out += detail::panel("topology", {entropy, r}, 300);
  out += "</svg>\n";
  return out;
}

}  // namespace stretchnas::cli
