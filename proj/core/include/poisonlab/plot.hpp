#pragma once

#include <string>
#include <vector>

namespace poisonlab::plot {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> yerr;  // optional; same length as y when present
};

/// Mean +- error line chart, one colored series per entry. Deterministic
/// output for identical inputs.
void render_line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series,
                       const std::string& png_path);

/// Fallback for single-point grids: one bar per series.
void render_bar_chart(const std::string& title, const std::string& y_label,
                      const std::vector<Series>& series, const std::string& png_path);

}  // namespace poisonlab::plot
