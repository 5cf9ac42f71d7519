#include "poisonlab/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "poisonlab/pngio.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab::plot {

namespace {

struct Rgb {
    float r, g, b;
};

const Rgb kPalette[] = {
    {0.122f, 0.467f, 0.706f}, {1.000f, 0.498f, 0.055f}, {0.173f, 0.627f, 0.173f},
    {0.839f, 0.153f, 0.157f}, {0.580f, 0.404f, 0.741f}, {0.549f, 0.337f, 0.294f},
    {0.890f, 0.467f, 0.761f}, {0.498f, 0.498f, 0.498f},
};

// 5x7 glyphs, one byte per row, low 5 bits used (MSB-left).
const std::map<char, std::array<uint8_t, 7>>& font() {
    static const std::map<char, std::array<uint8_t, 7>> table = {
        {'0', {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}},
        {'1', {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e}},
        {'2', {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}},
        {'3', {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e}},
        {'4', {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}},
        {'5', {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e}},
        {'6', {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}},
        {'7', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
        {'8', {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}},
        {'9', {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}},
        {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c}},
        {',', {0x00, 0x00, 0x00, 0x00, 0x0c, 0x04, 0x08}},
        {'-', {0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00}},
        {'+', {0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00}},
        {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f}},
        {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
        {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
        {'=', {0x00, 0x00, 0x1f, 0x00, 0x1f, 0x00, 0x00}},
        {':', {0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00}},
        {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
        {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
        {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
        {'A', {0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11}},
        {'B', {0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e}},
        {'C', {0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e}},
        {'D', {0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e}},
        {'E', {0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f}},
        {'F', {0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10}},
        {'G', {0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f}},
        {'H', {0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11}},
        {'I', {0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e}},
        {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c}},
        {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
        {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f}},
        {'M', {0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11}},
        {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
        {'O', {0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e}},
        {'P', {0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10}},
        {'Q', {0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d}},
        {'R', {0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11}},
        {'S', {0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e}},
        {'T', {0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
        {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e}},
        {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04}},
        {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0a}},
        {'X', {0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11}},
        {'Y', {0x11, 0x11, 0x11, 0x0a, 0x04, 0x04, 0x04}},
        {'Z', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f}},
    };
    return table;
}

class Canvas {
public:
    Canvas(int h, int w) : img_(3, h, w) {
        std::fill(img_.v.begin(), img_.v.end(), 1.0f);  // white
    }

    int h() const { return img_.h; }
    int w() const { return img_.w; }

    void set(int x, int y, const Rgb& c) {
        if (x < 0 || y < 0 || x >= img_.w || y >= img_.h) return;
        img_.at(0, y, x) = c.r;
        img_.at(1, y, x) = c.g;
        img_.at(2, y, x) = c.b;
    }

    void line(int x0, int y0, int x1, int y1, const Rgb& c) {
        const int dx = std::abs(x1 - x0), dy = std::abs(y1 - y0);
        const int steps = std::max(1, std::max(dx, dy));
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / steps;
            set(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
                static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
        }
    }

    void thick_line(int x0, int y0, int x1, int y1, const Rgb& c) {
        line(x0, y0, x1, y1, c);
        line(x0 + 1, y0, x1 + 1, y1, c);
        line(x0, y0 + 1, x1, y1 + 1, c);
    }

    void fill_rect(int x0, int y0, int x1, int y1, const Rgb& c) {
        for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
            for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
    }

    void text(int x, int y, const std::string& s, const Rgb& c, int scale = 1) {
        int cx = x;
        for (char raw : s) {
            char ch = raw;
            if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
            const auto it = font().find(ch);
            if (it != font().end()) {
                for (int row = 0; row < 7; ++row)
                    for (int col = 0; col < 5; ++col)
                        if (it->second[row] & (1 << (4 - col)))
                            for (int sy = 0; sy < scale; ++sy)
                                for (int sx = 0; sx < scale; ++sx)
                                    set(cx + col * scale + sx, y + row * scale + sy, c);
            }
            cx += 6 * scale;
        }
    }

    static int text_width(const std::string& s, int scale = 1) {
        return static_cast<int>(s.size()) * 6 * scale;
    }

    void save(const std::string& path) const { write_png(img_, path); }

private:
    Tensor img_;
};

const Rgb kBlack{0.1f, 0.1f, 0.1f};
const Rgb kGray{0.8f, 0.8f, 0.85f};

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

struct Extent {
    double lo, hi;
};

Extent nice_extent(double lo, double hi) {
    if (!(hi > lo)) {
        const double pad = std::max(1e-6, std::fabs(lo) * 0.1 + 0.1);
        return {lo - pad, hi + pad};
    }
    const double pad = (hi - lo) * 0.08;
    return {lo - pad, hi + pad};
}

}  // namespace

void render_line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series,
                       const std::string& png_path) {
    if (series.empty()) throw std::invalid_argument("render_line_chart: no series");
    Canvas canvas(600, 800);
    const int left = 80, right = 780, top = 60, bottom = 520;

    double x_lo = series[0].x[0], x_hi = x_lo, y_lo = series[0].y[0], y_hi = y_lo;
    for (const auto& s : series) {
        for (size_t i = 0; i < s.x.size(); ++i) {
            x_lo = std::min(x_lo, s.x[i]);
            x_hi = std::max(x_hi, s.x[i]);
            const double err = i < s.yerr.size() ? s.yerr[i] : 0.0;
            y_lo = std::min(y_lo, s.y[i] - err);
            y_hi = std::max(y_hi, s.y[i] + err);
        }
    }
    const Extent ex = nice_extent(x_lo, x_hi);
    const Extent ey = nice_extent(y_lo, y_hi);
    auto map_x = [&](double v) {
        return left + static_cast<int>(std::lround((v - ex.lo) / (ex.hi - ex.lo) * (right - left)));
    };
    auto map_y = [&](double v) {
        return bottom - static_cast<int>(std::lround((v - ey.lo) / (ey.hi - ey.lo) * (bottom - top)));
    };

    for (int i = 0; i <= 5; ++i) {  // gridlines + tick labels
        const double xv = ex.lo + (ex.hi - ex.lo) * i / 5.0;
        const double yv = ey.lo + (ey.hi - ey.lo) * i / 5.0;
        canvas.line(map_x(xv), top, map_x(xv), bottom, kGray);
        canvas.line(left, map_y(yv), right, map_y(yv), kGray);
        canvas.text(map_x(xv) - 12, bottom + 8, tick_label(xv), kBlack);
        canvas.text(left - 70, map_y(yv) - 3, tick_label(yv), kBlack);
    }
    canvas.line(left, top, left, bottom, kBlack);
    canvas.line(left, bottom, right, bottom, kBlack);
    canvas.text((left + right) / 2 - Canvas::text_width(title, 2) / 2, 18, title, kBlack, 2);
    canvas.text((left + right) / 2 - Canvas::text_width(x_label) / 2, bottom + 30, x_label,
                kBlack);
    canvas.text(8, top - 24, y_label, kBlack);

    int legend_y = top + 6;
    for (size_t si = 0; si < series.size(); ++si) {
        const Rgb color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        const Series& s = series[si];
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            canvas.thick_line(map_x(s.x[i]), map_y(s.y[i]), map_x(s.x[i + 1]), map_y(s.y[i + 1]),
                              color);
        for (size_t i = 0; i < s.x.size(); ++i) {
            canvas.fill_rect(map_x(s.x[i]) - 2, map_y(s.y[i]) - 2, map_x(s.x[i]) + 2,
                             map_y(s.y[i]) + 2, color);
            if (i < s.yerr.size() && s.yerr[i] > 0.0) {
                canvas.line(map_x(s.x[i]), map_y(s.y[i] - s.yerr[i]), map_x(s.x[i]),
                            map_y(s.y[i] + s.yerr[i]), color);
                canvas.line(map_x(s.x[i]) - 3, map_y(s.y[i] - s.yerr[i]), map_x(s.x[i]) + 3,
                            map_y(s.y[i] - s.yerr[i]), color);
                canvas.line(map_x(s.x[i]) - 3, map_y(s.y[i] + s.yerr[i]), map_x(s.x[i]) + 3,
                            map_y(s.y[i] + s.yerr[i]), color);
            }
        }
        canvas.fill_rect(right - 180, legend_y, right - 170, legend_y + 10, color);
        canvas.text(right - 164, legend_y + 2, s.label, kBlack);
        legend_y += 16;
    }
    canvas.save(png_path);
}

void render_bar_chart(const std::string& title, const std::string& y_label,
                      const std::vector<Series>& series, const std::string& png_path) {
    if (series.empty()) throw std::invalid_argument("render_bar_chart: no series");
    Canvas canvas(600, 800);
    const int left = 80, right = 780, top = 60, bottom = 520;
    double y_hi = 0.0;
    for (const auto& s : series)
        for (size_t i = 0; i < s.y.size(); ++i)
            y_hi = std::max(y_hi, s.y[i] + (i < s.yerr.size() ? s.yerr[i] : 0.0));
    const Extent ey = nice_extent(0.0, std::max(y_hi, 1e-6));
    auto map_y = [&](double v) {
        return bottom - static_cast<int>(std::lround((v - ey.lo) / (ey.hi - ey.lo) * (bottom - top)));
    };
    for (int i = 0; i <= 5; ++i) {
        const double yv = ey.lo + (ey.hi - ey.lo) * i / 5.0;
        canvas.line(left, map_y(yv), right, map_y(yv), kGray);
        canvas.text(left - 70, map_y(yv) - 3, tick_label(yv), kBlack);
    }
    canvas.line(left, top, left, bottom, kBlack);
    canvas.line(left, bottom, right, bottom, kBlack);
    canvas.text((left + right) / 2 - Canvas::text_width(title, 2) / 2, 18, title, kBlack, 2);
    canvas.text(8, top - 24, y_label, kBlack);

    const int slot = (right - left) / static_cast<int>(series.size());
    for (size_t si = 0; si < series.size(); ++si) {
        const Rgb color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        const double v = series[si].y.empty() ? 0.0 : series[si].y[0];
        const int x0 = left + static_cast<int>(si) * slot + slot / 4;
        const int x1 = left + static_cast<int>(si) * slot + (3 * slot) / 4;
        canvas.fill_rect(x0, map_y(v), x1, bottom - 1, color);
        canvas.text(x0, bottom + 8, series[si].label, kBlack);
    }
    canvas.save(png_path);
}

}  // namespace poisonlab::plot
