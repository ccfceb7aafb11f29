#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <fmt/format.h>

#include "rnflnet/error.hpp"
#include "rnflnet/evalstats.hpp"
#include "rnflnet/image.hpp"

namespace rnfl {

// Minimal SVG document builder. Coordinates are pixels, origin top-left.
class Svg {
public:
    Svg(double width, double height) : w_(width), h_(height) {}

    static std::string escape(const std::string& s) {
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

    void rect(double x, double y, double w, double h, const std::string& fill, const std::string& stroke = "none",
              double opacity = 1.0) {
        body_ += fmt::format(R"(<rect x="{:.2f}" y="{:.2f}" width="{:.2f}" height="{:.2f}" fill="{}" stroke="{}")",
                             x, y, w, h, fill, stroke);
        if (opacity < 1.0) body_ += fmt::format(R"( fill-opacity="{:.3f}")", opacity);
        body_ += "/>\n";
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0,
              const std::string& dash = "") {
        body_ += fmt::format(R"(<line x1="{:.2f}" y1="{:.2f}" x2="{:.2f}" y2="{:.2f}" stroke="{}" stroke-width="{:.2f}")",
                             x1, y1, x2, y2, stroke, width);
        if (!dash.empty()) body_ += fmt::format(R"( stroke-dasharray="{}")", dash);
        body_ += "/>\n";
    }
    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke, double width = 1.5,
                  const std::string& fill = "none") {
        body_ += R"(<polyline points=")";
        for (const auto& [x, y] : pts) body_ += fmt::format("{:.2f},{:.2f} ", x, y);
        body_ += fmt::format(R"(" fill="{}" stroke="{}" stroke-width="{:.2f}"/>)", fill, stroke, width) + "\n";
    }
    void polygon(const std::vector<std::pair<double, double>>& pts, const std::string& fill, double opacity,
                 const std::string& stroke) {
        body_ += R"(<polygon points=")";
        for (const auto& [x, y] : pts) body_ += fmt::format("{:.2f},{:.2f} ", x, y);
        body_ += fmt::format(R"(" fill="{}" fill-opacity="{:.3f}" stroke="{}"/>)", fill, opacity, stroke) + "\n";
    }
    void circle(double cx, double cy, double r, const std::string& fill, double opacity = 1.0) {
        body_ += fmt::format(R"(<circle cx="{:.2f}" cy="{:.2f}" r="{:.2f}" fill="{}" fill-opacity="{:.3f}"/>)", cx, cy,
                             r, fill, opacity) +
                 "\n";
    }
    void text(double x, double y, const std::string& s, double size = 12, const std::string& anchor = "start",
              double rotate = 0.0) {
        body_ += fmt::format(R"(<text x="{:.2f}" y="{:.2f}" font-family="sans-serif" font-size="{:.1f}" text-anchor="{}")",
                             x, y, size, anchor);
        if (rotate != 0.0) body_ += fmt::format(R"x( transform="rotate({:.1f} {:.2f} {:.2f})")x", rotate, x, y);
        body_ += ">" + escape(s) + "</text>\n";
    }
    void image(double x, double y, double w, double h, const std::string& data_uri) {
        body_ += fmt::format(
            R"(<image x="{:.2f}" y="{:.2f}" width="{:.2f}" height="{:.2f}" preserveAspectRatio="none" style="image-rendering:pixelated" href="{}"/>)",
            x, y, w, h, data_uri);
        body_ += "\n";
    }

    std::string str() const {
        return fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{:.0f}" height="{:.0f}" viewBox="0 0 {:.0f} {:.0f}">)",
                           w_, h_, w_, h_) +
               "\n" + fmt::format(R"(<rect width="100%" height="100%" fill="white"/>)") + "\n" + body_ + "</svg>\n";
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + path.string());
        out << str();
    }

private:
    double w_, h_;
    std::string body_;
};

// ---------------------------------------------------------------------------
// Embedded raster images

inline std::string base64(const std::string& bytes) {
    using namespace boost::archive::iterators;
    using It = base64_from_binary<transform_width<std::string::const_iterator, 6, 8>>;
    std::string out(It(bytes.begin()), It(bytes.end()));
    out.append((3 - bytes.size() % 3) % 3, '=');
    return out;
}

// 24-bit uncompressed BMP, bottom-up rows padded to 4 bytes.
inline std::string encode_bmp(const Image& img) {
    const Image rgb = convert_channels(img, 3);
    const std::size_t row = (rgb.width * 3 + 3) / 4 * 4;
    const std::uint32_t data_size = std::uint32_t(row * rgb.height), file_size = 54 + data_size;
    std::string b(file_size, '\0');
    auto put32 = [&](std::size_t at, std::uint32_t v) {
        for (int i = 0; i < 4; ++i) b[at + i] = char((v >> (8 * i)) & 0xff);
    };
    b[0] = 'B';
    b[1] = 'M';
    put32(2, file_size);
    put32(10, 54);
    put32(14, 40);
    put32(18, std::uint32_t(rgb.width));
    put32(22, std::uint32_t(rgb.height));
    b[26] = 1;   // planes
    b[28] = 24;  // bits per pixel
    put32(34, data_size);
    for (std::size_t y = 0; y < rgb.height; ++y) {
        const std::size_t base = 54 + (rgb.height - 1 - y) * row;
        for (std::size_t x = 0; x < rgb.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) b[base + x * 3 + c] = char(quantize8(rgb.at(2 - c, y, x)));
    }
    return b;
}

inline std::string image_data_uri(const Image& img) { return "data:image/bmp;base64," + base64(encode_bmp(img)); }

// ---------------------------------------------------------------------------
// Plot frames

struct Range {
    double lo, hi;
};

inline Range data_range(const std::vector<double>& v, double pad_frac = 0.05) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double x : v)
        if (std::isfinite(x)) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    if (!std::isfinite(lo)) return {0.0, 1.0};
    if (hi - lo < 1e-12) {
        lo -= 1.0;
        hi += 1.0;
    }
    const double pad = (hi - lo) * pad_frac;
    return {lo - pad, hi + pad};
}

// About five round tick values covering the range.
inline std::vector<double> nice_ticks(Range r) {
    const double span = r.hi - r.lo;
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0})
        if (m * mag >= raw) {
            step = m * mag;
            break;
        }
    std::vector<double> t;
    for (double k = std::ceil(r.lo / step); k * step <= r.hi + 1e-9 * step; k += 1.0) t.push_back(k * step + 0.0);
    return t;
}

// Axes box with a linear data-to-pixel map.
class Frame {
public:
    Frame(Svg& svg, double x, double y, double w, double h, Range xr, Range yr)
        : svg_(svg), x_(x), y_(y), w_(w), h_(h), xr_(xr), yr_(yr) {}

    double px(double v) const { return x_ + (v - xr_.lo) / (xr_.hi - xr_.lo) * w_; }
    double py(double v) const { return y_ + h_ - (v - yr_.lo) / (yr_.hi - yr_.lo) * h_; }
    bool contains(double vx, double vy) const {
        return vx >= xr_.lo && vx <= xr_.hi && vy >= yr_.lo && vy <= yr_.hi;
    }

    void draw_axes(const std::string& xlabel, const std::string& ylabel, bool x_ticks = true) {
        svg_.rect(x_, y_, w_, h_, "none", "#444");
        if (x_ticks)
            for (double t : nice_ticks(xr_)) {
                svg_.line(px(t), y_ + h_, px(t), y_ + h_ + 4, "#444");
                svg_.text(px(t), y_ + h_ + 16, fmt::format("{:g}", t), 10, "middle");
            }
        for (double t : nice_ticks(yr_)) {
            svg_.line(x_ - 4, py(t), x_, py(t), "#444");
            svg_.text(x_ - 6, py(t) + 3, fmt::format("{:g}", t), 10, "end");
        }
        if (!xlabel.empty()) svg_.text(x_ + w_ / 2, y_ + h_ + 34, xlabel, 12, "middle");
        if (!ylabel.empty()) svg_.text(x_ - 40, y_ + h_ / 2, ylabel, 12, "middle", -90);
    }

    void points(const std::vector<double>& xs, const std::vector<double>& ys, const std::string& color,
                double r = 2.2, double opacity = 0.55) {
        for (std::size_t i = 0; i < xs.size(); ++i)
            if (contains(xs[i], ys[i])) svg_.circle(px(xs[i]), py(ys[i]), r, color, opacity);
    }

    void curve(const std::vector<double>& xs, const std::vector<double>& ys, const std::string& color,
               double width = 2.0) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < xs.size(); ++i) pts.emplace_back(px(xs[i]), py(ys[i]));
        svg_.polyline(pts, color, width);
    }

    void hline(double v, const std::string& color, const std::string& dash = "") {
        svg_.line(x_, py(v), x_ + w_, py(v), color, 1.2, dash);
    }

    Range xr() const { return xr_; }
    Range yr() const { return yr_; }

private:
    Svg& svg_;
    double x_, y_, w_, h_;
    Range xr_, yr_;
};

inline const std::vector<std::string>& palette() {
    static const std::vector<std::string> p{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    return p;
}

// ---------------------------------------------------------------------------
// Figures

struct NamedRoc {
    std::string label;
    RocResult roc;
};

inline Svg roc_plot(const std::vector<NamedRoc>& curves, const std::string& title) {
    Svg svg(460, 440);
    svg.text(230, 22, title, 14, "middle");
    Frame f(svg, 60, 40, 360, 340, {0, 1}, {0, 1});
    f.draw_axes("1 - specificity", "sensitivity");
    svg.line(f.px(0), f.py(0), f.px(1), f.py(1), "#aaa", 1.0, "4 3");
    for (std::size_t i = 0; i < curves.size(); ++i) {
        const auto& c = curves[i];
        std::vector<double> x, y;
        for (const auto& p : c.roc.points) {
            x.push_back(p.fpr);
            y.push_back(p.tpr);
        }
        const auto& col = palette()[i % palette().size()];
        f.curve(x, y, col);
        std::string label = fmt::format("{}: AUC {:.3f}", c.label, c.roc.auc);
        if (std::isfinite(c.roc.ci_low)) label += fmt::format(" ({:.3f}-{:.3f})", c.roc.ci_low, c.roc.ci_high);
        svg.line(250, 300 + 18 * double(i), 270, 300 + 18 * double(i), col, 2.0);
        svg.text(275, 304 + 18 * double(i), label, 10);
    }
    return svg;
}

inline void histogram_bars(Svg& svg, const std::vector<double>& v, Range r, std::size_t bins, double x, double y,
                           double len, double depth, bool vertical_axis) {
    std::vector<double> counts(bins, 0.0);
    for (double s : v) {
        if (!(s >= r.lo && s <= r.hi)) continue;
        auto b = std::size_t((s - r.lo) / (r.hi - r.lo) * double(bins));
        counts[std::min(b, bins - 1)] += 1.0;
    }
    const double mx = std::max(1.0, *std::max_element(counts.begin(), counts.end()));
    const double cell = len / double(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        const double d = counts[b] / mx * depth;
        if (vertical_axis)  // bars grow rightwards along a vertical data axis (bottom = lo)
            svg.rect(x, y + len - cell * double(b + 1), d, cell, "#888", "white");
        else  // bars grow upwards along a horizontal data axis
            svg.rect(x + cell * double(b), y + depth - d, cell, d, "#888", "white");
    }
}

// Predicted vs observed with marginal histograms and the identity line.
inline Svg scatter_plot(const std::vector<double>& observed, const std::vector<double>& predicted,
                        const std::string& title) {
    std::vector<double> all = observed;
    all.insert(all.end(), predicted.begin(), predicted.end());
    const Range r = data_range(all);
    Svg svg(520, 520);
    svg.text(260, 20, title, 14, "middle");
    Frame f(svg, 70, 110, 340, 340, r, r);
    histogram_bars(svg, observed, r, 25, 70, 35, 340, 70, false);
    histogram_bars(svg, predicted, r, 25, 415, 110, 340, 70, true);
    f.draw_axes("observed SDOCT RNFL (um)", "predicted RNFL (um)");
    svg.line(f.px(r.lo), f.py(r.lo), f.px(r.hi), f.py(r.hi), "#aaa", 1.0, "4 3");
    f.points(observed, predicted, palette()[0]);
    return svg;
}

inline Svg bland_altman_plot(const std::vector<double>& observed, const std::vector<double>& predicted,
                             const BlandAltman& ba, const std::string& title) {
    std::vector<double> mean(observed.size()), diff(observed.size());
    for (std::size_t i = 0; i < observed.size(); ++i) {
        mean[i] = 0.5 * (observed[i] + predicted[i]);
        diff[i] = predicted[i] - observed[i];
    }
    std::vector<double> ys = diff;
    ys.push_back(ba.loa_low);
    ys.push_back(ba.loa_high);
    Svg svg(520, 420);
    svg.text(260, 20, title, 14, "middle");
    Frame f(svg, 70, 40, 400, 320, data_range(mean), data_range(ys, 0.1));
    f.draw_axes("mean of predicted and observed (um)", "predicted - observed (um)");
    f.points(mean, diff, palette()[0]);
    f.hline(ba.bias, "#333");
    f.hline(ba.loa_low, palette()[1], "6 3");
    f.hline(ba.loa_high, palette()[1], "6 3");
    svg.text(465, f.py(ba.bias) - 4, fmt::format("bias {:.2f}", ba.bias), 10, "end");
    svg.text(465, f.py(ba.loa_high) - 4, fmt::format("+1.96 SD {:.2f}", ba.loa_high), 10, "end");
    svg.text(465, f.py(ba.loa_low) + 12, fmt::format("-1.96 SD {:.2f}", ba.loa_low), 10, "end");
    return svg;
}

struct ViolinGroup {
    std::string label;
    std::vector<double> values;
};

// Side-by-side violins (Gaussian KDE, Silverman bandwidth) with the median marked.
inline Svg violin_plot(const std::vector<ViolinGroup>& groups, const std::string& ylabel, const std::string& title) {
    std::vector<double> all;
    for (const auto& g : groups) all.insert(all.end(), g.values.begin(), g.values.end());
    const Range r = data_range(all, 0.1);
    const double width = 120.0 * double(std::max<std::size_t>(1, groups.size())) + 100.0;
    Svg svg(width, 420);
    svg.text(width / 2, 20, title, 14, "middle");
    Frame f(svg, 70, 40, width - 100, 320, {0.0, double(groups.size())}, r);
    f.draw_axes("", ylabel, false);
    std::vector<double> grid;
    for (int i = 0; i <= 120; ++i) grid.push_back(r.lo + (r.hi - r.lo) * i / 120.0);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        const double cx = f.px(double(gi) + 0.5);
        svg.text(cx, 360 + 18, fmt::format("{} (n={})", g.label, g.values.size()), 11, "middle");
        if (g.values.size() < 2) continue;
        const auto dens = gaussian_kde(g.values, grid, silverman_bandwidth(g.values));
        const double mx = *std::max_element(dens.begin(), dens.end());
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < grid.size(); ++i) pts.emplace_back(cx + 50.0 * dens[i] / mx, f.py(grid[i]));
        for (std::size_t i = grid.size(); i-- > 0;) pts.emplace_back(cx - 50.0 * dens[i] / mx, f.py(grid[i]));
        svg.polygon(pts, palette()[gi % palette().size()], 0.45, "#333");
        const double med = quantile(g.values, 0.5);
        svg.line(cx - 20, f.py(med), cx + 20, f.py(med), "#000", 2.0);
    }
    return svg;
}

struct LowessSeries {
    std::string label;
    std::vector<double> x, y;
    LowessCurve curve;
};

inline Svg lowess_plot(const std::vector<LowessSeries>& series, const std::string& xlabel, const std::string& ylabel,
                       const std::string& title) {
    std::vector<double> xs, ys;
    for (const auto& s : series) {
        xs.insert(xs.end(), s.x.begin(), s.x.end());
        ys.insert(ys.end(), s.y.begin(), s.y.end());
    }
    Svg svg(520, 420);
    svg.text(260, 20, title, 14, "middle");
    Frame f(svg, 70, 40, 400, 320, data_range(xs), data_range(ys));
    f.draw_axes(xlabel, ylabel);
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& col = palette()[i % palette().size()];
        f.points(series[i].x, series[i].y, col, 1.8, 0.35);
        f.curve(series[i].curve.x, series[i].curve.fit, col, 2.5);
        svg.line(90, 55 + 16 * double(i), 110, 55 + 16 * double(i), col, 2.5);
        svg.text(115, 59 + 16 * double(i), series[i].label, 10);
    }
    return svg;
}

struct SheetItem {
    Image image;
    std::vector<std::string> caption;
};

// Grid of images with caption lines above each one.
inline Svg image_sheet(const std::vector<SheetItem>& items, const std::string& title, std::size_t columns = 5,
                       double cell = 160.0) {
    const std::size_t rows = (items.size() + columns - 1) / columns;
    const double caption_h = 44.0;
    Svg svg(double(columns) * (cell + 10) + 10, 40 + double(rows) * (cell + caption_h + 10) + 10);
    svg.text(10, 24, title, 14);
    if (items.empty()) svg.text(10, 60, "(no examples)", 12);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const double x = 10 + double(i % columns) * (cell + 10);
        const double y = 40 + double(i / columns) * (cell + caption_h + 10);
        for (std::size_t k = 0; k < items[i].caption.size(); ++k)
            svg.text(x, y + 12 + 13 * double(k), items[i].caption[k], 10);
        const auto& im = items[i].image;
        const double scale = cell / double(std::max(im.width, im.height));
        svg.image(x, y + caption_h, double(im.width) * scale, double(im.height) * scale, image_data_uri(im));
    }
    return svg;
}

}  // namespace rnfl
