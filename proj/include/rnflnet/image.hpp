#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "rnflnet/error.hpp"
#include "rnflnet/rng.hpp"

namespace rnfl {

// Planar (channel-major) image with values nominally in [0,1].
struct Image {
    std::size_t width = 0, height = 0, channels = 1;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::size_t c = 1, double fill = 0.0)
        : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

    bool operator==(const Image&) const = default;
};

// ---------------------------------------------------------------------------
// Binary PNM (P5 grayscale, P6 RGB), maxval up to 65535.

namespace detail {

inline std::size_t pnm_read_uint(std::istream& in, const std::string& path) {
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    if (ch == EOF || !std::isdigit(ch)) throw FormatError("malformed PNM header in " + path);
    std::size_t v = 0;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + std::size_t(ch - '0');
        ch = in.get();
    }
    // exactly one whitespace byte separates the header from the raster
    return v;
}

}  // namespace detail

inline Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open image " + path.string());
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
        throw FormatError("undecodable image (expected binary PGM/PPM): " + path.string());
    const std::size_t channels = magic[1] == '5' ? 1 : 3;
    const std::size_t w = detail::pnm_read_uint(in, path.string());
    const std::size_t h = detail::pnm_read_uint(in, path.string());
    const std::size_t maxval = detail::pnm_read_uint(in, path.string());
    if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError("bad PNM dimensions in " + path.string());
    const std::size_t bps = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(w * h * channels * bps);
    in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (in.gcount() != std::streamsize(raw.size())) throw FormatError("truncated PNM raster in " + path.string());
    Image img(w, h, channels);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < channels; ++c) {
                const std::size_t i = (y * w + x) * channels + c;
                const double v = bps == 1 ? raw[i] : double(raw[2 * i] << 8 | raw[2 * i + 1]);
                img.at(c, y, x) = v / double(maxval);
            }
    return img;
}

inline unsigned char quantize8(double v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Writes P5 for single-channel images and P6 for three-channel images.
inline void write_pnm(const Image& img, const std::filesystem::path& path) {
    if (img.channels != 1 && img.channels != 3) throw ShapeError("PNM output needs 1 or 3 channels");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write image " + path.string());
    out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.width * img.height * img.channels);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c)
                raw[(y * img.width + x) * img.channels + c] = quantize8(img.at(c, y, x));
    out.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
    if (!out) throw Error("failed writing image " + path.string());
}

// ---------------------------------------------------------------------------
// Preprocessing

// Area-averaging resample. Each output pixel is the exact mean of the input
// area it covers (separable box filter with fractional overlaps).
inline Image resize_area(const Image& src, std::size_t out_w, std::size_t out_h) {
    auto weights = [](std::size_t in, std::size_t out) {
        // row i: (first index, weights)
        std::vector<std::pair<std::size_t, std::vector<double>>> w(out);
        const double scale = double(in) / double(out);
        for (std::size_t i = 0; i < out; ++i) {
            const double lo = double(i) * scale, hi = double(i + 1) * scale;
            const auto first = std::size_t(std::floor(lo));
            const auto last = std::min(in - 1, std::size_t(std::ceil(hi)) - 1);
            std::vector<double> ws;
            for (std::size_t j = first; j <= last; ++j) {
                const double overlap = std::min(hi, double(j + 1)) - std::max(lo, double(j));
                ws.push_back(std::max(0.0, overlap) / scale);
            }
            w[i] = {first, std::move(ws)};
        }
        return w;
    };
    const auto wx = weights(src.width, out_w);
    const auto wy = weights(src.height, out_h);
    Image tmp(out_w, src.height, src.channels);
    for (std::size_t c = 0; c < src.channels; ++c)
        for (std::size_t y = 0; y < src.height; ++y)
            for (std::size_t x = 0; x < out_w; ++x) {
                double s = 0.0;
                const auto& [first, ws] = wx[x];
                for (std::size_t k = 0; k < ws.size(); ++k) s += ws[k] * src.at(c, y, first + k);
                tmp.at(c, y, x) = s;
            }
    Image out(out_w, out_h, src.channels);
    for (std::size_t c = 0; c < src.channels; ++c)
        for (std::size_t y = 0; y < out_h; ++y) {
            const auto& [first, ws] = wy[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                double s = 0.0;
                for (std::size_t k = 0; k < ws.size(); ++k) s += ws[k] * tmp.at(c, first + k, x);
                out.at(c, y, x) = std::clamp(s, 0.0, 1.0);
            }
        }
    return out;
}

inline Image crop_columns(const Image& src, std::size_t x0, std::size_t w) {
    Image out(w, src.height, src.channels);
    for (std::size_t c = 0; c < src.channels; ++c)
        for (std::size_t y = 0; y < src.height; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = src.at(c, y, x0 + x);
    return out;
}

enum class StereoMode {
    auto_detect,  // stereo iff width == 2 * height
    mono,
    stereo,
};

struct PreprocessConfig {
    std::size_t input_size = 64;
    StereoMode stereo = StereoMode::auto_detect;
    std::size_t channels = 1;  // 1: convert RGB to luminance; 3: replicate gray to RGB
};

inline Image convert_channels(const Image& src, std::size_t channels) {
    if (src.channels == channels) return src;
    Image out(src.width, src.height, channels);
    const std::size_t plane = src.width * src.height;
    if (channels == 1 && src.channels == 3) {
        for (std::size_t i = 0; i < plane; ++i)
            out.pixels[i] =
                0.299 * src.pixels[i] + 0.587 * src.pixels[plane + i] + 0.114 * src.pixels[2 * plane + i];
    } else if (channels == 3 && src.channels == 1) {
        for (std::size_t c = 0; c < 3; ++c) std::copy_n(src.pixels.begin(), plane, out.pixels.begin() + long(c * plane));
    } else {
        throw ShapeError("unsupported channel conversion " + std::to_string(src.channels) + " -> " +
                         std::to_string(channels));
    }
    return out;
}

// Split stereo frames at the horizontal midpoint, resize each view by area
// averaging to input_size^2 and return values in [0,1].
inline std::vector<Image> preprocess(const Image& frame, const PreprocessConfig& cfg) {
    bool stereo = cfg.stereo == StereoMode::stereo ||
                  (cfg.stereo == StereoMode::auto_detect && frame.width == 2 * frame.height);
    std::vector<Image> views;
    if (stereo) {
        if (frame.width % 2 != 0)
            throw ShapeError("stereo frame has odd width " + std::to_string(frame.width));
        const std::size_t half = frame.width / 2;
        views.push_back(crop_columns(frame, 0, half));
        views.push_back(crop_columns(frame, half, half));
    } else {
        views.push_back(frame);
    }
    for (auto& v : views) v = resize_area(convert_channels(v, cfg.channels), cfg.input_size, cfg.input_size);
    return views;
}

inline std::vector<Image> preprocess(const std::filesystem::path& path, const PreprocessConfig& cfg) {
    return preprocess(read_pnm(path), cfg);
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
    bool lighting = false;
    double brightness = 0.0;  // additive, U(-0.1, 0.1)
    double contrast = 1.0;    // scale about 0.5, U(0.9, 1.1)
    bool rotate = false;
    double angle_deg = 0.0;   // U(-10, 10)
    bool flip_h = false;
    bool flip_v = false;
};

inline AugmentParams draw_augment(Rng& rng) {
    AugmentParams p;
    p.lighting = coin(rng);
    p.brightness = uniform(rng, -0.1, 0.1);
    p.contrast = uniform(rng, 0.9, 1.1);
    p.rotate = coin(rng);
    p.angle_deg = uniform(rng, -10.0, 10.0);
    p.flip_h = coin(rng);
    p.flip_v = coin(rng);
    return p;
}

// Bilinear sample with edge clamping.
inline double sample_bilinear(const Image& img, std::size_t c, double x, double y) {
    x = std::clamp(x, 0.0, double(img.width - 1));
    y = std::clamp(y, 0.0, double(img.height - 1));
    const auto x0 = std::size_t(std::floor(x)), y0 = std::size_t(std::floor(y));
    const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
    const double fx = x - double(x0), fy = y - double(y0);
    const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
    const double bot = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
    return top * (1 - fy) + bot * fy;
}

inline Image rotate_image(const Image& src, double angle_deg) {
    const double t = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(t), sn = std::sin(t);
    const double cx = (double(src.width) - 1.0) / 2.0, cy = (double(src.height) - 1.0) / 2.0;
    Image out(src.width, src.height, src.channels);
    for (std::size_t y = 0; y < src.height; ++y)
        for (std::size_t x = 0; x < src.width; ++x) {
            // inverse mapping: source = R(-t) (p - c) + c
            const double dx = double(x) - cx, dy = double(y) - cy;
            const double sx = cs * dx + sn * dy + cx;
            const double sy = -sn * dx + cs * dy + cy;
            for (std::size_t c = 0; c < src.channels; ++c) out.at(c, y, x) = sample_bilinear(src, c, sx, sy);
        }
    return out;
}

inline Image flip_horizontal(const Image& src) {
    Image out(src.width, src.height, src.channels);
    for (std::size_t c = 0; c < src.channels; ++c)
        for (std::size_t y = 0; y < src.height; ++y)
            for (std::size_t x = 0; x < src.width; ++x) out.at(c, y, x) = src.at(c, y, src.width - 1 - x);
    return out;
}

inline Image flip_vertical(const Image& src) {
    Image out(src.width, src.height, src.channels);
    for (std::size_t c = 0; c < src.channels; ++c)
        for (std::size_t y = 0; y < src.height; ++y)
            for (std::size_t x = 0; x < src.width; ++x) out.at(c, y, x) = src.at(c, src.height - 1 - y, x);
    return out;
}

inline Image augment(const Image& img, const AugmentParams& p) {
    Image out = img;
    if (p.lighting)
        for (auto& v : out.pixels) v = (v - 0.5) * p.contrast + 0.5 + p.brightness;
    if (p.rotate) out = rotate_image(out, p.angle_deg);
    if (p.flip_h) out = flip_horizontal(out);
    if (p.flip_v) out = flip_vertical(out);
    for (auto& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
    return out;
}

inline Image augment(const Image& img, Rng& rng) { return augment(img, draw_augment(rng)); }

}  // namespace rnfl
