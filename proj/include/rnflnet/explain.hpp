#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "rnflnet/error.hpp"
#include "rnflnet/image.hpp"
#include "rnflnet/ops.hpp"
#include "rnflnet/resnet.hpp"

namespace rnfl {

enum class CamTarget { regression, abnormality };

inline std::string to_string(CamTarget t) { return t == CamTarget::regression ? "regression" : "abnormality"; }

inline CamTarget parse_cam_target(const std::string& s) {
    if (s == "regression") return CamTarget::regression;
    if (s == "abnormality") return CamTarget::abnormality;
    throw ConfigError("unknown Grad-CAM target '" + s + "' (expected regression or abnormality)");
}

// Heatmap with values in [0,1], row-major.
struct Heatmap {
    std::size_t width = 0, height = 0;
    std::vector<double> values;

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

// Grad-CAM from activations A and gradients dY/dA, both [K,h,w]:
// alpha_k = mean over positions of the gradient, map = relu(sum_k alpha_k A_k),
// scaled so its maximum is 1. An all-zero map stays zero.
inline Heatmap gradcam_map(const Tensor& activations, const Tensor& gradients) {
    if (activations.rank() != 3 || activations.shape() != gradients.shape())
        throw ShapeError("gradcam_map expects matching [K,h,w] activations and gradients");
    const std::size_t k = activations.dim(0), h = activations.dim(1), w = activations.dim(2), hw = h * w;
    Heatmap m{w, h, std::vector<double>(hw, 0.0)};
    for (std::size_t c = 0; c < k; ++c) {
        double alpha = 0.0;
        for (std::size_t i = 0; i < hw; ++i) alpha += gradients[c * hw + i];
        alpha /= double(hw);
        for (std::size_t i = 0; i < hw; ++i) m.values[i] += alpha * activations[c * hw + i];
    }
    double mx = 0.0;
    for (double& v : m.values) {
        v = std::max(v, 0.0);
        mx = std::max(mx, v);
    }
    if (mx > 0.0)
        for (double& v : m.values) v /= mx;
    return m;
}

// Bilinear resampling with half-pixel centres and edge clamping, rescaled so
// the maximum is 1 again.
inline Heatmap upsample(const Heatmap& m, std::size_t width, std::size_t height) {
    Heatmap out{width, height, std::vector<double>(width * height, 0.0)};
    const double sx = double(m.width) / double(width), sy = double(m.height) / double(height);
    double mx = 0.0;
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(m.width - 1));
            const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(m.height - 1));
            const auto x0 = std::size_t(fx), y0 = std::size_t(fy);
            const std::size_t x1 = std::min(x0 + 1, m.width - 1), y1 = std::min(y0 + 1, m.height - 1);
            const double tx = fx - double(x0), ty = fy - double(y0);
            const double v = (1 - ty) * ((1 - tx) * m.at(y0, x0) + tx * m.at(y0, x1)) +
                             ty * ((1 - tx) * m.at(y1, x0) + tx * m.at(y1, x1));
            out.values[y * width + x] = v;
            mx = std::max(mx, v);
        }
    if (mx > 0.0)
        for (double& v : out.values) v /= mx;
    return out;
}

// Grad-CAM at the output of the last residual block, one heatmap per view,
// at input resolution. The model is not modified.
inline std::vector<Heatmap> gradcam(const Model& model, const std::vector<Image>& views, CamTarget target) {
    if (target == CamTarget::abnormality && !model.config().has_classification())
        throw ConfigError("checkpoint has no classification head; Grad-CAM target 'abnormality' is unavailable");
    if (target == CamTarget::regression && !model.config().has_regression())
        throw ConfigError("checkpoint has no regression head; Grad-CAM target 'regression' is unavailable");
    Model m = model.clone();
    m.set_trainable({});
    const auto& cfg = m.config();
    std::vector<Heatmap> out;
    for (const auto& img : views) {
        if (img.channels != cfg.in_channels || img.width != cfg.input_size || img.height != cfg.input_size)
            throw ShapeError("Grad-CAM input does not match the model input size");
        Tensor x(Shape{1, img.channels, img.height, img.width}, img.pixels);
        x.set_requires_grad(true);
        const auto fwd = m.forward(x, BnMode::eval);
        backward(sum(target == CamTarget::regression ? fwd.regression : fwd.logit));
        const auto& f = fwd.features;
        Tensor a(Shape{f.dim(1), f.dim(2), f.dim(3)}, f.values());
        Tensor g(Shape{f.dim(1), f.dim(2), f.dim(3)},
                 f.has_grad() ? std::vector<double>(f.grad().begin(), f.grad().end())
                              : std::vector<double>(f.numel(), 0.0));
        out.push_back(upsample(gradcam_map(a, g), img.width, img.height));
    }
    return out;
}

// Fraction of heatmap mass whose pixel centres lie within `radius` of (cx, cy).
inline double mass_within(const Heatmap& h, double cx, double cy, double radius) {
    double inside = 0.0, total = 0.0;
    for (std::size_t y = 0; y < h.height; ++y)
        for (std::size_t x = 0; x < h.width; ++x) {
            const double v = h.at(y, x);
            total += v;
            if (std::hypot(double(x) + 0.5 - cx, double(y) + 0.5 - cy) <= radius) inside += v;
        }
    return total > 0.0 ? inside / total : 0.0;
}

// Blue -> cyan -> green -> yellow -> red ramp.
inline std::array<double, 3> heat_color(double v) {
    static constexpr std::array<std::array<double, 3>, 5> stops{
        {{0, 0, 1}, {0, 1, 1}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}}};
    v = std::clamp(v, 0.0, 1.0) * 4.0;
    const auto i = std::min<std::size_t>(3, std::size_t(v));
    const double t = v - double(i);
    std::array<double, 3> c{};
    for (int k = 0; k < 3; ++k) c[k] = (1 - t) * stops[i][k] + t * stops[i + 1][k];
    return c;
}

inline Image heatmap_image(const Heatmap& h) {
    Image img(h.width, h.height, 1);
    img.pixels = h.values;
    return img;
}

inline Image colorize(const Heatmap& h) {
    Image img(h.width, h.height, 3);
    for (std::size_t y = 0; y < h.height; ++y)
        for (std::size_t x = 0; x < h.width; ++x) {
            const auto c = heat_color(h.at(y, x));
            for (std::size_t k = 0; k < 3; ++k) img.at(k, y, x) = c[k];
        }
    return img;
}

// Alpha blend of the colorized heatmap over the photograph (gray or RGB).
inline Image overlay(const Image& photo, const Heatmap& h, double alpha = 0.45) {
    if (photo.width != h.width || photo.height != h.height) throw ShapeError("overlay size mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("overlay alpha must lie in [0, 1]");
    const Image rgb = convert_channels(photo, 3);
    const Image heat = colorize(h);
    Image out(h.width, h.height, 3);
    for (std::size_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = (1.0 - alpha) * rgb.pixels[i] + alpha * heat.pixels[i];
    return out;
}

}  // namespace rnfl
