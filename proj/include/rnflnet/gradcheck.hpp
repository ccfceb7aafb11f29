#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "rnflnet/rng.hpp"
#include "rnflnet/tensor.hpp"

namespace rnfl {

struct GradCheckOptions {
    std::uint64_t seed = 0;
    double input_scale = 1.0;
    // Inputs closer than this to zero are pushed away from it, keeping
    // ReLU-like kinks out of the finite-difference stencil. 0 disables.
    double nudge_from_zero = 0.0;
};

// Builds a scalar loss from freshly created input tensors.
using GraphBuilder = std::function<Tensor(const std::vector<Tensor>&)>;

// Central-difference check of every input element of `build`. Inputs are
// drawn uniformly from [-scale, scale]. Returns the maximum relative error
// |a - n| / max(1e-8, |a| + |n|) over all elements.
inline double grad_check(const GraphBuilder& build, const std::vector<Shape>& input_shapes, double eps,
                         const GradCheckOptions& opt = {}) {
    if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be > 0");
    Rng rng = keyed_rng(opt.seed, {0x67726164ULL});
    std::vector<Tensor> inputs;
    for (const auto& s : input_shapes) {
        Tensor t(s);
        for (auto& v : t.values()) {
            v = uniform(rng, -opt.input_scale, opt.input_scale);
            if (opt.nudge_from_zero > 0.0 && std::abs(v) < opt.nudge_from_zero)
                v = v < 0.0 ? -opt.nudge_from_zero : opt.nudge_from_zero;
        }
        t.set_requires_grad(true);
        inputs.push_back(t);
    }

    Tensor loss = build(inputs);
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        if (t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(t.numel(), 0.0);
    }

    auto eval = [&](const std::vector<Tensor>& xs) {
        NoGradGuard ng;
        const double v = build(xs).item();
        if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite loss under perturbation");
        return v;
    };

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        // perturb a detached copy so the recorded graph stays untouched
        std::vector<Tensor> probe;
        for (auto& t : inputs) probe.push_back(t.detach());
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            const double orig = probe[k][i];
            probe[k][i] = orig + eps;
            const double up = eval(probe);
            probe[k][i] = orig - eps;
            const double down = eval(probe);
            probe[k][i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            if (!std::isfinite(a) || !std::isfinite(numeric))
                throw NonFiniteError("grad_check: non-finite gradient");
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace rnfl
