#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "rnflnet/error.hpp"
#include "rnflnet/resnet.hpp"

namespace rnfl {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // L2 term added to the gradient

    void validate() const {
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
    }
};

struct AdamState {
    AdamConfig config;
    std::size_t t = 0;
    // moment buffers keyed by parameter name, shaped like the parameter
    std::map<std::string, std::vector<double>> m, v;

    AdamState() = default;
    explicit AdamState(AdamConfig c) : config(c) { config.validate(); }

    void reset() {
        t = 0;
        m.clear();
        v.clear();
    }
};

// Layer-group name -> learning-rate multiplier; groups not listed get 1.
using GroupMultipliers = std::map<std::string, double>;

inline double multiplier_for(const GroupMultipliers& mult, const std::string& group) {
    auto it = mult.find(group);
    return it == mult.end() ? 1.0 : it->second;
}

// One Adam update over the given parameters. Parameters that do not require
// grad are skipped; a trainable parameter without an accumulated gradient is
// treated as having zero gradient. The step is validated before anything is
// mutated, so a non-finite gradient leaves parameters and state untouched.
inline void adam_step(const std::vector<TensorSlot>& params, double base_lr, AdamState& state,
                      const GroupMultipliers& multipliers = {}) {
    if (!std::isfinite(base_lr) || base_lr < 0.0) throw ConfigError("learning rate must be finite and >= 0");
    for (const auto& [group, k] : multipliers)
        if (!std::isfinite(k) || k < 0.0) throw ConfigError("multiplier for group '" + group + "' must be >= 0");
    for (const auto& p : params) {
        if (!p.is_parameter || !p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad())
            if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in " + p.name);
    }

    const auto& c = state.config;
    state.t += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(c.beta2, double(state.t));
    for (auto p : params) {
        if (!p.is_parameter || !p.tensor.requires_grad()) continue;
        const double lr = base_lr * multiplier_for(multipliers, p.group);
        auto& m = state.m[p.name];
        auto& v = state.v[p.name];
        const std::size_t n = p.tensor.numel();
        m.resize(n, 0.0);
        v.resize(n, 0.0);
        const bool has = p.tensor.has_grad();
        auto w = p.tensor.data();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = (has ? p.tensor.grad()[i] : 0.0) + c.weight_decay * w[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            const double mh = m[i] / bc1, vh = v[i] / bc2;
            w[i] -= lr * mh / (std::sqrt(vh) + c.eps);
        }
    }
}

inline void adam_step(Model& model, double base_lr, AdamState& state, const GroupMultipliers& multipliers = {}) {
    adam_step(model.parameters(), base_lr, state, multipliers);
}

// ---------------------------------------------------------------------------
// SGDR: cosine annealing with warm restarts

inline double sgdr_lr(std::size_t step_in_cycle, std::size_t cycle_len, double eta_min, double eta_max) {
    if (cycle_len == 0) throw ConfigError("SGDR cycle length must be at least 1");
    if (step_in_cycle > cycle_len) throw ConfigError("SGDR step lies outside the cycle");
    const double frac = double(step_in_cycle) / double(cycle_len);
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

struct SgdrSchedule {
    double eta_min = 0.0;
    double eta_max = 1e-3;
    std::size_t t0 = 1;      // first cycle length, in steps
    std::size_t t_mult = 2;  // cycle growth factor at each restart

    void validate() const {
        if (!(eta_min >= 0.0 && eta_min < eta_max)) throw ConfigError("SGDR needs 0 <= eta_min < eta_max");
        if (t0 < 1) throw ConfigError("SGDR T_0 must be at least 1");
        if (t_mult < 1) throw ConfigError("SGDR T_mult must be at least 1");
    }

    struct Position {
        std::size_t cycle, step_in_cycle, cycle_len;
    };

    // Locates a global step: the counter resets at each restart and the
    // cycle length multiplies by t_mult.
    Position locate(std::size_t step) const {
        validate();
        std::size_t cycle = 0, len = t0;
        while (step >= len) {
            step -= len;
            len *= t_mult;
            ++cycle;
        }
        return {cycle, step, len};
    }

    double lr(std::size_t step) const {
        const auto p = locate(step);
        return sgdr_lr(p.step_in_cycle, p.cycle_len, eta_min, eta_max);
    }
};

// ---------------------------------------------------------------------------
// Learning-rate range test

struct LrRangeOptions {
    double smoothing = 0.98;    // exponential smoothing factor of the loss
    double stop_factor = 4.0;   // stop once smoothed loss exceeds this multiple of the best
    double suggest_divisor = 10.0;
};

struct LrRangePoint {
    double lr, loss, smoothed_loss;
};

struct LrRangeResult {
    std::vector<LrRangePoint> table;
    double suggested_lr = 0.0;
    bool stopped_early = false;
};

inline double lr_range_lr(std::size_t k, double lr_lo, double lr_hi, std::size_t n_steps) {
    return lr_lo * std::pow(lr_hi / lr_lo, double(k) / double(n_steps - 1));
}

// Runs `step(lr) -> loss` for geometrically increasing learning rates. The
// callable performs one optimization step at the given rate and returns the
// minibatch loss measured before that step. Suggested LR is the rate at the
// steepest descent of the smoothed loss (per log-LR step), divided by 10; if
// the smoothed loss never falls, the rate at its minimum is used instead.
template <class StepFn>
LrRangeResult lr_range_test(StepFn&& step, double lr_lo, double lr_hi, std::size_t n_steps,
                            const LrRangeOptions& opt = {}) {
    if (n_steps < 10) throw ConfigError("LR range test needs at least 10 steps");
    if (!(lr_lo > 0.0 && lr_lo < lr_hi) || !std::isfinite(lr_hi))
        throw ConfigError("LR range test needs 0 < lr_lo < lr_hi");
    LrRangeResult out;
    double avg = 0.0, best = 0.0;
    for (std::size_t k = 0; k < n_steps; ++k) {
        const double lr = lr_range_lr(k, lr_lo, lr_hi, n_steps);
        double loss;
        try {
            loss = step(lr);
        } catch (const NonFiniteError&) {
            if (k == 0) throw NonFiniteError("LR range test diverged at the lowest learning rate");
            out.stopped_early = true;
            break;
        }
        if (!std::isfinite(loss)) {
            if (k == 0) throw NonFiniteError("LR range test diverged at the lowest learning rate");
            out.stopped_early = true;
            break;
        }
        avg = opt.smoothing * avg + (1.0 - opt.smoothing) * loss;
        const double smoothed = avg / (1.0 - std::pow(opt.smoothing, double(k + 1)));
        out.table.push_back({lr, loss, smoothed});
        if (k == 0 || smoothed < best) best = smoothed;
        if (k > 0 && smoothed > opt.stop_factor * best) {
            out.stopped_early = true;
            break;
        }
    }

    const auto& t = out.table;
    std::optional<std::size_t> steepest;
    double steepest_slope = 0.0;
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        // central differences inside, one-sided at the first point
        const double slope = i == 0 ? t[1].smoothed_loss - t[0].smoothed_loss
                                    : 0.5 * (t[i + 1].smoothed_loss - t[i - 1].smoothed_loss);
        if (slope < steepest_slope) {
            steepest_slope = slope;
            steepest = i;
        }
    }
    if (!steepest) {
        std::size_t imin = 0;
        for (std::size_t i = 1; i < t.size(); ++i)
            if (t[i].smoothed_loss < t[imin].smoothed_loss) imin = i;
        steepest = imin;
    }
    out.suggested_lr = t[*steepest].lr / opt.suggest_divisor;
    return out;
}

}  // namespace rnfl
