#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "rnflnet/dataset.hpp"
#include "rnflnet/error.hpp"
#include "rnflnet/ops.hpp"
#include "rnflnet/optim.hpp"
#include "rnflnet/resnet.hpp"
#include "rnflnet/rng.hpp"

namespace rnfl {

struct TrainConfig {
    std::size_t epochs_a = 3;   // phase A: last stage and heads
    std::size_t epochs_b = 31;  // phase B: everything, differential LRs (five SGDR cycles)
    std::size_t batch_size = 64;
    double lr = 3e-3;           // SGDR eta_max
    double lr_min = 0.0;        // SGDR eta_min
    std::size_t t0_epochs = 1;  // first SGDR cycle, in epochs
    std::size_t t_mult = 2;
    // multipliers for the input-side, middle and output-side group triples
    std::array<double, 3> multipliers{1.0 / 9.0, 1.0 / 3.0, 1.0};
    AdamConfig adam;
    bool augment = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
        if (!(lr > 0.0) || !(lr_min >= 0.0 && lr_min < lr)) throw ConfigError("need 0 <= lr_min < lr");
        if (t0_epochs < 1 || t_mult < 1) throw ConfigError("SGDR T_0 and T_mult must be at least 1");
        for (double m : multipliers)
            if (!(m > 0.0) || !std::isfinite(m)) throw ConfigError("LR multipliers must be positive");
        adam.validate();
    }
};

// Layer groups split into input-side, middle and output-side triples. The
// last stage joins the heads, the first (s-1)/3 stages join the stem, and the
// remaining stages form the middle: stem | stage_1 | stage_2 + heads for two
// stages, stem + stage_1 | stage_2, stage_3 | stage_4 + heads for four.
inline std::array<std::vector<std::string>, 3> group_triples(const Model& model) {
    const std::size_t s = model.config().stages();
    const std::size_t n_low = (s - 1) / 3;
    std::array<std::vector<std::string>, 3> out;
    out[0].push_back("stem");
    for (std::size_t i = 1; i <= s; ++i) {
        const std::size_t k = i == s ? 2 : (i <= n_low ? 0 : 1);
        out[k].push_back("stage_" + std::to_string(i));
    }
    for (const auto& g : model.group_names())
        if (g.rfind("head_", 0) == 0) out[2].push_back(g);
    return out;
}

inline GroupMultipliers differential_multipliers(const Model& model, const std::array<double, 3>& m) {
    GroupMultipliers out;
    const auto triples = group_triples(model);
    for (std::size_t k = 0; k < 3; ++k)
        for (const auto& g : triples[k]) out[g] = m[k];
    return out;
}

// "Last two layers": the last residual stage plus the heads.
inline std::set<std::string> phase_a_groups(const Model& model) {
    std::set<std::string> out{"stage_" + std::to_string(model.config().stages())};
    for (const auto& g : model.group_names())
        if (g.rfind("head_", 0) == 0) out.insert(g);
    return out;
}

// ---------------------------------------------------------------------------
// Loss

struct BatchTargets {
    Tensor z;         // [N,1] z-scored thickness (regression head)
    Tensor abnormal;  // [N,1] 0/1 labels (classification head)
};

inline BatchTargets make_targets(const Model& model, const std::vector<SamplePair>& samples,
                                 const std::vector<std::size_t>& idx) {
    BatchTargets t;
    const auto& cfg = model.config();
    if (cfg.has_regression()) {
        t.z = Tensor::zeros({idx.size(), 1});
        for (std::size_t i = 0; i < idx.size(); ++i)
            t.z[i] = (samples[idx[i]].target_um - model.target_mean) / model.target_sd;
    }
    if (cfg.has_classification()) {
        t.abnormal = Tensor::zeros({idx.size(), 1});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto& nc = samples[idx[i]].normative_class;
            if (!nc) throw ConfigError("classification head needs a normative_class for every training row");
            t.abnormal[i] = is_abnormal(*nc) ? 1.0 : 0.0;
        }
    }
    return t;
}

// MSE on z-scored targets plus BCE on the abnormality logit, for whichever
// heads the model has.
inline Tensor model_loss(const ForwardResult& out, const BatchTargets& t) {
    Tensor loss;
    if (out.regression.defined()) loss = mse_loss(out.regression, t.z);
    if (out.logit.defined()) {
        Tensor b = bce_loss(out.logit, t.abnormal);
        loss = loss.defined() ? add(loss, b) : b;
    }
    return loss;
}

// One forward/backward/Adam step on a prepared batch; returns the loss
// before the update.
inline double train_step(Model& model, const Tensor& batch, const BatchTargets& targets, double lr,
                         AdamState& state, const GroupMultipliers& multipliers = {}) {
    model.zero_grad();
    Tensor loss = model_loss(model.forward(batch, BnMode::train), targets);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NonFiniteError("training loss is not finite");
    backward(loss);
    adam_step(model, lr, state, multipliers);
    return value;
}

// ---------------------------------------------------------------------------
// Training

struct HistoryRow {
    std::size_t epoch;
    char phase;
    double lr;
    double train_loss;
    double valid_loss;
    double valid_mae;
};

struct TrainResult {
    Model best;
    std::vector<HistoryRow> history;
    std::size_t best_epoch = 0;  // 0 = initialization
};

struct Evaluation {
    double loss = std::numeric_limits<double>::quiet_NaN();
    double mae = std::numeric_limits<double>::quiet_NaN();
};

// Eval-mode loss and MAE (um) over a dataset, in fixed-size chunks.
inline Evaluation evaluate_loss(const Model& model, const std::vector<SamplePair>& samples,
                                std::size_t chunk = 64) {
    Evaluation e;
    if (samples.empty()) return e;
    NoGradGuard guard;
    double loss_sum = 0.0, abs_sum = 0.0;
    for (std::size_t lo = 0; lo < samples.size(); lo += chunk) {
        std::vector<std::size_t> idx(std::min(chunk, samples.size() - lo));
        std::iota(idx.begin(), idx.end(), lo);
        const Tensor batch = make_batch(samples, idx);
        const auto out = model.forward(batch, BnMode::eval);
        const auto t = make_targets(model, samples, idx);
        loss_sum += model_loss(out, t).item() * double(idx.size());
        if (out.regression.defined())
            for (std::size_t i = 0; i < idx.size(); ++i)
                abs_sum += std::abs(model.target_mean + model.target_sd * out.regression[i] -
                                    samples[idx[i]].target_um);
    }
    e.loss = loss_sum / double(samples.size());
    if (model.config().has_regression()) e.mae = abs_sum / double(samples.size());
    return e;
}

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = keyed_rng(seed, {0x73687566ULL, epoch});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t lo = 0; lo < n; lo += batch_size)
        out.emplace_back(order.begin() + std::ptrdiff_t(lo), order.begin() + std::ptrdiff_t(std::min(n, lo + batch_size)));
    // batch-norm statistics need more than one sample
    if (out.size() >= 2 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back()[0]);
        out.pop_back();
    }
    return out;
}

// Sets target normalization from the training targets.
inline void fit_target_scaling(Model& model, const std::vector<SamplePair>& train) {
    if (train.empty()) throw ConfigError("training set is empty");
    double s = 0.0;
    for (const auto& x : train) s += x.target_um;
    const double mean = s / double(train.size());
    double ss = 0.0;
    for (const auto& x : train) ss += (x.target_um - mean) * (x.target_um - mean);
    const double sd = train.size() > 1 ? std::sqrt(ss / double(train.size() - 1)) : 0.0;
    model.target_mean = mean;
    model.target_sd = sd > 0.0 ? sd : 1.0;
}

// Two-phase regimen. Phase A trains the last stage and heads; phase B trains
// every group with differential learning rates. Each phase runs its own SGDR
// schedule from a fresh Adam state. The model with the lowest validation loss
// (initialization included) is returned; `initial` is not modified.
template <class Progress>
TrainResult train(const Model& initial, const std::vector<SamplePair>& train_set,
                  const std::vector<SamplePair>& valid_set, const TrainConfig& cfg, Progress&& progress) {
    cfg.validate();
    if (train_set.empty()) throw ConfigError("training set is empty");
    if (valid_set.empty()) throw ConfigError("validation set is empty");
    Model model = initial.clone();
    fit_target_scaling(model, train_set);

    TrainResult result;
    auto score = [](const Evaluation& e) { return e.loss; };
    Evaluation best_eval = evaluate_loss(model, valid_set);
    result.best = model.clone();

    const std::size_t n_batches = epoch_batches(train_set.size(), cfg.batch_size, cfg.seed, 0).size();
    std::size_t epoch = 0;
    for (char phase : {'A', 'B'}) {
        const std::size_t epochs = phase == 'A' ? cfg.epochs_a : cfg.epochs_b;
        if (epochs == 0) continue;
        GroupMultipliers mult;
        if (phase == 'A') {
            model.set_trainable(phase_a_groups(model));
        } else {
            model.set_all_trainable();
            mult = differential_multipliers(model, cfg.multipliers);
        }
        AdamState state(cfg.adam);
        SgdrSchedule sched{cfg.lr_min, cfg.lr, cfg.t0_epochs * n_batches, cfg.t_mult};
        std::size_t step = 0;
        for (std::size_t e = 0; e < epochs; ++e, ++epoch) {
            const double epoch_lr = sched.lr(step);
            double loss_sum = 0.0;
            std::size_t seen = 0;
            for (const auto& idx : epoch_batches(train_set.size(), cfg.batch_size, cfg.seed, epoch)) {
                const Tensor batch = make_batch(train_set, idx,
                                                cfg.augment ? std::optional<std::uint64_t>(cfg.seed) : std::nullopt,
                                                epoch);
                const auto targets = make_targets(model, train_set, idx);
                double loss;
                try {
                    loss = train_step(model, batch, targets, sched.lr(step), state, mult);
                } catch (const NonFiniteError& err) {
                    throw NonFiniteError(fmt::format("{} (phase {}, epoch {}, step {})", err.what(), phase,
                                                     epoch + 1, step));
                }
                loss_sum += loss * double(idx.size());
                seen += idx.size();
                ++step;
            }
            const Evaluation ev = evaluate_loss(model, valid_set);
            HistoryRow row{epoch + 1, phase, epoch_lr, loss_sum / double(seen), ev.loss, ev.mae};
            result.history.push_back(row);
            if (score(ev) < score(best_eval)) {
                best_eval = ev;
                result.best = model.clone();
                result.best_epoch = epoch + 1;
            }
            progress(row);
        }
    }
    result.best.set_all_trainable();
    return result;
}

inline TrainResult train(const Model& initial, const std::vector<SamplePair>& train_set,
                         const std::vector<SamplePair>& valid_set, const TrainConfig& cfg) {
    return train(initial, train_set, valid_set, cfg, [](const HistoryRow&) {});
}

inline void write_history(const std::vector<HistoryRow>& history, std::ostream& out) {
    out << "epoch,phase,lr,train_loss,valid_loss,valid_mae\n";
    for (const auto& h : history)
        out << fmt::format("{},{},{},{},{},{}\n", h.epoch, h.phase, h.lr, h.train_loss, h.valid_loss, h.valid_mae);
}

// LR range test on a throwaway copy of the model, cycling through shuffled
// training batches. The copy trains the phase A groups.
inline LrRangeResult lr_find(const Model& model, const std::vector<SamplePair>& train_set, const TrainConfig& cfg,
                             double lr_lo, double lr_hi, std::size_t n_steps) {
    if (train_set.empty()) throw ConfigError("training set is empty");
    Model m = model.clone();
    fit_target_scaling(m, train_set);
    m.set_trainable(phase_a_groups(m));
    AdamState state(cfg.adam);
    std::vector<std::vector<std::size_t>> batches;
    std::size_t epoch = 0, next = 0;
    return lr_range_test(
        [&](double lr) {
            if (next == batches.size()) {
                batches = epoch_batches(train_set.size(), cfg.batch_size, cfg.seed, epoch++);
                next = 0;
            }
            const auto& idx = batches[next++];
            const Tensor batch =
                make_batch(train_set, idx, cfg.augment ? std::optional<std::uint64_t>(cfg.seed) : std::nullopt, epoch);
            return train_step(m, batch, make_targets(m, train_set, idx), lr, state);
        },
        lr_lo, lr_hi, n_steps);
}

}  // namespace rnfl
