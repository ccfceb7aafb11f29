#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rnflnet/error.hpp"
#include "rnflnet/rng.hpp"

namespace rnfl {

namespace detail {

inline void require_paired(const std::vector<double>& a, const std::vector<double>& b, const char* what) {
    if (a.size() != b.size()) throw ShapeError(std::string(what) + ": inputs differ in length");
    if (a.empty()) throw ConfigError(std::string(what) + ": empty input");
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

}  // namespace detail

// Linear-interpolation quantile of a sorted sample (Hyndman-Fan type 7).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw ConfigError("quantile of an empty sample");
    const double h = (double(sorted.size()) - 1.0) * p;
    const auto lo = std::size_t(std::floor(h));
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + (h - double(lo)) * (sorted[lo + 1] - sorted[lo]);
}

inline double quantile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    return quantile_sorted(v, p);
}

// ---------------------------------------------------------------------------
// Agreement and correlation

inline double mae(const std::vector<double>& pred, const std::vector<double>& obs) {
    detail::require_paired(pred, obs, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - obs[i]);
    return s / double(pred.size());
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    detail::require_paired(x, y, "pearson");
    if (x.size() < 3) throw ConfigError("pearson needs at least 3 pairs");
    const double mx = detail::mean_of(x), my = detail::mean_of(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw ConfigError("correlation undefined for a constant vector");
    return sxy / std::sqrt(sxx * syy);
}

struct BlandAltman {
    double bias, sd, loa_low, loa_high;
};

inline BlandAltman bland_altman(const std::vector<double>& pred, const std::vector<double>& obs) {
    detail::require_paired(pred, obs, "bland_altman");
    if (pred.size() < 2) throw ConfigError("bland_altman needs at least 2 pairs");
    std::vector<double> d(pred.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = pred[i] - obs[i];
    const double bias = detail::mean_of(d);
    double ss = 0.0;
    for (double v : d) ss += (v - bias) * (v - bias);
    const double sd = std::sqrt(ss / double(d.size() - 1));
    return {bias, sd, bias - 1.96 * sd, bias + 1.96 * sd};
}

// ---------------------------------------------------------------------------
// ROC

enum class Direction { higher_is_disease, lower_is_disease };

struct RocPoint {
    double fpr, tpr, threshold;
};

struct RocResult {
    std::vector<RocPoint> points;
    double auc = 0.0;
    double ci_low = std::numeric_limits<double>::quiet_NaN();
    double ci_high = std::numeric_limits<double>::quiet_NaN();
    std::size_t n_boot = 0;
};

namespace detail {

inline void require_labels(const std::vector<double>& scores, const std::vector<int>& labels, const char* what) {
    if (scores.size() != labels.size()) throw ShapeError(std::string(what) + ": scores and labels differ in length");
    std::size_t cases = 0, controls = 0;
    for (int l : labels) {
        if (l == 1)
            ++cases;
        else if (l == 0)
            ++controls;
        else
            throw ConfigError(std::string(what) + ": labels must be 0 or 1");
    }
    if (cases == 0 || controls == 0) throw ConfigError(std::string(what) + ": both classes must be present");
}

// Disease-oriented score: larger always means more disease-like.
inline double oriented(double s, Direction d) { return d == Direction::higher_is_disease ? s : -s; }

}  // namespace detail

// Mann-Whitney AUC with half credit for ties, plus the empirical ROC curve
// over every distinct threshold. A sample is called positive when its score
// is at least as disease-like as the threshold.
inline RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& labels, Direction dir) {
    detail::require_labels(scores, labels, "roc_auc");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detail::oriented(scores[a], dir) > detail::oriented(scores[b], dir);
    });
    std::uint64_t n_case = 0, n_ctrl = 0;
    for (int l : labels) (l == 1 ? n_case : n_ctrl) += 1;

    RocResult r;
    r.points.push_back({0.0, 0.0, dir == Direction::higher_is_disease ? std::numeric_limits<double>::infinity()
                                                                      : -std::numeric_limits<double>::infinity()});
    // walk groups of tied scores from most to least disease-like
    std::uint64_t tp = 0, fp = 0, concordant = 0, ties = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::uint64_t g_case = 0, g_ctrl = 0;
        const double key = detail::oriented(scores[order[i]], dir);
        while (j < order.size() && detail::oriented(scores[order[j]], dir) == key) {
            (labels[order[j]] == 1 ? g_case : g_ctrl) += 1;
            ++j;
        }
        // cases in this group beat every control in later (less disease-like) groups
        concordant += g_case * (n_ctrl - fp - g_ctrl);
        ties += g_case * g_ctrl;
        tp += g_case;
        fp += g_ctrl;
        r.points.push_back({double(fp) / double(n_ctrl), double(tp) / double(n_case), scores[order[i]]});
        i = j;
    }
    r.auc = (double(concordant) + 0.5 * double(ties)) / (double(n_case) * double(n_ctrl));
    return r;
}

inline double auc_value(const std::vector<double>& scores, const std::vector<int>& labels, Direction dir) {
    return roc_auc(scores, labels, dir).auc;
}

// ---------------------------------------------------------------------------
// Participant-clustered bootstrap

struct BootstrapResult {
    double estimate = 0.0;
    double ci_low = 0.0, ci_high = 0.0;
    std::size_t n_boot = 0;       // replicates requested
    std::size_t n_valid = 0;      // replicates where the statistic was defined
    std::vector<double> replicates;
};

inline constexpr std::size_t kDefaultBootstrap = 2000;

// Groups row indices by cluster id, clusters ordered by id.
inline std::vector<std::vector<std::size_t>> cluster_rows(const std::vector<std::string>& cluster_ids) {
    std::map<std::string, std::vector<std::size_t>> by;
    for (std::size_t i = 0; i < cluster_ids.size(); ++i) by[cluster_ids[i]].push_back(i);
    std::vector<std::vector<std::size_t>> out;
    out.reserve(by.size());
    for (auto& [id, rows] : by) out.push_back(std::move(rows));
    return out;
}

// Resamples whole clusters with replacement. `stat` maps a list of row
// indices (with repeats) to a number; replicate b draws from a stream keyed
// by (seed, b), so replicates are independent of evaluation order.
// Replicates where the statistic is undefined (it throws or returns a
// non-finite value, e.g. a resample missing one class) are dropped.
template <class Stat>
BootstrapResult cluster_bootstrap(Stat&& stat, const std::vector<std::string>& cluster_ids, std::size_t B,
                                  std::uint64_t seed) {
    if (B < 100) throw ConfigError("bootstrap needs at least 100 replicates");
    const auto clusters = cluster_rows(cluster_ids);
    if (clusters.size() < 2) throw ConfigError("bootstrap needs at least 2 clusters");
    std::vector<std::size_t> all(cluster_ids.size());
    std::iota(all.begin(), all.end(), std::size_t{0});

    BootstrapResult r;
    r.estimate = stat(all);
    r.n_boot = B;
    std::uniform_int_distribution<std::size_t> pick(0, clusters.size() - 1);
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B; ++b) {
        Rng rng = keyed_rng(seed, {0x626f6f74ULL, b});
        rows.clear();
        for (std::size_t k = 0; k < clusters.size(); ++k) {
            const auto& c = clusters[pick(rng)];
            rows.insert(rows.end(), c.begin(), c.end());
        }
        double v;
        try {
            v = stat(rows);
        } catch (const Error&) {
            continue;
        }
        if (std::isfinite(v)) r.replicates.push_back(v);
    }
    r.n_valid = r.replicates.size();
    if (r.n_valid * 2 < B) throw BootstrapError("bootstrap statistic undefined in most resamples");
    std::vector<double> sorted = r.replicates;
    std::sort(sorted.begin(), sorted.end());
    r.ci_low = quantile_sorted(sorted, 0.025);
    r.ci_high = quantile_sorted(sorted, 0.975);
    return r;
}

// Two-sided bootstrap p-value for H0: difference = 0, with the +1 correction.
inline double bootstrap_p_value(const std::vector<double>& deltas) {
    if (deltas.empty()) throw ConfigError("p-value from an empty bootstrap");
    std::size_t le = 0, ge = 0;
    for (double d : deltas) {
        if (d <= 0.0) ++le;
        if (d >= 0.0) ++ge;
    }
    const double n1 = double(deltas.size()) + 1.0;
    return std::min(1.0, 2.0 * std::min((double(le) + 1.0) / n1, (double(ge) + 1.0) / n1));
}

namespace detail {

template <class T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& rows) {
    std::vector<T> out;
    out.reserve(rows.size());
    for (std::size_t i : rows) out.push_back(v[i]);
    return out;
}

}  // namespace detail

inline RocResult roc_auc_ci(const std::vector<double>& scores, const std::vector<int>& labels, Direction dir,
                            const std::vector<std::string>& cluster_ids, std::size_t B, std::uint64_t seed) {
    if (cluster_ids.size() != scores.size()) throw ShapeError("roc_auc: cluster ids differ in length");
    RocResult r = roc_auc(scores, labels, dir);
    auto boot = cluster_bootstrap(
        [&](const std::vector<std::size_t>& rows) {
            return auc_value(detail::gather(scores, rows), detail::gather(labels, rows), dir);
        },
        cluster_ids, B, seed);
    r.ci_low = boot.ci_low;
    r.ci_high = boot.ci_high;
    r.n_boot = B;
    return r;
}

struct AucComparison {
    double auc_a, auc_b, diff, ci_low, ci_high, p;
};

inline AucComparison compare_auc(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                                 const std::vector<int>& labels, Direction dir,
                                 const std::vector<std::string>& cluster_ids, std::size_t B, std::uint64_t seed) {
    if (scores_a.size() != scores_b.size() || scores_a.size() != labels.size() ||
        scores_a.size() != cluster_ids.size())
        throw ShapeError("compare_auc: inputs are not paired");
    const double a = auc_value(scores_a, labels, dir), b = auc_value(scores_b, labels, dir);
    auto boot = cluster_bootstrap(
        [&](const std::vector<std::size_t>& rows) {
            const auto l = detail::gather(labels, rows);
            return auc_value(detail::gather(scores_a, rows), l, dir) - auc_value(detail::gather(scores_b, rows), l, dir);
        },
        cluster_ids, B, seed);
    return {a, b, a - b, boot.ci_low, boot.ci_high, bootstrap_p_value(boot.replicates)};
}

// ---------------------------------------------------------------------------
// Sensitivity at fixed specificity

struct OperatingPoint {
    double threshold;  // positive when the score is at least this disease-like
    double sensitivity, specificity;
};

// Conservative rule: among thresholds whose specificity on the controls is at
// least `target`, take the one with the highest sensitivity.
inline OperatingPoint sensitivity_at_specificity(const std::vector<double>& scores, const std::vector<int>& labels,
                                                 Direction dir, double target) {
    detail::require_labels(scores, labels, "sens_at_spec");
    if (!(target > 0.0 && target <= 1.0)) throw ConfigError("specificity target must lie in (0, 1]");
    std::vector<double> cand;
    for (double s : scores) cand.push_back(detail::oriented(s, dir));
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    cand.push_back(std::numeric_limits<double>::infinity());  // nobody positive
    std::size_t n_case = 0, n_ctrl = 0;
    for (int l : labels) (l == 1 ? n_case : n_ctrl) += 1;
    // specificity rises with the threshold, so the first admissible one is the most sensitive
    for (double t : cand) {
        std::size_t tp = 0, tn = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const bool pos = detail::oriented(scores[i], dir) >= t;
            if (labels[i] == 1 && pos) ++tp;
            if (labels[i] == 0 && !pos) ++tn;
        }
        const double spec = double(tn) / double(n_ctrl);
        if (spec >= target)
            return {dir == Direction::higher_is_disease ? t : -t, double(tp) / double(n_case), spec};
    }
    throw Error("no threshold reaches the specificity target");  // unreachable: +inf has specificity 1
}

struct SensitivityResult {
    OperatingPoint point;
    double ci_low, ci_high;
};

inline SensitivityResult sens_at_spec(const std::vector<double>& scores, const std::vector<int>& labels, Direction dir,
                                      double target, const std::vector<std::string>& cluster_ids, std::size_t B,
                                      std::uint64_t seed) {
    if (cluster_ids.size() != scores.size()) throw ShapeError("sens_at_spec: cluster ids differ in length");
    auto point = sensitivity_at_specificity(scores, labels, dir, target);
    auto boot = cluster_bootstrap(
        [&](const std::vector<std::size_t>& rows) {
            return sensitivity_at_specificity(detail::gather(scores, rows), detail::gather(labels, rows), dir, target)
                .sensitivity;
        },
        cluster_ids, B, seed);
    return {point, boot.ci_low, boot.ci_high};
}

// ---------------------------------------------------------------------------
// LOWESS

struct LowessCurve {
    std::vector<double> x, fit;  // x sorted ascending
};

// Local linear fits with tricube weights over the ceil(span n) nearest
// neighbours, followed by `robust_iters` bisquare reweighting passes based on
// six times the median absolute residual. A window whose x values are all
// identical falls back to the weighted mean.
inline LowessCurve lowess(const std::vector<double>& x, const std::vector<double>& y, double span = 2.0 / 3.0,
                          int robust_iters = 3) {
    detail::require_paired(x, y, "lowess");
    const std::size_t n = x.size();
    if (n < 5) throw ConfigError("lowess needs at least 5 points");
    if (!(span > 0.0 && span <= 1.0)) throw ConfigError("lowess span must lie in (0, 1]");
    if (robust_iters < 0) throw ConfigError("lowess robust_iters must be >= 0");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    LowessCurve out;
    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.x.push_back(x[order[i]]);
        ys[i] = y[order[i]];
    }
    const auto& xs = out.x;
    const std::size_t q = std::max<std::size_t>(1, std::size_t(std::ceil(span * double(n) - 1e-12)));

    std::vector<double> robust(n, 1.0);
    out.fit.assign(n, 0.0);
    for (int pass = 0; pass <= robust_iters; ++pass) {
        std::size_t lo = 0;  // window [lo, lo + q) of the q nearest neighbours
        for (std::size_t i = 0; i < n; ++i) {
            while (lo + q < n && xs[lo + q] - xs[i] < xs[i] - xs[lo]) ++lo;
            const double h = std::max(xs[i] - xs[lo], xs[lo + q - 1] - xs[i]);
            // points outside the window sit at distance >= h and get zero weight,
            // except that h == 0 admits every exact tie
            std::size_t a = lo, b = lo + q;
            if (h <= 0.0) {
                while (a > 0 && xs[a - 1] == xs[i]) --a;
                while (b < n && xs[b] == xs[i]) ++b;
            }
            double s0 = 0, s1 = 0, s2 = 0, t0 = 0, t1 = 0;
            for (std::size_t j = a; j < b; ++j) {
                const double d = std::abs(xs[j] - xs[i]);
                double w;
                if (h <= 0.0) {
                    w = d == 0.0 ? 1.0 : 0.0;
                } else {
                    const double u = d / h;
                    const double c = 1.0 - u * u * u;
                    w = u < 1.0 ? c * c * c : 0.0;
                }
                w *= robust[j];
                s0 += w;
                s1 += w * xs[j];
                s2 += w * xs[j] * xs[j];
                t0 += w * ys[j];
                t1 += w * xs[j] * ys[j];
            }
            const double det = s0 * s2 - s1 * s1;
            if (std::abs(det) <= 1e-12 * std::max(1.0, s0 * s2)) {
                out.fit[i] = s0 > 0.0 ? t0 / s0 : ys[i];
            } else {
                const double slope = (s0 * t1 - s1 * t0) / det;
                out.fit[i] = (t0 - slope * s1) / s0 + slope * xs[i];
            }
        }
        if (pass == robust_iters) break;
        std::vector<double> res(n);
        for (std::size_t i = 0; i < n; ++i) res[i] = std::abs(ys[i] - out.fit[i]);
        std::vector<double> sorted = res;
        std::sort(sorted.begin(), sorted.end());
        const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        for (std::size_t i = 0; i < n; ++i) {
            const double u = med > 0.0 ? res[i] / (6.0 * med) : 0.0;
            robust[i] = u < 1.0 ? (1.0 - u * u) * (1.0 - u * u) : 0.0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cluster-robust mean comparison

inline constexpr const char* kMeanDiffMethod = "GEE-approximation (cluster bootstrap)";

struct MeanComparison {
    double mean_a, mean_b, diff, ci_low, ci_high, p;
    std::string method = kMeanDiffMethod;
};

// Tests mean(a - b) = 0 by resampling clusters.
inline MeanComparison cluster_mean_diff(const std::vector<double>& a, const std::vector<double>& b,
                                        const std::vector<std::string>& cluster_ids, std::size_t B,
                                        std::uint64_t seed) {
    detail::require_paired(a, b, "cluster_mean_diff");
    if (cluster_ids.size() != a.size()) throw ShapeError("cluster_mean_diff: cluster ids differ in length");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] - b[i];
    auto boot = cluster_bootstrap(
        [&](const std::vector<std::size_t>& rows) {
            double s = 0.0;
            for (std::size_t i : rows) s += d[i];
            return s / double(rows.size());
        },
        cluster_ids, B, seed);
    return {detail::mean_of(a), detail::mean_of(b), boot.estimate, boot.ci_low, boot.ci_high,
            bootstrap_p_value(boot.replicates)};
}

// ---------------------------------------------------------------------------
// Normative classification

// Maps a class label to abnormal (true) or normal (false). Borderline counts
// as within normal limits.
inline bool abnormal_label(const std::string& s) {
    if (s == "within" || s == "borderline" || s == "normal") return false;
    if (s == "outside" || s == "abnormal") return true;
    throw ConfigError("unknown class label '" + s + "'");
}

struct ClassificationResult {
    double accuracy;
    // confusion[reference][predicted], index 0 = normal, 1 = abnormal
    std::array<std::array<std::size_t, 2>, 2> confusion{};
};

inline ClassificationResult classification_accuracy(const std::vector<std::string>& predicted,
                                                    const std::vector<std::string>& reference) {
    if (predicted.size() != reference.size()) throw ShapeError("classification_accuracy: inputs differ in length");
    if (predicted.empty()) throw ConfigError("classification_accuracy: empty input");
    ClassificationResult r{};
    std::size_t agree = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const bool p = abnormal_label(predicted[i]), ref = abnormal_label(reference[i]);
        ++r.confusion[ref][p];
        if (p == ref) ++agree;
    }
    r.accuracy = double(agree) / double(predicted.size());
    return r;
}

// ---------------------------------------------------------------------------
// Density estimate for violin plots

// Silverman's rule of thumb: 0.9 min(sd, IQR/1.34) n^(-1/5).
inline double silverman_bandwidth(const std::vector<double>& v) {
    if (v.size() < 2) throw ConfigError("bandwidth needs at least 2 values");
    const double m = detail::mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / double(v.size() - 1));
    std::vector<double> s = v;
    std::sort(s.begin(), s.end());
    const double iqr = quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
    double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
    if (spread <= 0.0) spread = 1.0;
    return 0.9 * spread * std::pow(double(v.size()), -0.2);
}

inline std::vector<double> gaussian_kde(const std::vector<double>& sample, const std::vector<double>& at,
                                        double bandwidth) {
    if (!(bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
    std::vector<double> out(at.size(), 0.0);
    const double norm = 1.0 / (double(sample.size()) * bandwidth * std::sqrt(2.0 * std::numbers::pi));
    for (std::size_t i = 0; i < at.size(); ++i) {
        double s = 0.0;
        for (double x : sample) {
            const double u = (at[i] - x) / bandwidth;
            s += std::exp(-0.5 * u * u);
        }
        out[i] = s * norm;
    }
    return out;
}

}  // namespace rnfl
