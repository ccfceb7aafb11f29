#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "rnflnet/dataset.hpp"
#include "rnflnet/error.hpp"
#include "rnflnet/evalstats.hpp"
#include "rnflnet/resnet.hpp"
#include "rnflnet/rng.hpp"
#include "rnflnet/svg.hpp"

namespace rnfl {

// Per-sample model outputs over a dataset, in sample order.
struct Predictions {
    std::vector<double> thickness_um;          // empty without a regression head
    std::vector<double> prob_abnormal;         // empty without a classification head
};

inline Predictions predict_samples(const Model& model, const std::vector<SamplePair>& samples,
                                   std::size_t chunk = 64) {
    Predictions out;
    for (std::size_t lo = 0; lo < samples.size(); lo += chunk) {
        std::vector<std::size_t> idx(std::min(chunk, samples.size() - lo));
        std::iota(idx.begin(), idx.end(), lo);
        const Tensor batch = make_batch(samples, idx);
        if (model.config().has_regression()) {
            const auto p = predict(model, batch);
            out.thickness_um.insert(out.thickness_um.end(), p.begin(), p.end());
        }
        if (model.config().has_classification()) {
            const auto p = predict_prob(model, batch);
            out.prob_abnormal.insert(out.prob_abnormal.end(), p.begin(), p.end());
        }
    }
    return out;
}

inline constexpr double kAbnormalThreshold = 0.5;

inline std::string predicted_class(double prob) { return prob >= kAbnormalThreshold ? "abnormal" : "normal"; }

struct EvalInputs {
    std::vector<double> predicted, observed;  // um, one per sample
    std::vector<std::string> cluster;          // participant id
    std::vector<Diagnosis> diagnosis;
    std::vector<double> sap_md_db;
    std::vector<std::optional<NormativeClass>> normative;
    std::vector<double> prob_abnormal;  // optional; empty when the model has no classification head
    double train_mean_um = 0.0;         // for the always-predict-the-mean baseline

    void validate() const {
        const std::size_t n = predicted.size();
        if (n == 0) throw ConfigError("evaluation set is empty");
        if (observed.size() != n || cluster.size() != n || diagnosis.size() != n || sap_md_db.size() != n ||
            normative.size() != n || (!prob_abnormal.empty() && prob_abnormal.size() != n))
            throw ShapeError("evaluation inputs differ in length");
    }
};

struct EvalOptions {
    std::size_t n_boot = kDefaultBootstrap;
    std::uint64_t seed = 0;
    double lowess_span = 2.0 / 3.0;
    int lowess_iters = 3;
};

// Glaucoma (case) vs normal (control), suspects excluded; thinner is more disease-like.
struct DiagnosticAccuracy {
    RocResult roc_predicted, roc_observed;
    AucComparison comparison;
    SensitivityResult pred_spec80, pred_spec95, obs_spec80, obs_spec95;
    std::size_t n_cases = 0, n_controls = 0;
};

struct EvalReport {
    std::size_t n = 0, n_clusters = 0;
    double mae = 0.0, baseline_mae = 0.0;
    double pearson_r = 0.0, r_squared = 0.0;
    BlandAltman bland_altman{};
    MeanComparison mean_comparison{};
    std::optional<DiagnosticAccuracy> diagnostic;  // absent when a group is missing
    std::optional<ClassificationResult> classification;
    std::size_t n_classified = 0;
    std::optional<LowessCurve> lowess_observed, lowess_predicted;
    std::vector<std::string> notes;
};

namespace detail {

inline std::uint64_t stat_seed(std::uint64_t seed, std::uint64_t k) { return splitmix64(seed ^ splitmix64(k)); }

}  // namespace detail

inline EvalReport evaluate(const EvalInputs& in, const EvalOptions& opt = {}) {
    in.validate();
    EvalReport r;
    r.n = in.predicted.size();
    r.n_clusters = cluster_rows(in.cluster).size();
    r.mae = mae(in.predicted, in.observed);
    r.baseline_mae = mae(std::vector<double>(r.n, in.train_mean_um), in.observed);
    r.pearson_r = pearson(in.predicted, in.observed);
    r.r_squared = r.pearson_r * r.pearson_r;
    r.bland_altman = bland_altman(in.predicted, in.observed);
    r.mean_comparison = cluster_mean_diff(in.predicted, in.observed, in.cluster, opt.n_boot, detail::stat_seed(opt.seed, 1));

    std::vector<double> sp, so;
    std::vector<int> lab;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < r.n; ++i) {
        if (in.diagnosis[i] == Diagnosis::suspect) continue;
        sp.push_back(in.predicted[i]);
        so.push_back(in.observed[i]);
        lab.push_back(in.diagnosis[i] == Diagnosis::glaucoma);
        ids.push_back(in.cluster[i]);
    }
    const auto cases = std::size_t(std::count(lab.begin(), lab.end(), 1));
    if (cases == 0 || cases == lab.size()) {
        r.notes.push_back("ROC analysis skipped: needs both glaucoma and normal eyes");
    } else {
        try {
            const auto dir = Direction::lower_is_disease;
            DiagnosticAccuracy d;
            d.n_cases = cases;
            d.n_controls = lab.size() - cases;
            d.roc_predicted = roc_auc_ci(sp, lab, dir, ids, opt.n_boot, detail::stat_seed(opt.seed, 2));
            d.roc_observed = roc_auc_ci(so, lab, dir, ids, opt.n_boot, detail::stat_seed(opt.seed, 3));
            d.comparison = compare_auc(sp, so, lab, dir, ids, opt.n_boot, detail::stat_seed(opt.seed, 4));
            d.pred_spec80 = sens_at_spec(sp, lab, dir, 0.80, ids, opt.n_boot, detail::stat_seed(opt.seed, 5));
            d.pred_spec95 = sens_at_spec(sp, lab, dir, 0.95, ids, opt.n_boot, detail::stat_seed(opt.seed, 6));
            d.obs_spec80 = sens_at_spec(so, lab, dir, 0.80, ids, opt.n_boot, detail::stat_seed(opt.seed, 7));
            d.obs_spec95 = sens_at_spec(so, lab, dir, 0.95, ids, opt.n_boot, detail::stat_seed(opt.seed, 8));
            r.diagnostic = d;
        } catch (const BootstrapError&) {
            r.notes.push_back(fmt::format("ROC analysis skipped: {} glaucoma and {} normal eyes are too few for resampling",
                                          cases, lab.size() - cases));
        }
    }

    if (!in.prob_abnormal.empty()) {
        std::vector<std::string> pred, ref;
        for (std::size_t i = 0; i < r.n; ++i) {
            if (!in.normative[i]) continue;
            pred.push_back(predicted_class(in.prob_abnormal[i]));
            ref.push_back(to_string(*in.normative[i]));
        }
        if (pred.empty())
            r.notes.push_back("classification accuracy skipped: no normative classes in the manifest");
        else
            r.classification = classification_accuracy(pred, ref);
        r.n_classified = pred.size();
    }

    if (r.n >= 5) {
        r.lowess_observed = lowess(in.sap_md_db, in.observed, opt.lowess_span, opt.lowess_iters);
        r.lowess_predicted = lowess(in.sap_md_db, in.predicted, opt.lowess_span, opt.lowess_iters);
    } else {
        r.notes.push_back("LOWESS skipped: needs at least 5 samples");
    }
    return r;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string num(double v) { return std::isfinite(v) ? fmt::format("{}", v) : std::string("NA"); }

inline void write_report_csv(const EvalReport& r, std::ostream& out) {
    out << "metric,estimate,ci_low,ci_high\n";
    auto row = [&](const std::string& name, double est, std::optional<double> lo = {}, std::optional<double> hi = {}) {
        out << name << ',' << num(est) << ',' << (lo ? num(*lo) : "") << ',' << (hi ? num(*hi) : "") << '\n';
    };
    row("n_samples", double(r.n));
    row("n_participants", double(r.n_clusters));
    row("mae_um", r.mae);
    row("baseline_mae_um", r.baseline_mae);
    row("pearson_r", r.pearson_r);
    row("r_squared", r.r_squared);
    row("ba_bias_um", r.bland_altman.bias);
    row("ba_sd_um", r.bland_altman.sd);
    row("ba_loa_low_um", r.bland_altman.loa_low);
    row("ba_loa_high_um", r.bland_altman.loa_high);
    row("mean_predicted_um", r.mean_comparison.mean_a);
    row("mean_observed_um", r.mean_comparison.mean_b);
    row("mean_diff_um", r.mean_comparison.diff, r.mean_comparison.ci_low, r.mean_comparison.ci_high);
    row("mean_diff_p", r.mean_comparison.p);
    if (r.diagnostic) {
        const auto& d = *r.diagnostic;
        row("n_glaucoma", double(d.n_cases));
        row("n_normal", double(d.n_controls));
        row("auc_predicted", d.roc_predicted.auc, d.roc_predicted.ci_low, d.roc_predicted.ci_high);
        row("auc_observed", d.roc_observed.auc, d.roc_observed.ci_low, d.roc_observed.ci_high);
        row("auc_diff", d.comparison.diff, d.comparison.ci_low, d.comparison.ci_high);
        row("auc_comparison_p", d.comparison.p);
        auto sens = [&](const std::string& name, const SensitivityResult& s) {
            row(name, s.point.sensitivity, s.ci_low, s.ci_high);
            row(name + "_threshold_um", s.point.threshold);
        };
        sens("sens_at_spec80_predicted", d.pred_spec80);
        sens("sens_at_spec95_predicted", d.pred_spec95);
        sens("sens_at_spec80_observed", d.obs_spec80);
        sens("sens_at_spec95_observed", d.obs_spec95);
    }
    if (r.classification) {
        const auto& c = *r.classification;
        row("n_classified", double(r.n_classified));
        row("classification_accuracy", c.accuracy);
        row("confusion_normal_normal", double(c.confusion[0][0]));
        row("confusion_normal_abnormal", double(c.confusion[0][1]));
        row("confusion_abnormal_normal", double(c.confusion[1][0]));
        row("confusion_abnormal_abnormal", double(c.confusion[1][1]));
    }
}

inline void write_summary(const EvalReport& r, const EvalOptions& opt, std::ostream& out) {
    out << fmt::format("samples: {} from {} participants\n", r.n, r.n_clusters);
    out << fmt::format("MAE: {:.2f} um (always-predict-training-mean baseline {:.2f} um)\n", r.mae, r.baseline_mae);
    out << fmt::format("Pearson r: {:.3f} (r^2 {:.3f})\n", r.pearson_r, r.r_squared);
    out << fmt::format("Bland-Altman: bias {:.2f} um, 95% limits of agreement {:.2f} to {:.2f} um\n",
                       r.bland_altman.bias, r.bland_altman.loa_low, r.bland_altman.loa_high);
    const auto& m = r.mean_comparison;
    out << fmt::format("mean predicted {:.2f} um vs observed {:.2f} um, difference {:.2f} (95% CI {:.2f} to {:.2f}), "
                       "p = {:.3f} [{}]\n",
                       m.mean_a, m.mean_b, m.diff, m.ci_low, m.ci_high, m.p, m.method);
    if (r.diagnostic) {
        const auto& d = *r.diagnostic;
        out << fmt::format("glaucoma vs normal: {} vs {} eyes-visits, suspects excluded\n", d.n_cases, d.n_controls);
        out << fmt::format("  AUC predicted {:.3f} (95% CI {:.3f}-{:.3f})\n", d.roc_predicted.auc,
                           d.roc_predicted.ci_low, d.roc_predicted.ci_high);
        out << fmt::format("  AUC observed  {:.3f} (95% CI {:.3f}-{:.3f})\n", d.roc_observed.auc,
                           d.roc_observed.ci_low, d.roc_observed.ci_high);
        out << fmt::format("  AUC difference p = {:.3f}\n", d.comparison.p);
        auto sens = [&](const char* what, const SensitivityResult& s, int spec) {
            out << fmt::format("  sensitivity at {}% specificity, {}: {:.3f} (95% CI {:.3f}-{:.3f}), cutoff {:.2f} um\n",
                               spec, what, s.point.sensitivity, s.ci_low, s.ci_high, s.point.threshold);
        };
        sens("predicted", d.pred_spec80, 80);
        sens("predicted", d.pred_spec95, 95);
        sens("observed", d.obs_spec80, 80);
        sens("observed", d.obs_spec95, 95);
    }
    if (r.classification)
        out << fmt::format("normative classification accuracy: {:.3f} over {} samples (borderline counted as normal)\n",
                           r.classification->accuracy, r.n_classified);
    out << fmt::format("bootstrap: {} participant-clustered resamples, seed {}\n", opt.n_boot, opt.seed);
    for (const auto& n : r.notes) out << "note: " << n << '\n';
}

// Writes report.csv, summary.txt and the five figures into `dir`.
inline void write_eval_outputs(const EvalReport& r, const EvalInputs& in, const EvalOptions& opt,
                               const std::filesystem::path& dir) {
    auto open = [&](const char* name) {
        std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + (dir / name).string());
        return f;
    };
    {
        auto f = open("report.csv");
        write_report_csv(r, f);
    }
    {
        auto f = open("summary.txt");
        write_summary(r, opt, f);
    }

    std::vector<NamedRoc> curves;
    if (r.diagnostic) {
        curves.push_back({"predicted", r.diagnostic->roc_predicted});
        curves.push_back({"observed SDOCT", r.diagnostic->roc_observed});
    }
    roc_plot(curves, "Glaucoma vs normal").save(dir / "roc.svg");
    scatter_plot(in.observed, in.predicted, fmt::format("Predicted vs observed RNFL (r = {:.3f})", r.pearson_r))
        .save(dir / "scatter.svg");
    bland_altman_plot(in.observed, in.predicted, r.bland_altman, "Bland-Altman").save(dir / "bland_altman.svg");

    std::vector<ViolinGroup> groups;
    for (Diagnosis g : {Diagnosis::normal, Diagnosis::suspect, Diagnosis::glaucoma}) {
        ViolinGroup obs{to_string(g) + " observed", {}}, pred{to_string(g) + " predicted", {}};
        for (std::size_t i = 0; i < in.predicted.size(); ++i)
            if (in.diagnosis[i] == g) {
                obs.values.push_back(in.observed[i]);
                pred.values.push_back(in.predicted[i]);
            }
        groups.push_back(std::move(obs));
        groups.push_back(std::move(pred));
    }
    violin_plot(groups, "RNFL thickness (um)", "RNFL thickness by diagnosis").save(dir / "violin.svg");

    std::vector<LowessSeries> series;
    if (r.lowess_observed) series.push_back({"observed SDOCT", in.sap_md_db, in.observed, *r.lowess_observed});
    if (r.lowess_predicted) series.push_back({"predicted", in.sap_md_db, in.predicted, *r.lowess_predicted});
    lowess_plot(series, "SAP mean deviation (dB)", "RNFL thickness (um)", "RNFL thickness vs SAP MD")
        .save(dir / "lowess.svg");
}

}  // namespace rnfl
