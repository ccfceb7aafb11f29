#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "rnflnet/dataio.hpp"
#include "rnflnet/dataset.hpp"
#include "rnflnet/error.hpp"
#include "rnflnet/explain.hpp"
#include "rnflnet/phantom.hpp"
#include "rnflnet/report.hpp"
#include "rnflnet/resnet.hpp"
#include "rnflnet/svg.hpp"
#include "rnflnet/train.hpp"

namespace rnfl::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// ---------------------------------------------------------------------------
// Flat key=value configuration

// Reads `key = value` lines; blank lines and lines starting with '#' are skipped.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
            throw ConfigError(fmt::format("{}:{}: expected key=value", path.string(), lineno));
        out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
}

// Inserts the contents of every `--config FILE` as `--key value` arguments
// right after the subcommand name, so explicit command-line options win.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    if (args.empty()) return args;
    std::vector<std::string> rest, injected;
    for (std::size_t i = 1; i < args.size(); ++i) {
        std::optional<std::string> path;
        if (args[i] == "--config") {
            if (i + 1 == args.size()) throw ConfigError("--config needs a file name");
            path = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        }
        if (!path) {
            rest.push_back(args[i]);
            continue;
        }
        for (auto& [k, v] : read_config_file(*path)) {
            injected.push_back("--" + k);
            injected.push_back(v);
        }
    }
    std::vector<std::string> out{args[0]};
    out.insert(out.end(), injected.begin(), injected.end());
    out.insert(out.end(), rest.begin(), rest.end());
    return out;
}

// Every option of the subcommand with its effective value, one key=value per
// line (repeated for list options), readable back through --config.
inline void write_resolved_config(const CLI::App& sub, const fs::path& dir) {
    std::ofstream out(dir / "resolved_config.txt", std::ios::trunc);
    if (!out) throw Error("cannot write " + (dir / "resolved_config.txt").string());
    out << "# " << sub.get_name() << '\n';
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_single_name();
        if (name == "help" || name == "config" || opt->get_lnames().empty()) continue;
        if (opt->count() > 0) {
            const auto& res = opt->results();
            if (opt->get_multi_option_policy() == CLI::MultiOptionPolicy::TakeAll) {
                for (const auto& v : res) out << name << '=' << v << '\n';
            } else {
                out << name << '=' << res.back() << '\n';
            }
        } else if (!opt->get_default_str().empty()) {
            out << name << '=' << opt->get_default_str() << '\n';
        }
    }
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());
}

inline std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    return f;
}

// ---------------------------------------------------------------------------
// Shared option groups

struct SplitOptions {
    std::string splits;  // optional split file; otherwise split by patient with the seed
    double train_frac = 0.7, valid_frac = 0.1, test_frac = 0.2;

    void add(CLI::App* sub) {
        sub->add_option("--splits", splits, "patient split file (patient_id,split); default: split by --seed");
        sub->add_option("--train-frac", train_frac, "fraction of patients for training");
        sub->add_option("--valid-frac", valid_frac, "fraction of patients for validation");
        sub->add_option("--test-frac", test_frac, "fraction of patients for testing");
    }

    SplitAssignment resolve(const std::vector<ManifestRow>& rows, std::uint64_t seed) const {
        if (!splits.empty()) {
            std::ifstream in(splits);
            if (!in) throw ConfigError("cannot read split file " + splits);
            return read_splits(in);
        }
        std::vector<std::string> ids;
        for (const auto& r : rows) ids.push_back(r.patient_id);
        return split_by_patient(ids, {train_frac, valid_frac, test_frac}, seed);
    }
};

inline ManifestLoad load_manifest_reporting(const std::string& path, std::ostream& err) {
    ManifestLoad load = load_manifest(path);
    if (!load.exclusions.empty()) err << "manifest: " << load.exclusions.size() << " rows excluded\n";
    for (const auto& w : load.warnings) err << "warning: row " << w.row << ": " << w.message << '\n';
    if (load.rows.empty()) throw ConfigError("manifest " + path + " has no usable rows");
    return load;
}

inline fs::path manifest_dir(const std::string& manifest) {
    const auto parent = fs::path(manifest).parent_path();
    return parent.empty() ? fs::path(".") : parent;
}

inline PreprocessConfig preprocess_for(const ModelConfig& mc) {
    PreprocessConfig pc;
    pc.input_size = mc.input_size;
    pc.channels = mc.in_channels;
    return pc;
}

struct ModelOptions {
    std::string preset = "micro";
    std::string head = "both";
    std::size_t input_size = 0;  // 0: preset default
    std::size_t channels = 0;    // 0: preset default

    void add(CLI::App* sub) {
        sub->add_option("--model", preset, "architecture preset")->check(CLI::IsMember({"micro", "resnet34"}));
        sub->add_option("--head", head, "output heads")->check(CLI::IsMember({"regression", "classification", "both"}));
        sub->add_option("--input-size", input_size, "network input size in pixels (0: preset default)");
        sub->add_option("--channels", channels, "input channels, 1 or 3 (0: preset default)");
    }

    ModelConfig config() const {
        ModelConfig mc = ModelConfig::preset(preset);
        mc.head = parse_head_kind(head);
        if (input_size) mc.input_size = input_size;
        if (channels) mc.in_channels = channels;
        if (mc.in_channels != 1 && mc.in_channels != 3) throw ConfigError("--channels must be 1 or 3");
        mc.validate();
        return mc;
    }
};

// ---------------------------------------------------------------------------
// Subcommands

struct PhantomCmd {
    std::string out;
    CohortSpec spec;
    std::uint64_t seed = 0;

    void add(CLI::App* sub) {
        sub->add_option("--out", out, "cohort output directory")->required();
        sub->add_option("--patients", spec.n_patients, "number of patients")->check(CLI::PositiveNumber);
        sub->add_option("--visits-min", spec.visits_min, "fewest visits per patient");
        sub->add_option("--visits-max", spec.visits_max, "most visits per patient");
        sub->add_option("--image-size", spec.image_size, "photo height in pixels");
        sub->add_option("--stereo", spec.stereo, "write side-by-side stereo frames");
        sub->add_option("--noise", spec.noise_sd, "pixel noise standard deviation");
        sub->add_option("--seed", seed, "random seed");
    }

    void run(const CLI::App& sub, std::ostream& os, std::ostream&) const {
        spec.validate();
        const Cohort c = gen_cohort(spec, seed, out);
        write_resolved_config(sub, out);
        os << fmt::format("wrote {} manifest rows for {} patients to {}\n", c.rows.size(), c.n_patients, out);
    }
};

struct ValidateCmd {
    std::string manifest, out;
    bool check_images = true;

    void add(CLI::App* sub) {
        sub->add_option("--manifest", manifest, "manifest CSV")->required();
        sub->add_option("--out", out, "directory for validation_log.csv");
        sub->add_option("--check-images", check_images, "decode every referenced photo");
    }

    void run(const CLI::App& sub, std::ostream& os, std::ostream&) const {
        const ManifestLoad load = load_manifest(manifest);
        const PairingResult paired = pair_manifest(load.rows);
        std::set<std::string> patients;
        for (const auto& r : load.rows) patients.insert(r.patient_id);
        std::vector<std::string> unreadable;
        if (check_images) {
            std::set<std::string> seen;
            for (const auto& r : paired.rows) {
                if (!seen.insert(r.photo_path).second) continue;
                const auto p = fs::path(r.photo_path).is_absolute() ? fs::path(r.photo_path)
                                                                     : manifest_dir(manifest) / r.photo_path;
                try {
                    read_pnm(p);
                } catch (const Error& e) {
                    unreadable.push_back(r.photo_path + ": " + e.what());
                }
            }
        }
        os << fmt::format("rows: {} usable, {} excluded, {} warnings\n", load.rows.size(), load.exclusions.size(),
                          load.warnings.size());
        os << fmt::format("patients: {}\n", patients.size());
        os << fmt::format("paired photos: {}, unpaired: {}\n", paired.rows.size(), paired.dropped.size());
        if (check_images) os << fmt::format("unreadable photos: {}\n", unreadable.size());
        for (const auto& e : load.exclusions) os << "excluded row " << e.row << ": " << e.message << '\n';
        for (const auto& w : load.warnings) os << "warning row " << w.row << ": " << w.message << '\n';
        for (const auto& d : paired.dropped) os << "unpaired: " << d << '\n';
        for (const auto& u : unreadable) os << "unreadable: " << u << '\n';
        if (!out.empty()) {
            ensure_dir(out);
            auto f = open_out(fs::path(out) / "validation_log.csv");
            f << "kind,row,message\n";
            for (const auto& e : load.exclusions) f << "excluded," << e.row << ',' << detail::csv_escape(e.message) << '\n';
            for (const auto& w : load.warnings) f << "warning," << w.row << ',' << detail::csv_escape(w.message) << '\n';
            for (const auto& d : paired.dropped) f << "unpaired,," << detail::csv_escape(d) << '\n';
            for (const auto& u : unreadable) f << "unreadable,," << detail::csv_escape(u) << '\n';
            write_resolved_config(sub, out);
        }
        if (!unreadable.empty()) throw Error(fmt::format("{} photos could not be decoded", unreadable.size()));
    }
};

struct SplitCmd {
    std::string manifest, out;
    std::uint64_t seed = 0;
    SplitOptions split;

    void add(CLI::App* sub) {
        sub->add_option("--manifest", manifest, "manifest CSV")->required();
        sub->add_option("--out", out, "output directory for splits.csv")->required();
        sub->add_option("--seed", seed, "random seed");
        sub->add_option("--train-frac", split.train_frac, "fraction of patients for training");
        sub->add_option("--valid-frac", split.valid_frac, "fraction of patients for validation");
        sub->add_option("--test-frac", split.test_frac, "fraction of patients for testing");
    }

    void run(const CLI::App& sub, std::ostream& os, std::ostream& err) const {
        const ManifestLoad load = load_manifest_reporting(manifest, err);
        const SplitAssignment a = split.resolve(load.rows, seed);
        ensure_dir(out);
        auto f = open_out(fs::path(out) / "splits.csv");
        write_splits(a, f);
        write_resolved_config(sub, out);
        std::map<Split, std::size_t> counts;
        for (const auto& [p, s] : a) ++counts[s];
        os << fmt::format("patients: {} train, {} valid, {} test\n", counts[Split::train], counts[Split::valid],
                          counts[Split::test]);
    }
};

struct TrainCmd {
    std::string manifest, out;
    ModelOptions model;
    SplitOptions split;
    TrainConfig cfg;
    std::optional<std::size_t> epochs;

    void add(CLI::App* sub) {
        sub->add_option("--manifest", manifest, "manifest CSV")->required();
        sub->add_option("--out", out, "output directory")->required();
        model.add(sub);
        split.add(sub);
        sub->add_option("--epochs", epochs, "total epochs; phase A gets up to --epochs-a of them, phase B the rest");
        sub->add_option("--epochs-a", cfg.epochs_a, "phase A epochs (last stage and heads)");
        sub->add_option("--epochs-b", cfg.epochs_b, "phase B epochs (all layers, differential learning rates)");
        sub->add_option("--batch-size", cfg.batch_size, "minibatch size");
        sub->add_option("--lr", cfg.lr, "maximum learning rate of each SGDR cycle");
        sub->add_option("--lr-min", cfg.lr_min, "minimum learning rate of each SGDR cycle");
        sub->add_option("--t0", cfg.t0_epochs, "first SGDR cycle length in epochs");
        sub->add_option("--t-mult", cfg.t_mult, "SGDR cycle length multiplier");
        sub->add_option("--augment", cfg.augment, "random flips and rotations during training");
        sub->add_option("--seed", cfg.seed, "random seed (initialization, splits, shuffling, augmentation)");
    }

    void run(const CLI::App& sub, std::ostream& os, std::ostream& err) {
        if (epochs) {
            cfg.epochs_a = std::min(cfg.epochs_a, *epochs);
            cfg.epochs_b = *epochs - cfg.epochs_a;
        }
        cfg.validate();
        const ModelConfig mc = model.config();
        const ManifestLoad load = load_manifest_reporting(manifest, err);
        const SplitAssignment splits = split.resolve(load.rows, cfg.seed);
        const auto pc = preprocess_for(mc);
        const Dataset tr = load_split(load.rows, splits, Split::train, manifest_dir(manifest), pc);
        const Dataset va = load_split(load.rows, splits, Split::valid, manifest_dir(manifest), pc);
        err << fmt::format("training on {} views, validating on {}\n", tr.samples.size(), va.samples.size());

        const Model init = build_model(mc, cfg.seed);
        const TrainResult res = train(init, tr.samples, va.samples, cfg, [&](const HistoryRow& h) {
            err << fmt::format("epoch {:3d} {} lr {:.3g} train {:.4f} valid {:.4f} mae {:.2f}\n", h.epoch, h.phase,
                               h.lr, h.train_loss, h.valid_loss, h.valid_mae);
        });

        ensure_dir(out);
        const fs::path dir(out);
        save_checkpoint(res.best, dir / "model.ckpt");
        {
            auto f = open_out(dir / "history.csv");
            write_history(res.history, f);
        }
        {
            auto f = open_out(dir / "splits.csv");
            write_splits(splits, f);
        }
        write_resolved_config(sub, out);
        if (res.best_epoch == 0) {
            os << "kept the initialization (no epoch improved the validation loss); wrote " << (dir / "model.ckpt").string()
               << '\n';
        } else {
            const HistoryRow& best = res.history.at(res.best_epoch - 1);
            os << fmt::format("best epoch {} valid loss {:.4f} valid MAE {:.2f} um; wrote {}\n", res.best_epoch,
                              best.valid_loss, best.valid_mae, (dir / "model.ckpt").string());
        }
    }
};

// Test-split samples and predictions shared by eval and gallery.
struct ScoredSplit {
    Dataset data;
    Predictions pred;
};

inline ScoredSplit score_split(const Model& m, const std::string& manifest, const SplitOptions& split,
                               std::uint64_t seed, const std::string& which, std::ostream& err) {
    const ManifestLoad load = load_manifest_reporting(manifest, err);
    const SplitAssignment splits = split.resolve(load.rows, seed);
    ScoredSplit s;
    s.data = load_split(load.rows, splits, parse_split(which), manifest_dir(manifest), preprocess_for(m.config()));
    if (s.data.samples.empty()) throw ConfigError("the " + which + " split is empty");
    s.pred = predict_samples(m, s.data.samples);
    return s;
}

struct EvalCmd {
    std::string checkpoint, manifest, out, which = "test";
    SplitOptions split;
    EvalOptions opt;

    void add(CLI::App* sub) {
        sub->add_option("--checkpoint", checkpoint, "trained model")->required();
        sub->add_option("--manifest", manifest, "manifest CSV")->required();
        sub->add_option("--out", out, "output directory")->required();
        sub->add_option("--split", which, "split to evaluate")->check(CLI::IsMember({"train", "valid", "test"}));
        split.add(sub);
        sub->add_option("--bootstrap", opt.n_boot, "participant-clustered bootstrap resamples");
        sub->add_option("--seed", opt.seed, "random seed (splits and bootstrap)");
        sub->add_option("--lowess-span", opt.lowess_span, "LOWESS neighbourhood fraction");
        sub->add_option("--lowess-iters", opt.lowess_iters, "LOWESS robustness iterations");
    }

    void run(const CLI::App& sub, std::ostream& os, std::ostream& err) const {
        const Model m = load_checkpoint(checkpoint);
        if (!m.config().has_regression()) throw ConfigError("eval needs a checkpoint with a regression head");
        const ScoredSplit s = score_split(m, manifest, split, opt.seed, which, err);
        EvalInputs in;
        for (std::size_t i = 0; i < s.data.samples.size(); ++i) {
            const auto& smp = s.data.samples[i];
            in.predicted.push_back(s.pred.thickness_um[i]);
            in.observed.push_back(smp.target_um);
            in.cluster.push_back(smp.patient_id);
            in.diagnosis.push_back(smp.diagnosis);
            in.sap_md_db.push_back(smp.sap_md_db);
            in.normative.push_back(smp.normative_class);
        }
        in.prob_abnormal = s.pred.prob_abnormal;
        in.train_mean_um = m.target_mean;
        const EvalReport r = evaluate(in, opt);

        ensure_dir(out);
        write_eval_outputs(r, in, opt, out);
        {
            auto f = open_out(fs::path(out) / "predictions.csv");
            f << "photo_path,view,patient_id,eye,diagnosis,normative_class,observed_um,predicted_um,prob_abnormal\n";
            for (std::size_t i = 0; i < s.data.samples.size(); ++i) {
                const auto& smp = s.data.samples[i];
                f << detail::csv_escape(s.data.rows[smp.row].photo_path) << ',' << smp.view << ','
                  << detail::csv_escape(smp.patient_id) << ',' << to_string(smp.eye) << ','
                  << to_string(smp.diagnosis) << ',' << (smp.normative_class ? to_string(*smp.normative_class) : "")
                  << ',' << num(in.observed[i]) << ',' << num(in.predicted[i]) << ','
                  << (in.prob_abnormal.empty() ? "" : num(in.prob_abnormal[i])) << '\n';
            }
        }
        write_resolved_config(sub, out);
        write_summary(r, opt, os);
    }
};

struct GradcamCmd {
    std::string checkpoint, out, target;
    std::vector<std::string> images;
    double alpha = 0.45;

    void add(CLI::App* sub) {
        sub->add_option("--checkpoint", checkpoint, "trained model")->required();
        sub->add_option("--out", out, "output directory")->required();
        sub->add_option("--image", images, "photograph (PGM/PPM); repeat for several")
            ->required()
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        sub->add_option("--target", target, "regression or abnormality (default: regression when available)")
            ->check(CLI::IsMember({"regression", "abnormality"}));
        sub->add_option("--alpha", alpha, "overlay opacity in [0, 1]");
    }

    void run(const CLI::App& sub, std::ostream& os, std::ostream&) const {
        const Model m = load_checkpoint(checkpoint);
        const CamTarget t = !target.empty()              ? parse_cam_target(target)
                            : m.config().has_regression() ? CamTarget::regression
                                                          : CamTarget::abnormality;
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("--alpha must lie in [0, 1]");
        std::set<std::string> stems;
        for (const auto& p : images)
            if (!stems.insert(fs::path(p).stem().string()).second)
                throw ConfigError("two input images share the name '" + fs::path(p).stem().string() + "'");
        ensure_dir(out);
        const fs::path dir(out);
        std::size_t written = 0;
        for (const auto& p : images) {
            const auto views = preprocess(fs::path(p), preprocess_for(m.config()));
            const auto maps = gradcam(m, views, t);
            const std::string stem = fs::path(p).stem().string();
            for (std::size_t v = 0; v < views.size(); ++v) {
                const std::string base = views.size() == 1 ? stem : fmt::format("{}_view{}", stem, v);
                const Image ov = overlay(views[v], maps[v], alpha);
                write_pnm(heatmap_image(maps[v]), dir / (base + "_heatmap.pgm"));
                write_pnm(ov, dir / (base + "_overlay.ppm"));
                image_sheet({{colorize(maps[v]), {"Grad-CAM heatmap", to_string(t)}},
                             {ov, {"overlay", fmt::format("alpha {:g}", alpha)}}},
                            base, 2, 256.0)
                    .save(dir / (base + ".svg"));
                ++written;
            }
        }
        write_resolved_config(sub, out);
        os << fmt::format("wrote {} heatmaps ({} target) to {}\n", written, to_string(t), out);
    }
};

struct GalleryCmd {
    std::string checkpoint, manifest, out, which = "test";
    SplitOptions split;
    std::size_t n = 10;
    std::uint64_t seed = 0;

    void add(CLI::App* sub) {
        sub->add_option("--checkpoint", checkpoint, "trained model with a classification head")->required();
        sub->add_option("--manifest", manifest, "manifest CSV")->required();
        sub->add_option("--out", out, "output directory")->required();
        sub->add_option("--split", which, "split to draw from")->check(CLI::IsMember({"train", "valid", "test"}));
        split.add(sub);
        sub->add_option("--n", n, "examples per sheet")->check(CLI::PositiveNumber);
        sub->add_option("--seed", seed, "random seed (splits and sampling)");
    }

    void run(const CLI::App& sub, std::ostream& os, std::ostream& err) const {
        const Model m = load_checkpoint(checkpoint);
        if (!m.config().has_classification())
            throw ConfigError("gallery needs a checkpoint with a classification head");
        const ScoredSplit s = score_split(m, manifest, split, seed, which, err);
        std::vector<std::size_t> correct, incorrect;
        for (std::size_t i = 0; i < s.data.samples.size(); ++i) {
            const auto& c = s.data.samples[i].normative_class;
            if (!c) continue;
            const bool pred = s.pred.prob_abnormal[i] >= kAbnormalThreshold;
            (pred == is_abnormal(*c) ? correct : incorrect).push_back(i);
        }
        if (correct.empty() && incorrect.empty()) throw ConfigError("no samples with a normative class to classify");
        ensure_dir(out);
        const fs::path dir(out);
        auto csv = open_out(dir / "gallery.csv");
        csv << "sheet,photo_path,view,observed_um,predicted_um,prob_abnormal,normative_class\n";
        auto sheet = [&](std::vector<std::size_t> pool, const std::string& name, std::uint64_t key) {
            Rng rng = keyed_rng(seed, {0x67616c6cULL, key});
            std::shuffle(pool.begin(), pool.end(), rng);
            if (pool.size() < n)
                err << fmt::format("warning: only {} {} examples available (asked for {})\n", pool.size(), name, n);
            pool.resize(std::min(pool.size(), n));
            std::vector<SheetItem> items;
            for (std::size_t i : pool) {
                const auto& smp = s.data.samples[i];
                const double prob = s.pred.prob_abnormal[i];
                std::vector<std::string> cap{fmt::format("observed {:.1f} um", smp.target_um)};
                std::string pred_um;
                if (!s.pred.thickness_um.empty()) {
                    cap.push_back(fmt::format("predicted {:.1f} um", s.pred.thickness_um[i]));
                    pred_um = num(s.pred.thickness_um[i]);
                }
                cap.push_back(fmt::format("P(abnormal) {:.2f}", prob));
                items.push_back({smp.image, cap});
                csv << name << ',' << detail::csv_escape(s.data.rows[smp.row].photo_path) << ',' << smp.view << ','
                    << num(smp.target_um) << ',' << pred_um << ',' << num(prob) << ','
                    << to_string(*smp.normative_class) << '\n';
            }
            image_sheet(items, fmt::format("{} classified examples ({})", name, items.size()))
                .save(dir / ("gallery_" + name + ".svg"));
            return items.size();
        };
        const std::size_t nc = sheet(correct, "correct", 1), ni = sheet(incorrect, "incorrect", 2);
        write_resolved_config(sub, out);
        os << fmt::format("{} correct and {} incorrect of {} classified; sheets hold {} and {}\n", correct.size(),
                          incorrect.size(), correct.size() + incorrect.size(), nc, ni);
    }
};

struct LrFindCmd {
    std::string manifest, out;
    ModelOptions model;
    SplitOptions split;
    TrainConfig cfg;
    double lo = 1e-6, hi = 1.0;
    std::size_t steps = 100;

    void add(CLI::App* sub) {
        sub->add_option("--manifest", manifest, "manifest CSV")->required();
        sub->add_option("--out", out, "output directory")->required();
        model.add(sub);
        split.add(sub);
        sub->add_option("--lr-lo", lo, "smallest learning rate tried");
        sub->add_option("--lr-hi", hi, "largest learning rate tried");
        sub->add_option("--steps", steps, "number of minibatch steps");
        sub->add_option("--batch-size", cfg.batch_size, "minibatch size");
        sub->add_option("--augment", cfg.augment, "random flips and rotations");
        sub->add_option("--seed", cfg.seed, "random seed");
    }

    void run(const CLI::App& sub, std::ostream& os, std::ostream& err) const {
        cfg.validate();
        const ModelConfig mc = model.config();
        const ManifestLoad load = load_manifest_reporting(manifest, err);
        const SplitAssignment splits = split.resolve(load.rows, cfg.seed);
        const Dataset tr = load_split(load.rows, splits, Split::train, manifest_dir(manifest), preprocess_for(mc));
        const LrRangeResult r = lr_find(build_model(mc, cfg.seed), tr.samples, cfg, lo, hi, steps);
        ensure_dir(out);
        const fs::path dir(out);
        {
            auto f = open_out(dir / "lr_find.csv");
            f << "lr,loss,smoothed_loss\n";
            for (const auto& p : r.table) f << num(p.lr) << ',' << num(p.loss) << ',' << num(p.smoothed_loss) << '\n';
        }
        std::vector<double> x, y;
        for (const auto& p : r.table) {
            x.push_back(std::log10(p.lr));
            y.push_back(p.smoothed_loss);
        }
        Svg svg(520, 420);
        svg.text(260, 20, fmt::format("LR range test (suggested {:.3g})", r.suggested_lr), 14, "middle");
        Frame f(svg, 70, 40, 400, 320, data_range(x), data_range(y));
        f.draw_axes("log10 learning rate", "smoothed loss");
        f.curve(x, y, palette()[0]);
        svg.line(f.px(std::log10(r.suggested_lr)), 40, f.px(std::log10(r.suggested_lr)), 360, palette()[1], 1.2,
                 "5 3");
        svg.save(dir / "lr_find.svg");
        write_resolved_config(sub, out);
        os << fmt::format("suggested learning rate {:.4g} after {} steps{}\n", r.suggested_lr, r.table.size(),
                          r.stopped_early ? " (stopped early on divergence)" : "");
    }
};

// ---------------------------------------------------------------------------
// Entry point

// `args` excludes the program name. Returns the process exit code.
inline int run(const std::vector<std::string>& args, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Fundus-photo RNFL thickness regression: phantoms, training, evaluation and explanations",
                 "rnflnet"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
    std::string config_dummy;

    PhantomCmd phantom;
    ValidateCmd validate;
    SplitCmd split;
    TrainCmd train_cmd;
    EvalCmd eval;
    GradcamCmd gradcam_cmd;
    GalleryCmd gallery;
    LrFindCmd lrfind;
    auto add = [&](const char* name, const char* desc, auto& cmd) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_dummy, "flat key=value file of option defaults");
        cmd.add(sub);
        return sub;
    };
    CLI::App* s_phantom = add("phantom", "generate a synthetic cohort with known thickness", phantom);
    CLI::App* s_validate = add("validate", "check a manifest and its photos", validate);
    CLI::App* s_split = add("split", "assign patients to train/valid/test", split);
    CLI::App* s_train = add("train", "two-phase training; writes model.ckpt and history.csv", train_cmd);
    CLI::App* s_eval = add("eval", "agreement, ROC and classification statistics with figures", eval);
    CLI::App* s_gradcam = add("gradcam", "Grad-CAM heatmaps and overlays for photographs", gradcam_cmd);
    CLI::App* s_gallery = add("gallery", "sheets of correctly and incorrectly classified photos", gallery);
    CLI::App* s_lrfind = add("lr-find", "learning-rate range test", lrfind);

    try {
        std::vector<std::string> rev = expand_config(args);
        std::reverse(rev.begin(), rev.end());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, os, err);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (s_phantom->parsed()) phantom.run(*s_phantom, os, err);
        else if (s_validate->parsed()) validate.run(*s_validate, os, err);
        else if (s_split->parsed()) split.run(*s_split, os, err);
        else if (s_train->parsed()) train_cmd.run(*s_train, os, err);
        else if (s_eval->parsed()) eval.run(*s_eval, os, err);
        else if (s_gradcam->parsed()) gradcam_cmd.run(*s_gradcam, os, err);
        else if (s_gallery->parsed()) gallery.run(*s_gallery, os, err);
        else if (s_lrfind->parsed()) lrfind.run(*s_lrfind, os, err);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace rnfl::cli
