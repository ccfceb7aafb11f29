#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>
#include <fmt/format.h>

#include "rnflnet/dataio.hpp"
#include "rnflnet/error.hpp"
#include "rnflnet/image.hpp"
#include "rnflnet/rng.hpp"

namespace rnfl {

// Intensity model of the disc phantom. Thickness enters the image through
// two channels: the cup widens as thickness drops, and the radial striation
// amplitude in the peripapillary band is affine in thickness.
namespace phantom_model {
inline constexpr double kBackground = 0.30;
inline constexpr double kBand = 0.40;
inline constexpr double kRim = 0.62;
inline constexpr double kCup = 0.88;
inline constexpr double kBandOuter = 1.5;  // band outer radius, in disc radii
inline constexpr int kSpokes = 18;
inline constexpr double kStriationBase = 0.02;
inline constexpr double kStriationSlope = 0.0012;  // amplitude per um
inline constexpr double kVesselDepth = 0.18;
inline constexpr double kVesselWidthPx = 0.8;
inline constexpr double kTruthMin = 40.0;
inline constexpr double kTruthMax = 130.0;

inline double striation_amplitude(double truth_um) { return kStriationBase + kStriationSlope * truth_um; }

// cup-to-disc ratio: 0.95 at 40 um, 0.2 at 130 um, linear in between
inline double cup_ratio_for(double truth_um) {
    const double t = std::clamp(truth_um, kTruthMin, kTruthMax);
    return 0.2 + 0.75 * (kTruthMax - t) / (kTruthMax - kTruthMin);
}
}  // namespace phantom_model

struct PhantomParams {
    double truth_um = 90.0;
    double disc_radius_frac = 0.12;
    double cup_ratio = phantom_model::cup_ratio_for(90.0);
    int vessel_count = 3;
    double noise_sd = 0.02;
    double illumination_gradient = 0.1;
    std::uint64_t seed = 0;  // noise stream

    // geometry that stays fixed per eye
    std::uint64_t vessel_seed = 0;
    std::size_t size = 64;
    double center_x_frac = 0.5;
    double center_y_frac = 0.5;
    double illumination_angle = 0.0;
    double striation_phase = 0.0;

    // Disc centre in pixel coordinates, snapped to a pixel centre.
    double center_x() const { return std::floor(center_x_frac * double(size)) + 0.5; }
    double center_y() const { return std::floor(center_y_frac * double(size)) + 0.5; }
    double disc_radius_px() const { return disc_radius_frac * double(size); }

    void validate() const {
        if (!(truth_um >= phantom_model::kTruthMin && truth_um <= phantom_model::kTruthMax))
            throw ConfigError("phantom truth_um must lie in [40, 130]");
        if (!(cup_ratio >= 0.2 && cup_ratio <= 0.95)) throw ConfigError("phantom cup_ratio must lie in [0.2, 0.95]");
        for (double f : {disc_radius_frac, center_x_frac, center_y_frac})
            if (!(f > 0.0 && f < 1.0)) throw ConfigError("phantom fractions must lie in (0, 1)");
        if (vessel_count < 0 || noise_sd < 0 || size < 8) throw ConfigError("invalid phantom parameters");
    }
};

inline PhantomParams phantom_params_for(double truth_um) {
    PhantomParams p;
    p.truth_um = truth_um;
    p.cup_ratio = phantom_model::cup_ratio_for(truth_um);
    return p;
}

struct RenderedEye {
    Image image;
    double truth_um;
};

// Deterministic in params (including seed).
inline RenderedEye render_eye(const PhantomParams& p) {
    using namespace phantom_model;
    p.validate();
    Rng vrng = keyed_rng(p.vessel_seed, {0x76657373656cULL});
    Rng rng = keyed_rng(p.seed, {0x6e6f697365ULL});
    const std::size_t n = p.size;
    const double cx = p.center_x(), cy = p.center_y(), rd = p.disc_radius_px();
    const double rc = p.cup_ratio * rd, rb = kBandOuter * rd;
    const double amp = striation_amplitude(p.truth_um);
    const double gx = std::cos(p.illumination_angle), gy = std::sin(p.illumination_angle);

    // vessels: curved arcs leaving the disc rim, sampled as polylines
    std::vector<std::vector<std::array<double, 2>>> vessels;
    for (int v = 0; v < p.vessel_count; ++v) {
        const double theta = uniform(vrng, 0.0, 2.0 * std::numbers::pi);
        const double bend = uniform(vrng, -0.03, 0.03);
        std::vector<std::array<double, 2>> pts;
        for (double t = 0.6 * rd; t < 0.8 * double(n); t += 0.25) {
            const double a = theta + bend * (t - 0.6 * rd);
            pts.push_back({cx + t * std::cos(a), cy + t * std::sin(a)});
        }
        vessels.push_back(std::move(pts));
    }

    Image img(n, n, 1);
    constexpr int kSub = 4;
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            // region coverage from 4x4 supersampling
            double base = 0.0, band_frac = 0.0;
            for (int sy = 0; sy < kSub; ++sy)
                for (int sx = 0; sx < kSub; ++sx) {
                    const double px = double(x) + (sx + 0.5) / kSub, py = double(y) + (sy + 0.5) / kSub;
                    const double r = std::hypot(px - cx, py - cy);
                    if (r <= rc)
                        base += kCup;
                    else if (r <= rd)
                        base += kRim;
                    else if (r <= rb) {
                        base += kBand;
                        band_frac += 1.0;
                    } else
                        base += kBackground;
                }
            base /= kSub * kSub;
            band_frac /= kSub * kSub;
            const double px = double(x) + 0.5, py = double(y) + 0.5;
            const double theta = std::atan2(py - cy, px - cx);
            double v = base + band_frac * amp * std::cos(kSpokes * theta + p.striation_phase);
            v += p.illumination_gradient * ((px - cx) * gx + (py - cy) * gy) / double(n);
            for (const auto& pts : vessels) {
                double d2 = 1e30;
                for (const auto& q : pts) d2 = std::min(d2, (q[0] - px) * (q[0] - px) + (q[1] - py) * (q[1] - py));
                v -= kVesselDepth * std::exp(-d2 / (2.0 * kVesselWidthPx * kVesselWidthPx));
            }
            if (p.noise_sd > 0.0) v += normal(rng, 0.0, p.noise_sd);
            img.at(0, y, x) = std::clamp(v, 0.0, 1.0);
        }
    return {std::move(img), p.truth_um};
}

// Two independently noised renders of the same eye, side by side.
inline Image render_stereo(const PhantomParams& p) {
    PhantomParams right = p;
    right.seed = splitmix64(p.seed ^ 0x5354524fULL);
    const Image l = render_eye(p).image, r = render_eye(right).image;
    Image out(2 * p.size, p.size, 1);
    for (std::size_t y = 0; y < p.size; ++y)
        for (std::size_t x = 0; x < p.size; ++x) {
            out.at(0, y, x) = l.at(0, y, x);
            out.at(0, y, x + p.size) = r.at(0, y, x);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Cohorts

// Baseline thickness of one diagnostic pool: a Beta distribution on [lo, hi]
// moment-matched to (mean, sd).
struct PoolSpec {
    double mean, sd, lo, hi;
};

struct CohortSpec {
    std::size_t n_patients = 200;
    std::size_t visits_min = 3;
    std::size_t visits_max = 3;
    std::size_t image_size = 64;
    bool stereo = false;
    double noise_sd = 0.02;
    // fractions of patients drawn into the normal / suspect / glaucoma pools
    std::array<double, 3> pool_fractions{0.35, 0.25, 0.40};
    PoolSpec normal{97.6, 9.3, 90.0, 130.0};
    PoolSpec suspect{85.0, 2.8, 80.0, 90.0};
    PoolSpec glaucoma{68.8, 16.0, 40.0, 80.0};
    // diagnosis cutoffs on baseline thickness
    double normal_above = 90.0;
    double glaucoma_below = 80.0;
    int oct_jitter_days = 60;
    double quality_min_db = 18.0;
    double quality_max_db = 35.0;

    void validate() const {
        if (n_patients < 3) throw ConfigError("cohort needs at least 3 patients");
        if (visits_min < 1 || visits_max < visits_min) throw ConfigError("cohort visits range invalid");
        if (image_size < 16) throw ConfigError("cohort image_size must be >= 16");
        for (const auto* pool : {&normal, &suspect, &glaucoma}) {
            const double w = pool->hi - pool->lo;
            if (!(w > 0) || !(pool->mean > pool->lo && pool->mean < pool->hi) ||
                !(pool->sd * pool->sd < (pool->mean - pool->lo) * (pool->hi - pool->mean)))
                throw ConfigError("cohort pool (mean, sd) not attainable on its [lo, hi] range");
            if (pool->lo < phantom_model::kTruthMin || pool->hi > phantom_model::kTruthMax)
                throw ConfigError("cohort pool range must lie in [40, 130]");
        }
    }
};

inline Diagnosis diagnosis_for(double baseline_um, const CohortSpec& s) {
    if (baseline_um > s.normal_above) return Diagnosis::normal;
    if (baseline_um < s.glaucoma_below) return Diagnosis::glaucoma;
    return Diagnosis::suspect;
}

// Per-image ground truth that the manifest schema has no column for.
struct PhantomTruth {
    std::string photo_path;
    double truth_um;
    double disc_cx, disc_cy, disc_radius_px, cup_ratio;
};

struct Cohort {
    std::vector<ManifestRow> rows;
    std::vector<PhantomTruth> truth;
    std::vector<double> baseline_um;      // per eye, in eye order
    std::vector<Diagnosis> baseline_pool;  // pool each eye was drawn from
    std::size_t n_patients = 0;
};

namespace detail {

inline std::vector<double> stratified_beta_draws(const PoolSpec& pool, std::size_t m, Rng& rng) {
    const double w = pool.hi - pool.lo;
    const double mu = (pool.mean - pool.lo) / w, var = (pool.sd / w) * (pool.sd / w);
    const double s = mu * (1.0 - mu) / var - 1.0;
    const double a = mu * s, b = (1.0 - mu) * s;
    std::vector<std::size_t> strata(m);
    for (std::size_t i = 0; i < m; ++i) strata[i] = i;
    std::shuffle(strata.begin(), strata.end(), rng);
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double u = (double(strata[i]) + uniform(rng, 0.0, 1.0)) / double(m);
        out[i] = pool.lo + w * boost::math::ibeta_inv(a, b, std::clamp(u, 1e-12, 1.0 - 1e-12));
    }
    return out;
}

}  // namespace detail

// Builds the cohort in memory: manifest rows, per-image truth and the
// parameters needed to render each photo (see write_cohort).
struct CohortPlanEntry {
    PhantomParams params;
    std::size_t row;
};

struct CohortPlan {
    Cohort cohort;
    std::vector<CohortPlanEntry> images;
};

inline CohortPlan plan_cohort(const CohortSpec& spec, std::uint64_t seed) {
    spec.validate();
    CohortPlan plan;
    Cohort& cohort = plan.cohort;
    cohort.n_patients = spec.n_patients;
    Rng rng = keyed_rng(seed, {0x636f686f7274ULL});

    // pool assignment: exact counts, shuffled over patients
    const std::size_t n = spec.n_patients;
    std::array<std::size_t, 3> counts{};
    const double fsum = spec.pool_fractions[0] + spec.pool_fractions[1] + spec.pool_fractions[2];
    counts[0] = std::size_t(std::llround(spec.pool_fractions[0] / fsum * double(n)));
    counts[1] = std::size_t(std::llround(spec.pool_fractions[1] / fsum * double(n)));
    counts[0] = std::min(counts[0], n);
    counts[1] = std::min(counts[1], n - counts[0]);
    counts[2] = n - counts[0] - counts[1];
    std::vector<Diagnosis> pools;
    for (std::size_t k = 0; k < 3; ++k) pools.insert(pools.end(), counts[k], Diagnosis(k));
    std::shuffle(pools.begin(), pools.end(), rng);

    std::array<std::vector<double>, 3> draws;
    const std::array<const PoolSpec*, 3> specs{&spec.normal, &spec.suspect, &spec.glaucoma};
    for (std::size_t k = 0; k < 3; ++k) draws[k] = detail::stratified_beta_draws(*specs[k], 2 * counts[k], rng);
    std::array<std::size_t, 3> next{};

    // healthy-pool Gaussian fit gives the normative cutoffs (5th / 1st percentile)
    double hs = 0.0, hss = 0.0;
    for (double v : draws[0]) hs += v;
    const double hmean = draws[0].empty() ? spec.normal.mean : hs / double(draws[0].size());
    for (double v : draws[0]) hss += (v - hmean) * (v - hmean);
    const double hsd = draws[0].size() > 1 ? std::sqrt(hss / double(draws[0].size() - 1)) : spec.normal.sd;
    const double p5 = hmean - 1.6448536269514722 * hsd;
    const double p1 = hmean - 2.3263478740408408 * hsd;

    const Date epoch = parse_date("2012-01-01");
    for (std::size_t pi = 0; pi < n; ++pi) {
        const std::string pid = fmt::format("P{:04d}", pi + 1);
        const Diagnosis pool = pools[pi];
        Rng prng = keyed_rng(seed, {0x70617469656e74ULL, pi});
        const std::size_t visits =
            spec.visits_min + std::size_t(std::uniform_int_distribution<std::size_t>(0, spec.visits_max - spec.visits_min)(prng));
        const Date baseline_date = epoch + std::chrono::days(std::uniform_int_distribution<int>(0, 1095)(prng));
        for (Eye eye : {Eye::OD, Eye::OS}) {
            const double baseline = draws[std::size_t(pool)][next[std::size_t(pool)]++];
            cohort.baseline_um.push_back(baseline);
            cohort.baseline_pool.push_back(pool);
            const Diagnosis dx = diagnosis_for(baseline, spec);
            double slope = 0.0;
            switch (pool) {
                case Diagnosis::normal: slope = uniform(prng, 0.0, 0.3); break;
                case Diagnosis::suspect: slope = uniform(prng, 0.2, 1.0); break;
                case Diagnosis::glaucoma: slope = uniform(prng, 0.5, 2.5); break;
            }
            PhantomParams geo;
            geo.size = spec.image_size;
            geo.noise_sd = spec.noise_sd;
            geo.disc_radius_frac = uniform(prng, 0.11, 0.13);
            geo.center_x_frac = uniform(prng, 0.3, 0.7);
            geo.center_y_frac = uniform(prng, 0.3, 0.7);
            if (eye == Eye::OS) geo.center_x_frac = 1.0 - geo.center_x_frac;
            geo.vessel_count = std::uniform_int_distribution<int>(2, 5)(prng);
            geo.illumination_gradient = uniform(prng, 0.0, 0.15);
            geo.illumination_angle = uniform(prng, 0.0, 2.0 * std::numbers::pi);
            geo.striation_phase = uniform(prng, 0.0, 2.0 * std::numbers::pi);
            geo.vessel_seed = prng();

            for (std::size_t v = 0; v < visits; ++v) {
                const int offset = int(365 * v) + (v ? std::uniform_int_distribution<int>(-30, 30)(prng) : 0);
                const Date photo_date = baseline_date + std::chrono::days(offset);
                const double years = double(offset) / 365.25;
                const double truth = std::max(phantom_model::kTruthMin, baseline - slope * years);
                ManifestRow r;
                r.patient_id = pid;
                r.eye = eye;
                r.photo_path = fmt::format("images/{}_{}_v{}.pgm", pid, to_string(eye), v + 1);
                r.photo_date = photo_date;
                r.oct_date = photo_date + std::chrono::days(std::uniform_int_distribution<int>(
                                              -spec.oct_jitter_days, spec.oct_jitter_days)(prng));
                r.oct_avg_rnfl_um = truth;
                r.oct_quality_db = uniform(prng, spec.quality_min_db, spec.quality_max_db);
                r.diagnosis = dx;
                r.sap_md_db = std::max(-30.0, 0.2 * (truth - 95.0) + normal(prng, 0.0, 1.0));
                r.sap_psd_db = 1.2 + 0.35 * std::max(0.0, -r.sap_md_db) + std::abs(normal(prng, 0.0, 0.4));
                r.normative_class = truth >= p5   ? NormativeClass::within
                                    : truth >= p1 ? NormativeClass::borderline
                                                  : NormativeClass::outside;

                PhantomParams p = geo;
                p.truth_um = truth;
                p.cup_ratio = phantom_model::cup_ratio_for(truth);
                p.seed = prng();
                plan.images.push_back({p, cohort.rows.size()});
                cohort.truth.push_back({r.photo_path, truth, p.center_x(), p.center_y(), p.disc_radius_px(), p.cup_ratio});
                cohort.rows.push_back(std::move(r));
            }
        }
    }
    return plan;
}

inline void write_phantom_truth(const std::vector<PhantomTruth>& truth, std::ostream& out) {
    out << "photo_path,truth_um,disc_cx,disc_cy,disc_radius_px,cup_ratio\n";
    for (const auto& t : truth)
        out << detail::csv_escape(t.photo_path) << ',' << detail::format_float(t.truth_um) << ','
            << detail::format_float(t.disc_cx) << ',' << detail::format_float(t.disc_cy) << ','
            << detail::format_float(t.disc_radius_px) << ',' << detail::format_float(t.cup_ratio) << '\n';
}

inline std::vector<PhantomTruth> read_phantom_truth(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    std::vector<PhantomTruth> out;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto f = detail::csv_fields(line);
        if (f.size() < 6) throw FormatError("phantom truth row " + std::to_string(row) + " has too few fields");
        out.push_back({f[0], detail::parse_float_field(f[1], "truth_um", row),
                       detail::parse_float_field(f[2], "disc_cx", row), detail::parse_float_field(f[3], "disc_cy", row),
                       detail::parse_float_field(f[4], "disc_radius_px", row),
                       detail::parse_float_field(f[5], "cup_ratio", row)});
    }
    return out;
}

// Renders every planned photo into <dir>/images and writes manifest.csv and
// phantom_truth.csv next to them.
inline Cohort gen_cohort(const CohortSpec& spec, std::uint64_t seed, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    CohortPlan plan = plan_cohort(spec, seed);
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (ec) throw Error("cannot create output directory " + (dir / "images").string() + ": " + ec.message());
    for (const auto& entry : plan.images) {
        const auto& row = plan.cohort.rows[entry.row];
        const Image img = spec.stereo ? render_stereo(entry.params) : render_eye(entry.params).image;
        write_pnm(img, dir / row.photo_path);
    }
    {
        std::ofstream out(dir / "manifest.csv", std::ios::trunc);
        if (!out) throw Error("cannot write " + (dir / "manifest.csv").string());
        write_manifest(plan.cohort.rows, out);
    }
    {
        std::ofstream out(dir / "phantom_truth.csv", std::ios::trunc);
        if (!out) throw Error("cannot write " + (dir / "phantom_truth.csv").string());
        write_phantom_truth(plan.cohort.truth, out);
    }
    return plan.cohort;
}

}  // namespace rnfl
