#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rnflnet/evalstats.hpp"
#include "test_oracles.hpp"

using namespace rnfl;

namespace {

std::vector<std::string> ids_every(std::size_t n, std::size_t per_cluster) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("C" + std::to_string(i / per_cluster));
    return ids;
}

}  // namespace

TEST(Mae, ForcedArithmetic) {
    EXPECT_EQ(mae({80, 90}, {82, 88}), 2.0);
    EXPECT_EQ(mae({1, 2, 3}, {1, 2, 3}), 0.0);
    EXPECT_THROW(mae({}, {}), ConfigError);
    EXPECT_THROW(mae({1}, {1, 2}), ShapeError);
}

TEST(Pearson, ExactCasesAndDirectFormula) {
    EXPECT_NEAR(pearson({1, 2, 3, 4}, {2, 4, 6, 8}), 1.0, 1e-15);
    EXPECT_NEAR(pearson({1, 2, 3, 4}, {99, 98, 97, 96}), -1.0, 1e-15);
    EXPECT_NEAR(pearson({1, 2, 3, 4}, {1, 2, 3, 10}), oracle::pearson_direct({1, 2, 3, 4}, {1, 2, 3, 10}), 1e-12);
    EXPECT_THROW(pearson({1, 1, 1}, {1, 2, 3}), ConfigError);
    EXPECT_THROW(pearson({1, 2}, {1, 2}), ConfigError);
}

TEST(Pearson, AffineInvariance) {
    Rng rng(3);
    std::vector<double> x(200), y(200);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = normal(rng, 0, 1);
        y[i] = x[i] + normal(rng, 0, 1);
    }
    const double r = pearson(x, y);
    std::vector<double> x2 = x, y2 = y;
    for (auto& v : x2) v = 3.5 * v - 7.0;
    for (auto& v : y2) v = 0.25 * v + 100.0;
    EXPECT_NEAR(pearson(x2, y2), r, 1e-12);
}

TEST(BlandAltman, HandCases) {
    auto z = bland_altman({5, 6, 7}, {5, 6, 7});
    EXPECT_EQ(z.bias, 0.0);
    EXPECT_EQ(z.loa_low, 0.0);
    EXPECT_EQ(z.loa_high, 0.0);
    auto b = bland_altman({1, 0}, {0, 1});
    EXPECT_EQ(b.bias, 0.0);
    EXPECT_NEAR(b.loa_high, 1.96 * std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(b.loa_low, -2.7719, 1e-4);
    EXPECT_THROW(bland_altman({1}, {1}), ConfigError);
}

TEST(BlandAltman, LimitsCoverGaussianDifferences) {
    Rng rng(11);
    std::vector<double> p(10000), o(10000);
    for (std::size_t i = 0; i < p.size(); ++i) {
        o[i] = normal(rng, 80, 15);
        p[i] = o[i] + normal(rng, 1.0, 5.0);
    }
    auto ba = bland_altman(p, o);
    std::size_t inside = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] - o[i] >= ba.loa_low && p[i] - o[i] <= ba.loa_high) ++inside;
    EXPECT_GE(double(inside) / double(p.size()), 0.93);
}

TEST(Roc, HandCasesAndCurve) {
    EXPECT_EQ(auc_value({0.8, 0.3, 0.5, 0.2}, {1, 1, 0, 0}, Direction::higher_is_disease), 0.75);
    EXPECT_EQ(auc_value({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}, Direction::higher_is_disease), 1.0);
    EXPECT_EQ(auc_value({3, 3, 3, 3}, {1, 0, 1, 0}, Direction::higher_is_disease), 0.5);
    EXPECT_THROW(roc_auc({1, 2}, {1, 1}, Direction::higher_is_disease), ConfigError);

    auto r = roc_auc({50, 65, 60, 70}, {1, 1, 0, 0}, Direction::lower_is_disease);
    EXPECT_EQ(r.auc, 0.75);
    ASSERT_EQ(r.points.size(), 5u);
    EXPECT_EQ(r.points.front().fpr, 0.0);
    EXPECT_EQ(r.points.back().tpr, 1.0);
    for (std::size_t i = 1; i < r.points.size(); ++i) {
        EXPECT_GE(r.points[i].fpr, r.points[i - 1].fpr);
        EXPECT_GE(r.points[i].tpr, r.points[i - 1].tpr);
    }
}

TEST(Roc, MatchesPairCountingWithTies) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng() % 60;
        std::vector<double> s(n);
        std::vector<int> l(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = double(rng() % 7);  // heavy ties
            l[i] = int(rng() % 2);
        }
        l[0] = 1;
        l[1] = 0;
        for (auto d : {Direction::higher_is_disease, Direction::lower_is_disease})
            EXPECT_EQ(auc_value(s, l, d), oracle::auc_pairs(s, l, d == Direction::higher_is_disease));
    }
}

TEST(Roc, DirectionFlipWithoutTies) {
    Rng rng(8);
    std::vector<double> s(50);
    std::vector<int> l(50);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = uniform(rng, 0, 1);
        l[i] = int(i % 3 == 0);
    }
    EXPECT_NEAR(auc_value(s, l, Direction::lower_is_disease), 1.0 - auc_value(s, l, Direction::higher_is_disease),
                1e-15);
}

TEST(Bootstrap, ConstantDataAndDeterminism) {
    std::vector<double> v(40, 3.25);
    auto ids = ids_every(40, 4);
    auto mean_stat = [&](const std::vector<std::size_t>& rows) {
        double s = 0;
        for (auto i : rows) s += v[i];
        return s / double(rows.size());
    };
    auto r = cluster_bootstrap(mean_stat, ids, 200, 1);
    EXPECT_EQ(r.ci_low, 3.25);
    EXPECT_EQ(r.ci_high, 3.25);

    Rng rng(2);
    for (auto& x : v) x = normal(rng, 0, 1);
    auto a = cluster_bootstrap(mean_stat, ids, 500, 9), b = cluster_bootstrap(mean_stat, ids, 500, 9);
    EXPECT_EQ(a.ci_low, b.ci_low);
    EXPECT_EQ(a.ci_high, b.ci_high);
    EXPECT_THROW(cluster_bootstrap(mean_stat, ids, 50, 9), ConfigError);
    EXPECT_THROW(cluster_bootstrap(mean_stat, std::vector<std::string>(40, "one"), 200, 9), ConfigError);
}

TEST(Bootstrap, DuplicatedClusterGivesZeroWidth) {
    // two identical clusters: every resample is a permutation of the same blocks
    std::vector<double> v{1, 5, 2, 8, 1, 5, 2, 8};
    std::vector<std::string> ids{"a", "a", "a", "a", "b", "b", "b", "b"};
    auto r = cluster_bootstrap(
        [&](const std::vector<std::size_t>& rows) {
            double mx = -1e300;
            for (auto i : rows) mx = std::max(mx, v[i] * v[i]);
            return mx;
        },
        ids, 300, 4);
    EXPECT_EQ(r.ci_low, r.ci_high);
}

TEST(Bootstrap, PValueRules) {
    EXPECT_EQ(bootstrap_p_value(std::vector<double>(100, 0.0)), 1.0);
    EXPECT_NEAR(bootstrap_p_value(std::vector<double>(100, 1.0)), 2.0 / 101.0, 1e-15);
}

TEST(MeanDiff, IdentityAndShift) {
    Rng rng(6);
    std::vector<double> obs(60);
    for (auto& x : obs) x = normal(rng, 80, 10);
    auto ids = ids_every(60, 3);
    auto same = cluster_mean_diff(obs, obs, ids, 500, 1);
    EXPECT_EQ(same.p, 1.0);
    EXPECT_EQ(same.method, "GEE-approximation (cluster bootstrap)");
    std::vector<double> shifted = obs;
    for (auto& x : shifted) x += 10.0;
    auto s = cluster_mean_diff(shifted, obs, ids, 500, 1);
    EXPECT_LE(s.p, 2.0 / 501.0);
    EXPECT_NEAR(s.diff, 10.0, 1e-9);
    EXPECT_THROW(cluster_mean_diff(obs, obs, std::vector<std::string>(60, "x"), 500, 1), ConfigError);
}

TEST(CompareAuc, IdenticalScoresAndSeparatedScores) {
    Rng rng(12);
    const std::size_t n = 200;
    std::vector<double> truth(n), a(n), b(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
        l[i] = int(i % 2);
        truth[i] = l[i] ? normal(rng, 65, 8) : normal(rng, 95, 8);
        a[i] = truth[i] + normal(rng, 0, 0.01);
        b[i] = uniform(rng, 40, 130);
    }
    auto ids = ids_every(n, 2);
    auto same = compare_auc(a, a, l, Direction::lower_is_disease, ids, 500, 3);
    EXPECT_EQ(same.p, 1.0);
    auto sep = compare_auc(a, b, l, Direction::lower_is_disease, ids, 2000, 3);
    EXPECT_LT(sep.p, 0.01);
    EXPECT_GT(sep.auc_a, sep.auc_b);
    EXPECT_THROW(compare_auc(a, {1.0}, l, Direction::lower_is_disease, ids, 500, 3), ShapeError);
}

TEST(SensAtSpec, HandCaseAndSeparated) {
    // controls {60, 70}, cases {50, 65}; low thickness is disease
    auto p = sensitivity_at_specificity({60, 70, 50, 65}, {0, 0, 1, 1}, Direction::lower_is_disease, 0.95);
    EXPECT_LT(p.threshold, 60.0);
    EXPECT_EQ(p.sensitivity, 0.5);
    EXPECT_EQ(p.specificity, 1.0);
    for (double spec : {0.8, 0.95}) {
        auto q = sensitivity_at_specificity({90, 95, 100, 50, 55}, {0, 0, 0, 1, 1}, Direction::lower_is_disease, spec);
        EXPECT_EQ(q.sensitivity, 1.0);
    }
    EXPECT_THROW(sensitivity_at_specificity({1, 2}, {0, 0}, Direction::lower_is_disease, 0.8), ConfigError);
}

TEST(SensAtSpec, BootstrapIntervalBracketsEstimate) {
    Rng rng(21);
    std::vector<double> s(120);
    std::vector<int> l(120);
    for (std::size_t i = 0; i < s.size(); ++i) {
        l[i] = int(i % 3 == 0);
        s[i] = l[i] ? normal(rng, 70, 10) : normal(rng, 95, 10);
    }
    auto r = sens_at_spec(s, l, Direction::lower_is_disease, 0.8, ids_every(120, 2), 400, 5);
    EXPECT_LE(r.ci_low, r.point.sensitivity);
    EXPECT_GE(r.ci_high, r.point.sensitivity);
}

TEST(Lowess, ConstantAndLinear) {
    std::vector<double> x{5, 1, 4, 2, 3, 7, 6}, c(7, 2.5), line;
    for (double v : x) line.push_back(3.0 - 0.5 * v);
    for (double f : lowess(x, c).fit) EXPECT_NEAR(f, 2.5, 1e-12);
    auto l = lowess(x, line, 1.0, 0);
    for (std::size_t i = 0; i < l.x.size(); ++i) EXPECT_NEAR(l.fit[i], 3.0 - 0.5 * l.x[i], 1e-9);
    EXPECT_TRUE(std::is_sorted(l.x.begin(), l.x.end()));
    EXPECT_THROW(lowess({1, 2, 3}, {1, 2, 3}), ConfigError);
    EXPECT_THROW(lowess(x, line, 0.0, 0), ConfigError);
}

TEST(Lowess, MatchesTextbookReference) {
    Rng rng(31);
    std::vector<double> x(150), y(150);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = uniform(rng, 0, 10);
        y[i] = std::sin(x[i]) + normal(rng, 0, 0.3) + (i % 37 == 0 ? 3.0 : 0.0);
    }
    for (auto [span, iters] : {std::pair{0.3, 3}, std::pair{2.0 / 3.0, 0}, std::pair{0.1, 2}}) {
        auto got = lowess(x, y, span, iters);
        auto ref = oracle::lowess_reference(x, y, span, iters);
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got.fit[i], ref[i], 1e-6) << span << " " << i;
    }
}

TEST(Lowess, DegenerateWindowFallsBackToMean) {
    std::vector<double> x{1, 1, 1, 1, 1, 2, 3}, y{1, 2, 3, 4, 5, 6, 7};
    auto got = lowess(x, y, 0.3, 0);
    auto ref = oracle::lowess_reference(x, y, 0.3, 0);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got.fit[i], ref[i], 1e-12);
    EXPECT_NEAR(got.fit[0], 3.0, 1e-12);
}

TEST(Classification, MappingAndConfusion) {
    EXPECT_EQ(classification_accuracy({"within", "outside"}, {"within", "outside"}).accuracy, 1.0);
    EXPECT_EQ(classification_accuracy({"normal", "normal"}, {"borderline", "borderline"}).accuracy, 1.0);
    auto r = classification_accuracy({"normal", "abnormal", "abnormal", "normal"},
                                     {"within", "outside", "outside", "outside"});
    EXPECT_EQ(r.accuracy, 0.75);
    EXPECT_EQ(r.confusion[1][0], 1u);
    EXPECT_EQ(r.confusion[1][1], 2u);
    EXPECT_EQ(r.confusion[0][0], 1u);
    EXPECT_THROW(classification_accuracy({"normal"}, {"weird"}), ConfigError);
}

TEST(Kde, IntegratesToOne) {
    std::vector<double> s{1, 2, 2.5, 4, 7};
    const double h = silverman_bandwidth(s);
    EXPECT_GT(h, 0.0);
    std::vector<double> grid;
    for (double x = -20; x <= 30; x += 0.01) grid.push_back(x);
    double area = 0;
    for (double d : gaussian_kde(s, grid, h)) area += d * 0.01;
    EXPECT_NEAR(area, 1.0, 1e-6);
}

TEST(Quantile, TypeSeven) {
    EXPECT_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
    EXPECT_EQ(quantile({10, 0}, 0.25), 2.5);
    EXPECT_EQ(quantile({7}, 0.9), 7.0);
}
