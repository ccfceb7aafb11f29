#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "rnflnet/dataio.hpp"
#include "rnflnet/image.hpp"

using namespace rnfl;
namespace fs = std::filesystem;

namespace {

const char* kHeader =
    "patient_id,eye,photo_path,photo_date,oct_date,oct_avg_rnfl_um,oct_quality_db,diagnosis,sap_md_db,sap_psd_db,"
    "normative_class\n";

ManifestLoad parse(const std::string& body) {
    std::istringstream in(std::string(kHeader) + body);
    return parse_manifest(in);
}

fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "rnflnet_dataio";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST(Manifest, ParsesRows) {
    auto m = parse("P1,OD,a.pgm,2020-01-01,2020-01-10,85.5,25,glaucoma,-4.5,6.1,outside\n"
                   "P1,OS,b.pgm,2020-01-01,2020-01-10,95,25,normal,-0.5,1.5,\n");
    ASSERT_EQ(m.rows.size(), 2u);
    EXPECT_EQ(m.rows[0].oct_avg_rnfl_um, 85.5);
    EXPECT_EQ(m.rows[0].diagnosis, Diagnosis::glaucoma);
    EXPECT_EQ(m.rows[0].normative_class, NormativeClass::outside);
    EXPECT_FALSE(m.rows[1].normative_class.has_value());
    EXPECT_EQ(m.rows[1].eye, Eye::OS);
}

TEST(Manifest, LowSignalExcluded) {
    auto m = parse("P1,OD,a.pgm,2020-01-01,2020-01-10,85,14.9,normal,0,1,\n"
                   "P1,OS,b.pgm,2020-01-01,2020-01-10,85,15,normal,0,1,\n");
    ASSERT_EQ(m.rows.size(), 1u);
    ASSERT_EQ(m.exclusions.size(), 1u);
    EXPECT_EQ(m.exclusions[0].row, 1u);
    EXPECT_EQ(m.exclusions[0].message, "low signal");
}

TEST(Manifest, EmptyBodyIsEmptyList) {
    auto m = parse("");
    EXPECT_TRUE(m.rows.empty());
    EXPECT_TRUE(m.exclusions.empty());
}

TEST(Manifest, DuplicatesCollapsedWithWarning) {
    auto m = parse("P1,OD,a.pgm,2020-01-01,2020-01-10,85,20,normal,0,1,\n"
                   "P1,OD,a.pgm,2020-01-01,2020-01-10,85,20,normal,0,1,\n");
    EXPECT_EQ(m.rows.size(), 1u);
    EXPECT_EQ(m.warnings.size(), 1u);
}

TEST(Manifest, ErrorsCarryRowNumber) {
    std::istringstream missing("patient_id,eye,photo_path\nP1,OD,a.pgm\n");
    EXPECT_THROW(parse_manifest(missing), FormatError);
    try {
        parse("P1,OD,a.pgm,2020-01-01,2020-01-10,85,20,normal,0,1,\nP2,OD,b.pgm,2020-02-30,2020-01-10,85,20,normal,0,1,\n");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
    }
    try {
        parse("P1,OD,a.pgm,2020-01-01,2020-01-10,eighty,20,normal,0,1,\n");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos) << e.what();
    }
}

TEST(Manifest, WriteThenParseIsIdentity) {
    auto m = parse("P1,OD,\"dir,with,comma/a.pgm\",2020-01-01,2020-01-10,85.25,25.5,suspect,-1.25,2,borderline\n");
    std::ostringstream os;
    write_manifest(m.rows, os);
    std::istringstream in(os.str());
    auto back = parse_manifest(in);
    EXPECT_EQ(back.rows, m.rows);
}

TEST(Pairing, ClosestWithinSixMonths) {
    const Date photo = parse_date("2020-01-01");
    std::vector<PhotoRecord> photos{{"P", Eye::OD, photo}};
    std::vector<OctRecord> octs{{"P", Eye::OD, parse_date("2019-10-01")}, {"P", Eye::OD, parse_date("2020-08-01")}};
    auto m = pair_photos_to_oct(photos, octs);
    ASSERT_TRUE(m[0].has_value());
    EXPECT_EQ(*m[0], 0u);
}

TEST(Pairing, BeyondLimitUnpaired) {
    const Date photo = parse_date("2020-01-01");
    std::vector<PhotoRecord> photos{{"P", Eye::OD, photo}};
    std::vector<OctRecord> at184{{"P", Eye::OD, photo + std::chrono::days(184)}};
    EXPECT_FALSE(pair_photos_to_oct(photos, at184)[0].has_value());
    std::vector<OctRecord> at183{{"P", Eye::OD, photo - std::chrono::days(183)}};
    EXPECT_TRUE(pair_photos_to_oct(photos, at183)[0].has_value());
    std::vector<OctRecord> other_eye{{"P", Eye::OS, photo}};
    EXPECT_FALSE(pair_photos_to_oct(photos, other_eye)[0].has_value());
}

TEST(Pairing, TieGoesToEarlierOct) {
    const Date photo = parse_date("2020-06-15");
    std::vector<PhotoRecord> photos{{"P", Eye::OD, photo}};
    std::vector<OctRecord> octs{{"P", Eye::OD, photo + std::chrono::days(30)}, {"P", Eye::OD, photo - std::chrono::days(30)}};
    EXPECT_EQ(*pair_photos_to_oct(photos, octs)[0], 1u);
    std::swap(octs[0], octs[1]);
    EXPECT_EQ(*pair_photos_to_oct(photos, octs)[0], 0u);
}

TEST(Pairing, IndependentOfInputOrder) {
    Rng rng = keyed_rng(5);
    const Date base = parse_date("2018-01-01");
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<PhotoRecord> photos;
        std::vector<OctRecord> octs;
        for (int i = 0; i < 12; ++i)
            photos.push_back({"P" + std::to_string(i % 3), Eye(i % 2), base + std::chrono::days(rng() % 900)});
        std::set<std::tuple<std::string, int, int>> used;
        for (int i = 0; i < 20; ++i) {
            const int d = int(rng() % 900);
            std::string p = "P" + std::to_string(i % 3);
            if (used.insert({p, i % 2, d}).second) octs.push_back({p, Eye(i % 2), base + std::chrono::days(d)});
        }
        auto ref = pair_photos_to_oct(photos, octs);
        std::vector<std::size_t> perm(octs.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<OctRecord> shuffled;
        for (auto i : perm) shuffled.push_back(octs[i]);
        auto got = pair_photos_to_oct(photos, shuffled);
        for (std::size_t p = 0; p < photos.size(); ++p) {
            ASSERT_EQ(ref[p].has_value(), got[p].has_value());
            if (ref[p]) {
                EXPECT_EQ(octs[*ref[p]].date, shuffled[*got[p]].date);
            }
        }
    }
}

TEST(Pairing, ManifestPairingKeepsOctValues) {
    auto m = parse("P1,OD,a.pgm,2020-01-01,2020-01-05,85,20,normal,0,1,\n"
                   "P1,OD,b.pgm,2020-06-01,2020-05-20,80,20,normal,0,1,\n"
                   "P1,OD,c.pgm,2021-06-01,2021-06-01,70,20,glaucoma,0,1,\n");
    auto paired = pair_manifest(m.rows);
    ASSERT_EQ(paired.rows.size(), 3u);
    EXPECT_EQ(paired.rows[0].oct_avg_rnfl_um, 85.0);
    EXPECT_EQ(paired.rows[1].oct_avg_rnfl_um, 80.0);
    EXPECT_EQ(paired.rows[2].oct_avg_rnfl_um, 70.0);
}

TEST(Split, TenPatientsEightyTwenty) {
    std::vector<std::string> ids;
    for (int i = 0; i < 10; ++i) ids.push_back("P" + std::to_string(i));
    auto a = split_by_patient(ids, {0.8, 0.0, 0.2}, 1);
    int train = 0, test = 0;
    for (auto& [p, s] : a) (s == Split::train ? train : test)++;
    EXPECT_EQ(train, 8);
    EXPECT_EQ(test, 2);
    EXPECT_EQ(split_by_patient(ids, {0.8, 0.0, 0.2}, 1), a);
}

TEST(Split, NoLeakageAcrossSeeds) {
    // rows repeat each patient several times
    std::vector<std::string> rows;
    for (int i = 0; i < 37; ++i)
        for (int k = 0; k < 1 + i % 4; ++k) rows.push_back("P" + std::to_string(i));
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        auto a = split_by_patient(rows, {0.7, 0.1, 0.2}, seed);
        std::vector<std::pair<std::string, Split>> per_row;
        for (const auto& r : rows) per_row.emplace_back(r, a.at(r));
        ASSERT_NO_THROW(check_no_leakage(per_row));
        EXPECT_EQ(a.size(), 37u);
    }
}

TEST(Split, FractionsWithinOnePatient) {
    std::vector<std::string> ids;
    for (int i = 0; i < 200; ++i) ids.push_back("P" + std::to_string(i));
    auto a = split_by_patient(ids, {0.7, 0.1, 0.2}, 3);
    std::map<Split, int> n;
    for (auto& [p, s] : a) n[s]++;
    EXPECT_LE(std::abs(n[Split::train] - 140), 1);
    EXPECT_LE(std::abs(n[Split::valid] - 20), 1);
    EXPECT_LE(std::abs(n[Split::test] - 40), 1);
}

TEST(Split, TooFewPatientsIsError) {
    EXPECT_THROW(split_by_patient({"A", "B"}, {0.7, 0.1, 0.2}, 0), ConfigError);
    EXPECT_THROW(split_by_patient({"A", "B", "C"}, {0.7, 0.1, 0.1}, 0), ConfigError);
}

TEST(Split, CsvRoundTripAndLeakCheck) {
    std::vector<std::string> ids{"A", "B", "C", "D", "E"};
    auto a = split_by_patient(ids, {0.6, 0.2, 0.2}, 9);
    std::stringstream ss;
    write_splits(a, ss);
    EXPECT_EQ(read_splits(ss), a);
    EXPECT_THROW(check_no_leakage({{"A", Split::train}, {"A", Split::test}}), Error);
}

TEST(Preprocess, StereoFrameSplitsIntoTwoViews) {
    Image frame(512, 256, 1, 0.25);
    for (std::size_t y = 0; y < 256; ++y)
        for (std::size_t x = 256; x < 512; ++x) frame.at(0, y, x) = 0.75;
    PreprocessConfig cfg;
    cfg.input_size = 256;
    auto views = preprocess(frame, cfg);
    ASSERT_EQ(views.size(), 2u);
    EXPECT_EQ(views[0].width, 256u);
    EXPECT_EQ(views[0].pixels[0], 0.25);
    EXPECT_EQ(views[1].pixels[0], 0.75);
}

TEST(Preprocess, OddStereoWidthIsError) {
    Image frame(511, 256, 1);
    PreprocessConfig cfg;
    cfg.stereo = StereoMode::stereo;
    EXPECT_THROW(preprocess(frame, cfg), ShapeError);
}

TEST(Preprocess, WhiteImageIsOne) {
    auto path = temp_dir() / "white.pgm";
    {
        std::ofstream out(path, std::ios::binary);
        out << "P5\n# comment\n8 8\n255\n" << std::string(64, char(255));
    }
    PreprocessConfig cfg;
    cfg.input_size = 4;
    auto views = preprocess(path, cfg);
    ASSERT_EQ(views.size(), 1u);
    for (double v : views[0].pixels) EXPECT_EQ(v, 1.0);
}

TEST(Preprocess, CheckerboardAreaMean) {
    Image board(4, 4, 1);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) board.at(0, y, x) = (x + y) % 2 ? 1.0 : 0.0;
    Image out = resize_area(board, 2, 2);
    for (double v : out.pixels) EXPECT_EQ(v, 0.5);
}

TEST(Preprocess, NonIntegerAreaAverage) {
    // 3 -> 2: output pixel 0 covers input [0, 1.5)
    Image row(3, 1, 1);
    row.pixels = {0.0, 0.6, 0.9};
    Image out = resize_area(row, 2, 1);
    EXPECT_NEAR(out.pixels[0], (0.0 + 0.5 * 0.6) / 1.5, 1e-15);
    EXPECT_NEAR(out.pixels[1], (0.5 * 0.6 + 0.9) / 1.5, 1e-15);
}

TEST(Preprocess, UndecodableFileIsError) {
    auto path = temp_dir() / "bad.pgm";
    std::ofstream(path) << "GIF89a";
    EXPECT_THROW(read_pnm(path), FormatError);
    EXPECT_THROW(read_pnm(temp_dir() / "missing.pgm"), FormatError);
}

TEST(Pnm, WriteReadPreservesQuantizedValues) {
    Image img(5, 3, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = double(i % 256) / 255.0;
    auto path = temp_dir() / "rgb.ppm";
    write_pnm(img, path);
    Image back = read_pnm(path);
    ASSERT_EQ(back.channels, 3u);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1e-12);
}

TEST(Augment, AllOffIsIdentity) {
    Rng rng = keyed_rng(1);
    Image img(16, 16, 1);
    for (auto& v : img.pixels) v = uniform(rng, 0.0, 1.0);
    EXPECT_EQ(augment(img, AugmentParams{}), img);
}

TEST(Augment, DoubleFlipIsIdentity) {
    Rng rng = keyed_rng(2);
    Image img(7, 5, 1);
    for (auto& v : img.pixels) v = uniform(rng, 0.0, 1.0);
    EXPECT_EQ(flip_horizontal(flip_horizontal(img)), img);
    EXPECT_EQ(flip_vertical(flip_vertical(img)), img);
}

TEST(Augment, NeutralParametersAreIdentity) {
    Rng rng = keyed_rng(3);
    Image img(16, 16, 1);
    for (auto& v : img.pixels) v = uniform(rng, 0.0, 1.0);
    AugmentParams p;
    p.lighting = true;
    p.rotate = true;
    Image out = augment(img, p);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(out.pixels[i], img.pixels[i], 1e-12);
}

TEST(Augment, RangeAndDeterminism) {
    Image img(16, 16, 1);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = double(i % 17) / 16.0;
    for (std::uint64_t k = 0; k < 50; ++k) {
        Rng a = keyed_rng(7, {k}), b = keyed_rng(7, {k});
        Image x = augment(img, a), y = augment(img, b);
        EXPECT_EQ(x, y);
        for (double v : x.pixels) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Augment, RotationByNinetyDegreesPermutesPixels) {
    Image img(5, 5, 1);
    for (std::size_t i = 0; i < 25; ++i) img.pixels[i] = double(i) / 24.0;
    Image r = rotate_image(img, 90.0);
    // output (x, y) samples source (y, 4 - x)
    for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 5; ++x) EXPECT_NEAR(r.at(0, y, x), img.at(0, 4 - x, y), 1e-12);
}
