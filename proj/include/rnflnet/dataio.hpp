#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "rnflnet/error.hpp"
#include "rnflnet/rng.hpp"

namespace rnfl {

using Date = std::chrono::sys_days;

inline Date parse_date(const std::string& s) {
    int y = 0;
    unsigned m = 0, d = 0;
    auto bad = [&] { return FormatError("malformed date '" + s + "' (expected YYYY-MM-DD)"); };
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') throw bad();
    auto num = [&](std::size_t off, std::size_t len, auto& out) {
        auto [p, ec] = std::from_chars(s.data() + off, s.data() + off + len, out);
        if (ec != std::errc{} || p != s.data() + off + len) throw bad();
    };
    num(0, 4, y);
    num(5, 2, m);
    num(8, 2, d);
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!ymd.ok()) throw bad();
    return Date{ymd};
}

inline std::string format_date(Date d) {
    const std::chrono::year_month_day ymd{d};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", int(ymd.year()), unsigned(ymd.month()), unsigned(ymd.day()));
    return buf;
}

enum class Eye { OD, OS };
enum class Diagnosis { normal, suspect, glaucoma };
enum class NormativeClass { within, borderline, outside };
enum class Split { train, valid, test };

inline std::string to_string(Eye e) { return e == Eye::OD ? "OD" : "OS"; }
inline std::string to_string(Diagnosis d) {
    switch (d) {
        case Diagnosis::normal: return "normal";
        case Diagnosis::suspect: return "suspect";
        case Diagnosis::glaucoma: return "glaucoma";
    }
    return "?";
}
inline std::string to_string(NormativeClass c) {
    switch (c) {
        case NormativeClass::within: return "within";
        case NormativeClass::borderline: return "borderline";
        case NormativeClass::outside: return "outside";
    }
    return "?";
}
inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
    }
    return "?";
}

inline Eye parse_eye(const std::string& s) {
    if (s == "OD") return Eye::OD;
    if (s == "OS") return Eye::OS;
    throw FormatError("eye must be OD or OS, got '" + s + "'");
}
inline Diagnosis parse_diagnosis(const std::string& s) {
    if (s == "normal") return Diagnosis::normal;
    if (s == "suspect") return Diagnosis::suspect;
    if (s == "glaucoma") return Diagnosis::glaucoma;
    throw FormatError("diagnosis must be normal, suspect or glaucoma, got '" + s + "'");
}
inline NormativeClass parse_normative(const std::string& s) {
    if (s == "within") return NormativeClass::within;
    if (s == "borderline") return NormativeClass::borderline;
    if (s == "outside") return NormativeClass::outside;
    throw FormatError("normative_class must be within, borderline or outside, got '" + s + "'");
}
inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "valid") return Split::valid;
    if (s == "test") return Split::test;
    throw FormatError("split must be train, valid or test, got '" + s + "'");
}

struct ManifestRow {
    std::string patient_id;
    Eye eye = Eye::OD;
    std::string photo_path;
    Date photo_date{};
    Date oct_date{};
    double oct_avg_rnfl_um = 0.0;
    double oct_quality_db = 0.0;
    Diagnosis diagnosis = Diagnosis::normal;
    double sap_md_db = 0.0;
    double sap_psd_db = 0.0;
    std::optional<NormativeClass> normative_class;

    bool operator==(const ManifestRow&) const = default;
};

inline const std::vector<std::string>& manifest_columns() {
    static const std::vector<std::string> cols{
        "patient_id", "eye",        "photo_path", "photo_date", "oct_date",       "oct_avg_rnfl_um",
        "oct_quality_db", "diagnosis", "sap_md_db", "sap_psd_db", "normative_class"};
    return cols;
}

inline constexpr double kMinOctQualityDb = 15.0;
inline constexpr int kMaxPairingDays = 183;

struct LogEntry {
    std::size_t row;  // 1-based data row number (header excluded); 0 when not row-specific
    std::string message;
};

struct ManifestLoad {
    std::vector<ManifestRow> rows;
    std::vector<LogEntry> exclusions;
    std::vector<LogEntry> warnings;
};

namespace detail {

// Splits one CSV record; double quotes protect commas and "" escapes a quote.
inline std::vector<std::string> csv_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

inline double parse_float_field(const std::string& s, const std::string& col, std::size_t row) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v))
        throw FormatError("row " + std::to_string(row) + ": cannot parse " + col + " value '" + s + "'");
    return v;
}

inline std::string format_float(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

}  // namespace detail

inline ManifestLoad parse_manifest(std::istream& in) {
    ManifestLoad out;
    std::string line;
    if (!std::getline(in, line)) throw FormatError("manifest is empty (no header)");
    const auto header = detail::csv_fields(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const auto& name : manifest_columns())
        if (name != "normative_class" && !col.count(name))
            throw FormatError("manifest header is missing column '" + name + "'");

    std::set<std::tuple<std::string, Eye, Date, Date>> seen;
    std::size_t rowno = 0;
    while (std::getline(in, line)) {
        ++rowno;
        if (line.empty() || line == "\r") continue;
        const auto f = detail::csv_fields(line);
        auto field = [&](const std::string& name) -> const std::string& {
            const auto idx = col.at(name);
            if (idx >= f.size())
                throw FormatError("row " + std::to_string(rowno) + ": missing value for column '" + name + "'");
            return f[idx];
        };
        auto wrap = [&](auto&& fn) {
            try {
                return fn();
            } catch (const FormatError& e) {
                const std::string msg = e.what();
                if (msg.rfind("row ", 0) == 0) throw;
                throw FormatError("row " + std::to_string(rowno) + ": " + msg);
            }
        };
        ManifestRow r;
        r.patient_id = field("patient_id");
        if (r.patient_id.empty()) throw FormatError("row " + std::to_string(rowno) + ": empty patient_id");
        r.eye = wrap([&] { return parse_eye(field("eye")); });
        r.photo_path = field("photo_path");
        r.photo_date = wrap([&] { return parse_date(field("photo_date")); });
        r.oct_date = wrap([&] { return parse_date(field("oct_date")); });
        r.oct_avg_rnfl_um = detail::parse_float_field(field("oct_avg_rnfl_um"), "oct_avg_rnfl_um", rowno);
        r.oct_quality_db = detail::parse_float_field(field("oct_quality_db"), "oct_quality_db", rowno);
        r.diagnosis = wrap([&] { return parse_diagnosis(field("diagnosis")); });
        r.sap_md_db = detail::parse_float_field(field("sap_md_db"), "sap_md_db", rowno);
        r.sap_psd_db = detail::parse_float_field(field("sap_psd_db"), "sap_psd_db", rowno);
        if (col.count("normative_class")) {
            const auto& nc = field("normative_class");
            if (!nc.empty()) r.normative_class = wrap([&] { return parse_normative(nc); });
        }

        if (r.oct_quality_db < kMinOctQualityDb) {
            out.exclusions.push_back({rowno, "low signal"});
            continue;
        }
        if (!(r.oct_avg_rnfl_um > 20.0 && r.oct_avg_rnfl_um < 200.0)) {
            out.exclusions.push_back({rowno, "implausible RNFL thickness"});
            continue;
        }
        if (!seen.insert({r.patient_id, r.eye, r.photo_date, r.oct_date}).second) {
            out.warnings.push_back({rowno, "duplicate (patient, eye, photo_date, oct_date); keeping first"});
            continue;
        }
        out.rows.push_back(std::move(r));
    }
    return out;
}

inline ManifestLoad load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest " + path.string());
    return parse_manifest(in);
}

inline void write_manifest(const std::vector<ManifestRow>& rows, std::ostream& out) {
    const auto& cols = manifest_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& r : rows) {
        out << detail::csv_escape(r.patient_id) << ',' << to_string(r.eye) << ',' << detail::csv_escape(r.photo_path)
            << ',' << format_date(r.photo_date) << ',' << format_date(r.oct_date) << ','
            << detail::format_float(r.oct_avg_rnfl_um) << ',' << detail::format_float(r.oct_quality_db) << ','
            << to_string(r.diagnosis) << ',' << detail::format_float(r.sap_md_db) << ','
            << detail::format_float(r.sap_psd_db) << ','
            << (r.normative_class ? to_string(*r.normative_class) : std::string()) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Photo <-> OCT pairing

struct PhotoRecord {
    std::string patient_id;
    Eye eye = Eye::OD;
    Date date{};
};

struct OctRecord {
    std::string patient_id;
    Eye eye = Eye::OD;
    Date date{};
};

// For every photo, index of the OCT of the same (patient, eye) with the
// smallest |date difference|, or nullopt when none lies within 183 days.
// Equidistant candidates resolve to the earlier OCT, then to the lower index
// among same-date duplicates, so the outcome does not depend on list order
// beyond that final tie.
inline std::vector<std::optional<std::size_t>> pair_photos_to_oct(const std::vector<PhotoRecord>& photos,
                                                                  const std::vector<OctRecord>& octs) {
    std::map<std::pair<std::string, Eye>, std::vector<std::size_t>> by_eye;
    for (std::size_t i = 0; i < octs.size(); ++i) by_eye[{octs[i].patient_id, octs[i].eye}].push_back(i);
    std::vector<std::optional<std::size_t>> out(photos.size());
    for (std::size_t p = 0; p < photos.size(); ++p) {
        auto it = by_eye.find({photos[p].patient_id, photos[p].eye});
        if (it == by_eye.end()) continue;
        std::optional<std::size_t> best;
        long best_gap = 0;
        for (std::size_t o : it->second) {
            const long gap = std::abs((octs[o].date - photos[p].date).count());
            if (gap > kMaxPairingDays) continue;
            const bool better = !best || gap < best_gap ||
                                (gap == best_gap && (octs[o].date < octs[*best].date ||
                                                     (octs[o].date == octs[*best].date && o < *best)));
            if (better) {
                best = o;
                best_gap = gap;
            }
        }
        out[p] = best;
    }
    return out;
}

struct PairingResult {
    std::vector<ManifestRow> rows;  // one per paired photo, sorted by (patient, eye, photo_date, path)
    std::vector<std::string> dropped;
};

// Treats manifest rows as a pool of photos and a pool of OCT scans and
// re-pairs every distinct photo with its closest OCT.
inline PairingResult pair_manifest(const std::vector<ManifestRow>& rows) {
    std::vector<const ManifestRow*> photo_rows, oct_rows;
    std::set<std::tuple<std::string, Eye, std::string>> photo_seen;
    std::set<std::tuple<std::string, Eye, Date>> oct_seen;
    for (const auto& r : rows) {
        if (photo_seen.insert({r.patient_id, r.eye, r.photo_path}).second) photo_rows.push_back(&r);
        if (oct_seen.insert({r.patient_id, r.eye, r.oct_date}).second) oct_rows.push_back(&r);
    }
    std::vector<PhotoRecord> photos;
    std::vector<OctRecord> octs;
    for (auto* r : photo_rows) photos.push_back({r->patient_id, r->eye, r->photo_date});
    for (auto* r : oct_rows) octs.push_back({r->patient_id, r->eye, r->oct_date});
    const auto match = pair_photos_to_oct(photos, octs);

    PairingResult out;
    for (std::size_t i = 0; i < photo_rows.size(); ++i) {
        if (!match[i]) {
            out.dropped.push_back(photo_rows[i]->photo_path + ": no OCT within " + std::to_string(kMaxPairingDays) +
                                  " days");
            continue;
        }
        const ManifestRow& oct = *oct_rows[*match[i]];
        ManifestRow r = oct;
        r.photo_path = photo_rows[i]->photo_path;
        r.photo_date = photo_rows[i]->photo_date;
        out.rows.push_back(std::move(r));
    }
    std::sort(out.rows.begin(), out.rows.end(), [](const ManifestRow& a, const ManifestRow& b) {
        return std::tie(a.patient_id, a.eye, a.photo_date, a.photo_path) <
               std::tie(b.patient_id, b.eye, b.photo_date, b.photo_path);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Patient-level splitting

struct SplitRatios {
    double train = 0.7, valid = 0.1, test = 0.2;
};

using SplitAssignment = std::map<std::string, Split>;

// Every patient lands in exactly one split. Patients are shuffled with the
// seed and cut into contiguous blocks whose sizes round the target counts.
inline SplitAssignment split_by_patient(const std::vector<std::string>& patient_ids, const SplitRatios& ratios,
                                        std::uint64_t seed) {
    const double total = ratios.train + ratios.valid + ratios.test;
    if (ratios.train < 0 || ratios.valid < 0 || ratios.test < 0 || std::abs(total - 1.0) > 1e-9)
        throw ConfigError("split ratios must be non-negative and sum to 1");
    std::vector<std::string> patients(patient_ids.begin(), patient_ids.end());
    std::sort(patients.begin(), patients.end());
    patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
    const std::size_t n = patients.size();
    const std::size_t nonzero = (ratios.train > 0) + (ratios.valid > 0) + (ratios.test > 0);
    if (n < nonzero || n < 3)
        throw ConfigError("split_by_patient: " + std::to_string(n) + " patients cannot fill " +
                          std::to_string(nonzero) + " splits (need at least 3 patients)");

    auto count = [&](double r) {
        if (r <= 0) return std::size_t{0};
        return std::max<std::size_t>(1, std::size_t(std::llround(r * double(n))));
    };
    std::size_t n_test = count(ratios.test), n_valid = count(ratios.valid);
    while (n_test + n_valid > n - (ratios.train > 0 ? 1 : 0)) {
        if (n_valid > (ratios.valid > 0 ? 1u : 0u) && n_valid >= n_test)
            --n_valid;
        else
            --n_test;
    }
    if (ratios.train <= 0) n_test = n - n_valid;

    Rng rng = keyed_rng(seed, {0x73706c6974ULL});
    std::shuffle(patients.begin(), patients.end(), rng);
    SplitAssignment out;
    for (std::size_t i = 0; i < n; ++i) {
        Split s = Split::train;
        if (i < n_test)
            s = Split::test;
        else if (i < n_test + n_valid)
            s = Split::valid;
        out[patients[i]] = s;
    }
    return out;
}

inline void write_splits(const SplitAssignment& a, std::ostream& out) {
    out << "patient_id,split\n";
    for (const auto& [p, s] : a) out << detail::csv_escape(p) << ',' << to_string(s) << '\n';
}

inline SplitAssignment read_splits(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("split file is empty");
    const auto header = detail::csv_fields(line);
    if (header.size() < 2 || header[0] != "patient_id" || header[1] != "split")
        throw FormatError("split file header must be 'patient_id,split'");
    SplitAssignment out;
    std::size_t rowno = 0;
    while (std::getline(in, line)) {
        ++rowno;
        if (line.empty()) continue;
        const auto f = detail::csv_fields(line);
        if (f.size() < 2) throw FormatError("split file row " + std::to_string(rowno) + " has too few fields");
        if (!out.emplace(f[0], parse_split(f[1])).second)
            throw FormatError("patient '" + f[0] + "' listed twice in split file");
    }
    return out;
}

// Throws when some patient would appear in more than one split.
inline void check_no_leakage(const std::vector<std::pair<std::string, Split>>& assignments) {
    std::map<std::string, Split> first;
    for (const auto& [p, s] : assignments) {
        auto [it, inserted] = first.emplace(p, s);
        if (!inserted && it->second != s)
            throw Error("leakage: patient '" + p + "' appears in both " + to_string(it->second) + " and " +
                        to_string(s));
    }
}

}  // namespace rnfl
