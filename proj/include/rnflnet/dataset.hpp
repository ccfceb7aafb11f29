#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rnflnet/dataio.hpp"
#include "rnflnet/error.hpp"
#include "rnflnet/image.hpp"
#include "rnflnet/rng.hpp"
#include "rnflnet/tensor.hpp"

namespace rnfl {

// One preprocessed photograph view linked to its OCT measurement. Stereo
// frames contribute two samples that share every field except `view`.
struct SamplePair {
    Image image;
    double target_um = 0.0;
    std::string patient_id;
    Eye eye = Eye::OD;
    Date photo_date{};
    std::size_t row = 0;   // index into the paired manifest rows
    std::size_t view = 0;  // 0 = left/mono, 1 = right
    Diagnosis diagnosis = Diagnosis::normal;
    std::optional<NormativeClass> normative_class;
    double sap_md_db = 0.0;
};

// Binary target of the classification head: borderline counts as within
// normal limits.
inline bool is_abnormal(NormativeClass c) { return c == NormativeClass::outside; }

struct Dataset {
    std::vector<ManifestRow> rows;
    std::vector<SamplePair> samples;
};

// Pairs the manifest, keeps the rows whose patient is assigned to `split`, and
// decodes every view. Photo paths are resolved against `base_dir`.
inline Dataset load_split(const std::vector<ManifestRow>& manifest_rows, const SplitAssignment& splits, Split split,
                          const std::filesystem::path& base_dir, const PreprocessConfig& cfg) {
    std::vector<std::pair<std::string, Split>> seen;
    for (const auto& r : manifest_rows) {
        auto it = splits.find(r.patient_id);
        if (it == splits.end()) throw ConfigError("patient '" + r.patient_id + "' has no split assignment");
        seen.emplace_back(r.patient_id, it->second);
    }
    check_no_leakage(seen);

    Dataset out;
    for (const auto& r : pair_manifest(manifest_rows).rows) {
        if (splits.at(r.patient_id) != split) continue;
        const std::size_t row = out.rows.size();
        out.rows.push_back(r);
        const auto path = std::filesystem::path(r.photo_path).is_absolute() ? std::filesystem::path(r.photo_path)
                                                                             : base_dir / r.photo_path;
        auto views = preprocess(path, cfg);
        for (std::size_t v = 0; v < views.size(); ++v) {
            SamplePair s;
            s.image = std::move(views[v]);
            s.target_um = r.oct_avg_rnfl_um;
            s.patient_id = r.patient_id;
            s.eye = r.eye;
            s.photo_date = r.photo_date;
            s.row = row;
            s.view = v;
            s.diagnosis = r.diagnosis;
            s.normative_class = r.normative_class;
            s.sap_md_db = r.sap_md_db;
            out.samples.push_back(std::move(s));
        }
    }
    return out;
}

// Stacks the selected samples into an [N,C,H,W] tensor. When `augment_seed`
// is set, each sample is augmented with a stream keyed by
// (seed, epoch, sample index), so results do not depend on batch layout.
inline Tensor make_batch(const std::vector<SamplePair>& samples, const std::vector<std::size_t>& indices,
                         std::optional<std::uint64_t> augment_seed = std::nullopt, std::uint64_t epoch = 0) {
    if (indices.empty()) throw ShapeError("empty batch");
    const Image& first = samples.at(indices[0]).image;
    const std::size_t c = first.channels, h = first.height, w = first.width, plane = c * h * w;
    Tensor t = Tensor::zeros({indices.size(), c, h, w});
    auto dst = t.data();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const Image& src = samples.at(indices[b]).image;
        if (src.channels != c || src.height != h || src.width != w)
            throw ShapeError("batch samples differ in shape");
        if (augment_seed) {
            Rng rng = keyed_rng(*augment_seed, {0x617567ULL, epoch, indices[b]});
            const Image aug = augment(src, rng);
            std::copy(aug.pixels.begin(), aug.pixels.end(), dst.begin() + std::ptrdiff_t(b * plane));
        } else {
            std::copy(src.pixels.begin(), src.pixels.end(), dst.begin() + std::ptrdiff_t(b * plane));
        }
    }
    return t;
}

}  // namespace rnfl
