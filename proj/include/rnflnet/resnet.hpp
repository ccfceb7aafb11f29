#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rnflnet/error.hpp"
#include "rnflnet/ops.hpp"
#include "rnflnet/rng.hpp"
#include "rnflnet/tensor.hpp"

namespace rnfl {

enum class HeadKind { regression, classification, both };

inline std::string to_string(HeadKind h) {
    switch (h) {
        case HeadKind::regression: return "regression";
        case HeadKind::classification: return "classification";
        case HeadKind::both: return "both";
    }
    return "?";
}

inline HeadKind parse_head_kind(const std::string& s) {
    if (s == "regression") return HeadKind::regression;
    if (s == "classification") return HeadKind::classification;
    if (s == "both") return HeadKind::both;
    throw ConfigError("unknown head kind '" + s + "' (expected regression, classification or both)");
}

struct ModelConfig {
    std::size_t input_size = 64;
    std::size_t in_channels = 1;
    std::size_t stem_channels = 8;
    std::vector<std::size_t> blocks_per_stage{1, 1};
    std::vector<std::size_t> channels_per_stage{8, 16};
    HeadKind head = HeadKind::regression;

    std::size_t stages() const { return blocks_per_stage.size(); }
    // stem conv (stride 2) + maxpool + one stride-2 entry per stage after the first
    std::size_t downsample_factor() const { return std::size_t{1} << (stages() + 1); }
    std::size_t feature_extent() const { return input_size / downsample_factor(); }
    bool has_regression() const { return head != HeadKind::classification; }
    bool has_classification() const { return head != HeadKind::regression; }

    void validate() const {
        if (blocks_per_stage.empty() || blocks_per_stage.size() != channels_per_stage.size())
            throw ConfigError("model config: blocks_per_stage and channels_per_stage must be non-empty and equal length");
        for (auto b : blocks_per_stage)
            if (b == 0) throw ConfigError("model config: every stage needs at least one block");
        for (auto c : channels_per_stage)
            if (c == 0) throw ConfigError("model config: channel counts must be positive");
        if (in_channels == 0 || stem_channels == 0) throw ConfigError("model config: channel counts must be positive");
        if (input_size == 0 || input_size % downsample_factor() != 0)
            throw ConfigError("model config: input_size " + std::to_string(input_size) + " must be divisible by " +
                              std::to_string(downsample_factor()));
    }

    static ModelConfig micro() { return ModelConfig{}; }

    static ModelConfig resnet34() {
        ModelConfig c;
        c.input_size = 256;
        c.in_channels = 3;
        c.stem_channels = 64;
        c.blocks_per_stage = {3, 4, 6, 3};
        c.channels_per_stage = {64, 128, 256, 512};
        return c;
    }

    static ModelConfig preset(const std::string& name) {
        if (name == "micro") return micro();
        if (name == "resnet34") return resnet34();
        throw ConfigError("unknown model preset '" + name + "' (expected micro or resnet34)");
    }

    bool operator==(const ModelConfig&) const = default;
};

// conv (no bias) followed by batch norm
struct ConvBn {
    Tensor weight, gamma, beta, running_mean, running_var;
    std::size_t stride = 1, pad = 0;
};

struct BasicBlock {
    ConvBn conv1, conv2;
    std::optional<ConvBn> shortcut;  // 1x1 projection when shapes change
};

struct LinearHead {
    Tensor weight, bias;
};

struct ForwardResult {
    Tensor regression;  // [N,1], z-scored thickness
    Tensor logit;       // [N,1], abnormality logit
    Tensor features;    // [N,C,h,w], output of the last residual block
};

inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEps = 1e-5;

struct TensorSlot {
    std::string group;
    std::string name;
    Tensor tensor;
    bool is_parameter;  // false for running statistics
};

class Model {
public:
    Model() = default;

    const ModelConfig& config() const { return config_; }

    double target_mean = 0.0;
    double target_sd = 1.0;

    std::vector<std::string> group_names() const {
        std::vector<std::string> g{"stem"};
        for (std::size_t s = 0; s < stages_.size(); ++s) g.push_back("stage_" + std::to_string(s + 1));
        if (head_reg_) g.push_back("head_regression");
        if (head_cls_) g.push_back("head_classification");
        return g;
    }

    // Exactly the named groups become trainable; every other group is frozen.
    void set_trainable(const std::set<std::string>& groups) {
        const auto names = group_names();
        for (const auto& g : groups)
            if (std::find(names.begin(), names.end(), g) == names.end())
                throw ConfigError("unknown layer group '" + g + "'");
        trainable_.clear();
        for (const auto& g : names) trainable_[g] = groups.count(g) > 0;
        for (auto& slot : slots())
            if (slot.is_parameter) slot.tensor.set_requires_grad(trainable_.at(slot.group));
    }

    void set_all_trainable() {
        const auto names = group_names();
        set_trainable(std::set<std::string>(names.begin(), names.end()));
    }

    bool is_trainable(const std::string& group) const {
        auto it = trainable_.find(group);
        if (it == trainable_.end()) throw ConfigError("unknown layer group '" + group + "'");
        return it->second;
    }

    std::set<std::string> trainable_groups() const {
        std::set<std::string> out;
        for (const auto& [g, on] : trainable_)
            if (on) out.insert(g);
        return out;
    }

    // Every stored tensor in declared (checkpoint) order. Tensors are handles,
    // so mutating the returned slots mutates the model.
    std::vector<TensorSlot> slots() const {
        std::vector<TensorSlot> out;
        auto add_convbn = [&](const std::string& group, const std::string& prefix, const ConvBn& c) {
            out.push_back({group, prefix + ".weight", c.weight, true});
            out.push_back({group, prefix + ".bn.gamma", c.gamma, true});
            out.push_back({group, prefix + ".bn.beta", c.beta, true});
            out.push_back({group, prefix + ".bn.running_mean", c.running_mean, false});
            out.push_back({group, prefix + ".bn.running_var", c.running_var, false});
        };
        add_convbn("stem", "stem.conv", stem_);
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            const std::string group = "stage_" + std::to_string(s + 1);
            for (std::size_t b = 0; b < stages_[s].size(); ++b) {
                const std::string p = group + ".block" + std::to_string(b + 1);
                add_convbn(group, p + ".conv1", stages_[s][b].conv1);
                add_convbn(group, p + ".conv2", stages_[s][b].conv2);
                if (stages_[s][b].shortcut) add_convbn(group, p + ".shortcut", *stages_[s][b].shortcut);
            }
        }
        if (head_reg_) {
            out.push_back({"head_regression", "head_regression.weight", head_reg_->weight, true});
            out.push_back({"head_regression", "head_regression.bias", head_reg_->bias, true});
        }
        if (head_cls_) {
            out.push_back({"head_classification", "head_classification.weight", head_cls_->weight, true});
            out.push_back({"head_classification", "head_classification.bias", head_cls_->bias, true});
        }
        return out;
    }

    std::vector<TensorSlot> parameters() const {
        auto all = slots();
        std::erase_if(all, [](const TensorSlot& s) { return !s.is_parameter; });
        return all;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& s : slots())
            if (s.is_parameter) n += s.tensor.numel();
        return n;
    }

    // parameters plus batch-norm running statistics
    std::size_t state_count() const {
        std::size_t n = 0;
        for (const auto& s : slots()) n += s.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& s : slots()) s.tensor.zero_grad();
    }

    ForwardResult forward(const Tensor& batch, BnMode mode) const {
        check_input(batch);
        auto bn = [&](const Tensor& x, const ConvBn& c, const std::string& group) {
            BatchNormOptions opt{mode, kBnMomentum, kBnEps, mode == BnMode::train && trainable_.at(group)};
            Tensor rm = c.running_mean, rv = c.running_var;
            return batchnorm2d(x, c.gamma, c.beta, rm, rv, opt);
        };
        auto convbn = [&](const Tensor& x, const ConvBn& c, const std::string& group) {
            return bn(conv2d(x, c.weight, Tensor{}, c.stride, c.pad), c, group);
        };

        Tensor x = maxpool2x2(relu(convbn(batch, stem_, "stem")));
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            const std::string group = "stage_" + std::to_string(s + 1);
            for (const auto& blk : stages_[s]) {
                Tensor f = relu(convbn(x, blk.conv1, group));
                f = convbn(f, blk.conv2, group);
                Tensor sc = blk.shortcut ? convbn(x, *blk.shortcut, group) : x;
                x = relu(add(f, sc));
            }
        }
        ForwardResult r;
        r.features = x;
        Tensor pooled = global_avg_pool(x);
        if (head_reg_) r.regression = linear(pooled, head_reg_->weight, head_reg_->bias);
        if (head_cls_) r.logit = linear(pooled, head_cls_->weight, head_cls_->bias);
        return r;
    }

    void check_input(const Tensor& batch) const {
        if (batch.rank() != 4 || batch.dim(1) != config_.in_channels || batch.dim(2) != config_.input_size ||
            batch.dim(3) != config_.input_size)
            throw ShapeError("model expects input [N," + std::to_string(config_.in_channels) + "," +
                             std::to_string(config_.input_size) + "," + std::to_string(config_.input_size) +
                             "], got " + shape_str(batch.shape()));
        if (batch.dim(0) == 0) throw ShapeError("empty batch");
    }

    // Deep copy: no tensor storage is shared with the original.
    Model clone() const {
        Model m = *this;
        auto copy = [](ConvBn& c) {
            c.weight = c.weight.clone();
            c.gamma = c.gamma.clone();
            c.beta = c.beta.clone();
            c.running_mean = c.running_mean.clone();
            c.running_var = c.running_var.clone();
        };
        copy(m.stem_);
        for (auto& stage : m.stages_)
            for (auto& b : stage) {
                copy(b.conv1);
                copy(b.conv2);
                if (b.shortcut) copy(*b.shortcut);
            }
        for (auto* h : {&m.head_reg_, &m.head_cls_})
            if (*h) {
                (*h)->weight = (*h)->weight.clone();
                (*h)->bias = (*h)->bias.clone();
            }
        return m;
    }

    // Direct access for tests and Grad-CAM tooling.
    LinearHead* regression_head() { return head_reg_ ? &*head_reg_ : nullptr; }
    LinearHead* classification_head() { return head_cls_ ? &*head_cls_ : nullptr; }
    std::vector<std::vector<BasicBlock>>& stages() { return stages_; }

    friend Model build_model(const ModelConfig& config, std::uint64_t seed);

private:
    ModelConfig config_;
    ConvBn stem_;
    std::vector<std::vector<BasicBlock>> stages_;
    std::optional<LinearHead> head_reg_, head_cls_;
    std::map<std::string, bool> trainable_;
};

// He-initialized network; deterministic in (config, seed). All groups start trainable.
inline Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    std::uint64_t counter = 0;
    auto he_conv = [&](std::size_t out, std::size_t in, std::size_t k) {
        Rng rng = keyed_rng(seed, {counter++});
        Tensor w(Shape{out, in, k, k});
        const double sd = std::sqrt(2.0 / double(in * k * k));
        for (auto& v : w.values()) v = normal(rng, 0.0, sd);
        return w;
    };
    auto make_convbn = [&](std::size_t out, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
        ConvBn c;
        c.weight = he_conv(out, in, k);
        c.gamma = Tensor::ones({out});
        c.beta = Tensor::zeros({out});
        c.running_mean = Tensor::zeros({out});
        c.running_var = Tensor::ones({out});
        c.stride = stride;
        c.pad = pad;
        return c;
    };
    auto make_head = [&](std::size_t in) {
        Rng rng = keyed_rng(seed, {counter++});
        LinearHead h;
        h.weight = Tensor(Shape{1, in});
        for (auto& v : h.weight.values()) v = normal(rng, 0.0, std::sqrt(1.0 / double(in)));
        h.bias = Tensor::zeros({1});
        return h;
    };

    m.stem_ = make_convbn(config.stem_channels, config.in_channels, 7, 2, 3);
    std::size_t channels = config.stem_channels;
    for (std::size_t s = 0; s < config.stages(); ++s) {
        std::vector<BasicBlock> stage;
        const std::size_t out = config.channels_per_stage[s];
        for (std::size_t b = 0; b < config.blocks_per_stage[s]; ++b) {
            const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
            BasicBlock blk;
            blk.conv1 = make_convbn(out, channels, 3, stride, 1);
            blk.conv2 = make_convbn(out, out, 3, 1, 1);
            if (stride != 1 || channels != out) blk.shortcut = make_convbn(out, channels, 1, stride, 0);
            stage.push_back(std::move(blk));
            channels = out;
        }
        m.stages_.push_back(std::move(stage));
    }
    if (config.has_regression()) m.head_reg_ = make_head(channels);
    if (config.has_classification()) m.head_cls_ = make_head(channels);
    m.set_all_trainable();
    return m;
}

// Predicted thickness in micrometers, one value per sample.
inline std::vector<double> predict(const Model& model, const Tensor& batch) {
    if (!model.config().has_regression()) throw ConfigError("model has no regression head");
    NoGradGuard ng;
    const auto r = model.forward(batch, BnMode::eval);
    std::vector<double> out(batch.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = model.target_mean + model.target_sd * r.regression[i];
    return out;
}

// Probability of abnormality (sigmoid of the classification logit).
inline std::vector<double> predict_prob(const Model& model, const Tensor& batch) {
    if (!model.config().has_classification()) throw ConfigError("model has no classification head");
    NoGradGuard ng;
    const auto r = model.forward(batch, BnMode::eval);
    Tensor p = sigmoid(r.logit);
    return p.values();
}

// ---------------------------------------------------------------------------
// Checkpoints: text header terminated by a blank line, then every tensor of
// Model::slots() as raw little-endian float64.

inline constexpr const char* kCheckpointMagic = "RNFLNET-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline double parse_double(const std::string& s, const std::string& what) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw FormatError("cannot parse " + what + " '" + s + "'");
    return v;
}

inline std::size_t parse_size(const std::string& s, const std::string& what) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
        throw FormatError("cannot parse " + what + " '" + s + "'");
    return v;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

inline std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xff) << (8 * (7 - i));
        return r;
    }
    return v;
}

}  // namespace detail

inline std::string checkpoint_header(const Model& m) {
    const auto& c = m.config();
    std::ostringstream os;
    os << kCheckpointMagic << '\n';
    os << "format_version=" << kCheckpointVersion << '\n';
    os << "input_size=" << c.input_size << '\n';
    os << "in_channels=" << c.in_channels << '\n';
    os << "stem_channels=" << c.stem_channels << '\n';
    os << "blocks_per_stage=" << detail::join_sizes(c.blocks_per_stage) << '\n';
    os << "channels_per_stage=" << detail::join_sizes(c.channels_per_stage) << '\n';
    os << "head=" << to_string(c.head) << '\n';
    os << "target_mean=" << detail::fmt_double(m.target_mean) << '\n';
    os << "target_sd=" << detail::fmt_double(m.target_sd) << '\n';
    const auto groups = m.group_names();
    os << "groups=";
    for (std::size_t i = 0; i < groups.size(); ++i) os << (i ? "," : "") << groups[i];
    os << "\ntrainable=";
    bool first = true;
    for (const auto& g : groups)
        if (m.is_trainable(g)) {
            os << (first ? "" : ",") << g;
            first = false;
        }
    os << "\nvalues=" << m.state_count() << "\n\n";
    return os.str();
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
    const std::string header = checkpoint_header(m);
    out.write(header.data(), std::streamsize(header.size()));
    for (const auto& slot : m.slots())
        for (double v : slot.tensor.data()) {
            std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
            out.write(reinterpret_cast<const char*>(&bits), 8);
        }
    if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kCheckpointMagic)
        throw FormatError("not a checkpoint (bad magic) in " + path.string());
    std::map<std::string, std::string> kv;
    bool terminated = false;
    while (std::getline(in, line)) {
        if (line.empty()) {
            terminated = true;
            break;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("malformed checkpoint header line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    if (!terminated) throw FormatError("checkpoint header not terminated: " + path.string());
    auto get = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw FormatError("checkpoint header missing '" + k + "'");
        return it->second;
    };
    const auto version = detail::parse_size(get("format_version"), "format_version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");

    ModelConfig c;
    c.input_size = detail::parse_size(get("input_size"), "input_size");
    c.in_channels = detail::parse_size(get("in_channels"), "in_channels");
    c.stem_channels = detail::parse_size(get("stem_channels"), "stem_channels");
    c.blocks_per_stage.clear();
    for (const auto& s : detail::split(get("blocks_per_stage"), ','))
        c.blocks_per_stage.push_back(detail::parse_size(s, "blocks_per_stage"));
    c.channels_per_stage.clear();
    for (const auto& s : detail::split(get("channels_per_stage"), ','))
        c.channels_per_stage.push_back(detail::parse_size(s, "channels_per_stage"));
    c.head = parse_head_kind(get("head"));

    Model m = build_model(c, 0);
    m.target_mean = detail::parse_double(get("target_mean"), "target_mean");
    m.target_sd = detail::parse_double(get("target_sd"), "target_sd");
    std::set<std::string> trainable;
    for (const auto& g : detail::split(get("trainable"), ','))
        if (!g.empty()) trainable.insert(g);
    m.set_trainable(trainable);
    if (detail::parse_size(get("values"), "values") != m.state_count())
        throw FormatError("checkpoint value count does not match its configuration");

    for (auto& slot : m.slots())
        for (double& v : slot.tensor.values()) {
            std::uint64_t bits = 0;
            if (!in.read(reinterpret_cast<char*>(&bits), 8))
                throw FormatError("checkpoint truncated while reading " + slot.name);
            v = std::bit_cast<double>(detail::to_le(bits));
        }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");
    return m;
}

}  // namespace rnfl
