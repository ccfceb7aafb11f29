#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rnflnet/gradcheck.hpp"
#include "rnflnet/resnet.hpp"

using namespace rnfl;
namespace fs = std::filesystem;

namespace {

Tensor random_batch(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
    Rng rng = keyed_rng(seed);
    Tensor t(Shape{n, c.in_channels, c.input_size, c.input_size});
    for (auto& v : t.values()) v = uniform(rng, 0.0, 1.0);
    return t;
}

// Parameter count from the layer algebra: a KxK conv from I to O channels
// has O*I*K*K weights (no bias) and its batch norm adds gamma and beta.
std::size_t closed_form_params(const ModelConfig& c, std::size_t heads) {
    auto convbn = [](std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + 2 * out; };
    std::size_t n = convbn(c.in_channels, c.stem_channels, 7);
    std::size_t ch = c.stem_channels;
    for (std::size_t s = 0; s < c.stages(); ++s) {
        const std::size_t out = c.channels_per_stage[s];
        for (std::size_t b = 0; b < c.blocks_per_stage[s]; ++b) {
            const bool down = (s > 0 && b == 0) || ch != out;
            n += convbn(ch, out, 3) + convbn(out, out, 3) + (down ? convbn(ch, out, 1) : 0);
            ch = out;
        }
    }
    return n + heads * (ch + 1);
}

fs::path temp_path(const std::string& name) {
    auto dir = fs::temp_directory_path() / "rnflnet_tests";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(ModelConfig, PresetsAndValidation) {
    auto micro = ModelConfig::preset("micro");
    EXPECT_EQ(micro.blocks_per_stage, (std::vector<std::size_t>{1, 1}));
    EXPECT_EQ(micro.channels_per_stage, (std::vector<std::size_t>{8, 16}));
    EXPECT_EQ(micro.input_size, 64u);
    auto r34 = ModelConfig::preset("resnet34");
    EXPECT_EQ(r34.blocks_per_stage, (std::vector<std::size_t>{3, 4, 6, 3}));
    EXPECT_EQ(r34.input_size, 256u);

    ModelConfig bad = micro;
    bad.input_size = 60;  // not divisible by 8
    EXPECT_THROW(build_model(bad, 0), ConfigError);
    bad = micro;
    bad.channels_per_stage = {8};
    EXPECT_THROW(build_model(bad, 0), ConfigError);
    EXPECT_THROW(ModelConfig::preset("vgg"), ConfigError);
}

TEST(BuildModel, DeterministicInSeed) {
    Model a = build_model(ModelConfig::micro(), 42);
    Model b = build_model(ModelConfig::micro(), 42);
    Model c = build_model(ModelConfig::micro(), 43);
    auto sa = a.slots(), sb = b.slots(), sc = c.slots();
    bool any_diff = false;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        ASSERT_EQ(sa[i].tensor.values(), sb[i].tensor.values()) << sa[i].name;
        if (sa[i].tensor.values() != sc[i].tensor.values()) any_diff = true;
    }
    EXPECT_TRUE(any_diff);
}

TEST(BuildModel, MicroForwardShape) {
    Model m = build_model(ModelConfig::micro(), 1);
    auto out = predict(m, random_batch(m.config(), 1, 5));
    ASSERT_EQ(out.size(), 1u);
    EXPECT_TRUE(std::isfinite(out[0]));
    auto r = m.forward(random_batch(m.config(), 2, 6), BnMode::eval);
    EXPECT_EQ(r.features.shape(), (Shape{2, 16, 8, 8}));
}

TEST(BuildModel, ParameterCountsMatchLayerAlgebra) {
    Model micro = build_model(ModelConfig::micro(), 0);
    EXPECT_EQ(micro.parameter_count(), closed_form_params(micro.config(), 1));

    Model r34 = build_model(ModelConfig::resnet34(), 0);
    const std::size_t expected = closed_form_params(r34.config(), 1);
    EXPECT_EQ(r34.parameter_count(), expected);
    // the ResNet-34 body alone (no classifier) is 21,284,672 parameters
    EXPECT_EQ(expected - 513, 21284672u);
    EXPECT_NEAR(double(r34.parameter_count()), 21.3e6, 0.05 * 21.3e6);
}

TEST(SetTrainable, UnknownGroupIsError) {
    Model m = build_model(ModelConfig::micro(), 0);
    EXPECT_THROW(m.set_trainable({"stage_9"}), ConfigError);
}

TEST(SetTrainable, FrozenGroupsGetNoGradient) {
    Model m = build_model(ModelConfig::micro(), 0);
    m.set_trainable({"stage_2", "head_regression"});
    Tensor x = random_batch(m.config(), 4, 1);
    auto r = m.forward(x, BnMode::train);
    backward(mse_loss(r.regression, Tensor({4, 1}, 0.3)));
    for (const auto& s : m.parameters()) {
        const bool trainable = s.group == "stage_2" || s.group == "head_regression";
        EXPECT_EQ(s.tensor.has_grad(), trainable) << s.name;
    }
}

TEST(SetTrainable, FrozenRunningStatsStayConstant) {
    Model m = build_model(ModelConfig::micro(), 0);
    m.set_trainable({"stage_2", "head_regression"});
    std::vector<std::vector<double>> before;
    for (const auto& s : m.slots()) before.push_back(s.tensor.values());
    m.forward(random_batch(m.config(), 4, 2), BnMode::train);
    auto after = m.slots();
    for (std::size_t i = 0; i < after.size(); ++i) {
        if (after[i].is_parameter) continue;
        if (after[i].group == "stage_2")
            EXPECT_NE(after[i].tensor.values(), before[i]) << after[i].name;
        else
            EXPECT_EQ(after[i].tensor.values(), before[i]) << after[i].name;
    }
}

TEST(Predict, ZeroHeadEmitsStoredMean) {
    Model m = build_model(ModelConfig::micro(), 3);
    m.target_mean = 82.5;
    m.target_sd = 16.8;
    for (auto& v : m.regression_head()->weight.values()) v = 0.0;
    m.regression_head()->bias[0] = 0.0;
    for (double p : predict(m, random_batch(m.config(), 3, 9))) EXPECT_EQ(p, 82.5);
}

TEST(Predict, BatchSizeInvariantAndOrderPreserving) {
    Model m = build_model(ModelConfig::micro(), 4);
    // non-trivial running statistics
    for (int i = 0; i < 3; ++i) m.forward(random_batch(m.config(), 8, 100 + i), BnMode::train);
    Tensor batch = random_batch(m.config(), 5, 11);
    auto all = predict(m, batch);
    ASSERT_EQ(all.size(), 5u);
    const std::size_t per = batch.numel() / 5;
    for (std::size_t i = 0; i < 5; ++i) {
        std::vector<double> one(batch.values().begin() + long(i * per), batch.values().begin() + long((i + 1) * per));
        Tensor single(Shape{1, 1, 64, 64}, one);
        EXPECT_NEAR(predict(m, single)[0], all[i], 1e-9);
    }
}

TEST(Predict, WrongInputSizeIsError) {
    Model m = build_model(ModelConfig::micro(), 0);
    EXPECT_THROW(predict(m, Tensor(Shape{1, 1, 32, 32})), ShapeError);
    EXPECT_THROW(predict(m, Tensor(Shape{1, 3, 64, 64})), ShapeError);
}

TEST(PredictProb, SigmoidOfLogit) {
    ModelConfig c = ModelConfig::micro();
    c.head = HeadKind::both;
    Model m = build_model(c, 5);
    auto* head = m.classification_head();
    for (auto& v : head->weight.values()) v = 0.0;
    head->bias[0] = 0.0;
    Tensor x = random_batch(c, 2, 3);
    for (double p : predict_prob(m, x)) EXPECT_EQ(p, 0.5);
    head->bias[0] = 40.0;
    for (double p : predict_prob(m, x)) EXPECT_NEAR(p, 1.0, 1e-12);

    Model r = build_model(c, 6);
    for (double p : predict_prob(r, random_batch(c, 6, 4))) {
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
    }
    Model reg_only = build_model(ModelConfig::micro(), 0);
    EXPECT_THROW(predict_prob(reg_only, x), ConfigError);
}

TEST(ResidualBlock, ZeroBranchComputesReluOfShortcut) {
    Model m = build_model(ModelConfig::micro(), 7);
    auto& blk = m.stages()[1][0];  // has a projection shortcut
    ASSERT_TRUE(blk.shortcut.has_value());
    Tensor x = random_batch(m.config(), 1, 8);
    Tensor in(Shape{1, 8, 16, 16});
    Rng rng = keyed_rng(9);
    for (auto& v : in.values()) v = uniform(rng, -1.0, 1.0);
    for (auto& v : blk.conv2.gamma.values()) v = 0.0;
    for (auto& v : blk.conv2.beta.values()) v = 0.0;
    NoGradGuard ng;
    BatchNormOptions ev{BnMode::eval, kBnMomentum, kBnEps, false};
    Tensor f = relu(batchnorm2d(conv2d(in, blk.conv1.weight, Tensor{}, 2, 1), blk.conv1.gamma, blk.conv1.beta,
                                blk.conv1.running_mean, blk.conv1.running_var, ev));
    f = batchnorm2d(conv2d(f, blk.conv2.weight, Tensor{}, 1, 1), blk.conv2.gamma, blk.conv2.beta,
                    blk.conv2.running_mean, blk.conv2.running_var, ev);
    for (double v : f.data()) EXPECT_EQ(v, 0.0);
    Tensor sc = batchnorm2d(conv2d(in, blk.shortcut->weight, Tensor{}, 2, 0), blk.shortcut->gamma,
                            blk.shortcut->beta, blk.shortcut->running_mean, blk.shortcut->running_var, ev);
    Tensor out = relu(add(f, sc));
    Tensor ref = relu(sc);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], ref[i]);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    ModelConfig c = ModelConfig::micro();
    c.head = HeadKind::both;
    Model m = build_model(c, 10);
    m.target_mean = 82.5;
    m.target_sd = 16.8;
    m.forward(random_batch(c, 4, 1), BnMode::train);  // move running stats
    m.set_trainable({"stage_2", "head_regression", "head_classification"});
    auto path = temp_path("roundtrip.ckpt");
    save_checkpoint(m, path);
    Model back = load_checkpoint(path);
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(back.target_mean, 82.5);
    EXPECT_EQ(back.target_sd, 16.8);
    EXPECT_EQ(back.trainable_groups(), m.trainable_groups());
    auto a = m.slots(), b = back.slots();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.values(), b[i].tensor.values()) << a[i].name;
    Tensor x = random_batch(c, 3, 2);
    EXPECT_EQ(predict(m, x), predict(back, x));
    EXPECT_EQ(predict_prob(m, x), predict_prob(back, x));
}

TEST(Checkpoint, ByteLengthIsHeaderPlusPayload) {
    Model m = build_model(ModelConfig::micro(), 0);
    auto path = temp_path("size.ckpt");
    save_checkpoint(m, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    const auto header_len = bytes.find("\n\n") + 2;
    // parameters plus running mean/var (2 per batch-norm channel)
    const auto& c = m.config();
    std::size_t bn_channels = c.stem_channels;
    std::size_t ch = c.stem_channels;
    for (std::size_t s = 0; s < c.stages(); ++s) {
        const auto out = c.channels_per_stage[s];
        bn_channels += 2 * out + ((s > 0 || ch != out) ? out : 0);
        ch = out;
    }
    const std::size_t values = closed_form_params(c, 1) + 2 * bn_channels;
    EXPECT_EQ(bytes.size(), header_len + 8 * values);
}

TEST(Checkpoint, CorruptMagicRejected) {
    Model m = build_model(ModelConfig::micro(), 0);
    auto path = temp_path("corrupt.ckpt");
    save_checkpoint(m, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');
    }
    EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST(Checkpoint, TruncatedAndVersionMismatchRejected) {
    Model m = build_model(ModelConfig::micro(), 0);
    auto path = temp_path("trunc.ckpt");
    save_checkpoint(m, path);
    fs::resize_file(path, fs::file_size(path) - 3);
    EXPECT_THROW(load_checkpoint(path), FormatError);

    save_checkpoint(m, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();
    bytes.replace(bytes.find("format_version=1"), 16, "format_version=9");
    std::ofstream(path, std::ios::binary) << bytes;
    EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST(GradCheck, FullResidualBlock) {
    // conv-bn-relu-conv-bn + projection shortcut, then relu, pooled into a loss
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        GradCheckOptions opt;
        opt.seed = seed;
        const double err = grad_check(
            [](const std::vector<Tensor>& in) {
                Tensor rm1 = Tensor::zeros({3}), rv1 = Tensor::ones({3});
                Tensor rm2 = Tensor::zeros({3}), rv2 = Tensor::ones({3});
                Tensor rm3 = Tensor::zeros({3}), rv3 = Tensor::ones({3});
                Tensor f = relu(batchnorm2d(conv2d(in[0], in[1], Tensor{}, 2, 1), in[2], in[3], rm1, rv1));
                f = batchnorm2d(conv2d(f, in[4], Tensor{}, 1, 1), in[5], in[6], rm2, rv2);
                Tensor sc = batchnorm2d(conv2d(in[0], in[7], Tensor{}, 2, 0), in[8], in[9], rm3, rv3);
                Tensor y = global_avg_pool(relu(add(f, sc)));
                Tensor target(y.shape(), 0.2);
                return mse_loss(y, target);
            },
            {{2, 2, 6, 6}, {3, 2, 3, 3}, {3}, {3}, {3, 3, 3, 3}, {3}, {3}, {3, 2, 1, 1}, {3}, {3}}, 1e-5, opt);
        EXPECT_LT(err, 1e-4) << "seed " << seed;
    }
}
