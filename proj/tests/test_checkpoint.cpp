#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "vif/checkpoint.hpp"
#include "vif/error.hpp"
#include "vif/gradsuite.hpp"
#include "vif/harness.hpp"

using namespace vif;

namespace {

void jitter(const ParameterList& ps, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto p : ps)
        for (double& x : p.tensor.mutable_data()) x += n(rng);
}

std::string temp_path(const std::string& name) { return ::testing::TempDir() + name; }

}  // namespace

TEST(Checkpoint, StreamRoundTripKeepsValuesAndConfig) {
    Tensor a = Tensor::from_vector({2, 3}, {1.0, -2.5, 3.25, 1e-300, -0.0, 7.0});
    Tensor b = Tensor::from_vector({1}, {0.125});
    ParameterList ps = {{"a", a}, {"b", b}};
    std::stringstream ss;
    write_checkpoint(ss, {{"k", "v"}, {"x", "1 2"}}, ps);
    EXPECT_EQ(ss.str().substr(0, 8), "VIFCKPT1");
    Checkpoint c = read_checkpoint(ss);
    EXPECT_EQ(c.config.at("k"), "v");
    EXPECT_EQ(c.config.at("x"), "1 2");
    ASSERT_EQ(c.records.size(), 2u);
    EXPECT_EQ(c.records[0].name, "a");
    EXPECT_EQ(c.records[0].shape, (Shape{2, 3}));
    EXPECT_EQ(c.records[0].values, std::vector<double>(a.data().begin(), a.data().end()));

    Tensor a2 = Tensor::zeros({2, 3}), b2 = Tensor::zeros({1});
    ParameterList back = {{"a", a2}, {"b", b2}};
    restore_parameters(c, back);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(a2[i], a[i]);
    EXPECT_EQ(b2[0], 0.125);
}

TEST(Checkpoint, TruncationAndBadMagicFail) {
    ParameterList ps = {{"w", Tensor::full({4}, 2.0)}};
    std::stringstream ss;
    write_checkpoint(ss, {}, ps);
    const std::string bytes = ss.str();
    for (std::size_t cut : {3ul, 10ul, bytes.size() - 1}) {
        std::istringstream in(bytes.substr(0, cut));
        EXPECT_THROW(read_checkpoint(in), FormatError) << cut;
    }
    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream in(bad);
    EXPECT_THROW(read_checkpoint(in), FormatError);
    EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.ckpt")), Error);
}

TEST(Checkpoint, RestoreRejectsMismatches) {
    ParameterList ps = {{"w", Tensor::full({4}, 2.0)}};
    std::stringstream ss;
    write_checkpoint(ss, {}, ps);
    const Checkpoint c = read_checkpoint(ss);
    ParameterList wrong_shape = {{"w", Tensor::zeros({5})}};
    EXPECT_THROW(restore_parameters(c, wrong_shape), FormatError);
    ParameterList missing = {{"w", Tensor::zeros({4})}, {"v", Tensor::zeros({1})}};
    EXPECT_THROW(restore_parameters(c, missing), FormatError);
    ParameterList renamed = {{"u", Tensor::zeros({4})}};
    EXPECT_THROW(restore_parameters(c, renamed), FormatError);
}

TEST(Checkpoint, ModelRoundTripGivesBitIdenticalLogits) {
    for (AblationMode mode : all_modes()) {
        const ModelConfig mc = toy_model_config(mode);
        VifModel model(mc, 11);
        jitter(model.parameters(), 12);
        TaskConfig tc = toy_task_config(3);
        const Corpus corpus = make_corpus(tc, generate(tc, 4));
        const std::string path = temp_path("model_" + mode_name(mode) + ".ckpt");
        save_model(path, model, corpus);
        LoadedModel lm = load_model(path);
        EXPECT_EQ(lm.model.config().to_map(), mc.to_map());
        EXPECT_EQ(lm.train_hashes.size(), 4u);
        EXPECT_EQ(lm.colors, tc.colors);
        NoGradGuard ng;
        for (const auto& inst : corpus.instances) {
            const Tensor x = model.run_eval(inst, 5).logits;
            const Tensor y = lm.model.run_eval(inst, 5).logits;
            ASSERT_EQ(x.numel(), y.numel());
            for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(x[i], y[i]) << mode_name(mode);
        }
        std::remove(path.c_str());
    }
}
