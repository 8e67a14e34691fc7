#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "vif/error.hpp"
#include "vif/gradsuite.hpp"
#include "vif/harness.hpp"

using namespace vif;

namespace {

Corpus toy_corpus(std::uint64_t seed, std::size_t n, double ambiguity = 0.5) {
    TaskConfig tc = toy_task_config(seed);
    tc.ambiguity_rate = ambiguity;
    return make_corpus(tc, generate(tc, n));
}

TrainConfig quick(std::size_t steps) {
    TrainConfig t;
    t.steps = steps;
    t.batch = 4;
    t.lr = 3e-3;
    t.seed = 5;
    return t;
}

}  // namespace

TEST(ModelConfig, MapRoundTrip) {
    ModelConfig c = toy_model_config(AblationMode::deep_only);
    c.pairs = {{0, 1, 0.25}, {1, 1, 0.5}};
    EXPECT_EQ(ModelConfig::from_map(c.to_map()).to_map(), c.to_map());
    ModelConfig s = toy_model_config(AblationMode::full);
    s.pairs.clear();
    s.backbone.n_layers = 8;
    EXPECT_EQ(s.to_map().at("model.pairs"), "standard");
    EXPECT_EQ(ModelConfig::from_map(s.to_map()).plan().pairs.size(), 2u);
    auto kv = c.to_map();
    kv["model.d_model"] = "eight";
    EXPECT_THROW(ModelConfig::from_map(kv), ConfigError);
    kv.erase("model.d_model");
    EXPECT_THROW(ModelConfig::from_map(kv), ConfigError);
    EXPECT_THROW(parse_mode("none"), ConfigError);
    for (AblationMode m : all_modes()) EXPECT_EQ(parse_mode(mode_name(m)), m);
}

TEST(Train, ZeroStepsLeavesInitialization) {
    VifModel model(toy_model_config(AblationMode::full), 3);
    const auto before = snapshot(model.parameters());
    TrainConfig t = quick(0);
    t.checkpoint_path = ::testing::TempDir() + "zero.ckpt";
    const TrainResult r = train(model, t, toy_corpus(1, 8));
    EXPECT_TRUE(r.log.empty());
    EXPECT_EQ(snapshot(model.parameters()), before);
    LoadedModel lm = load_model(t.checkpoint_path);
    EXPECT_EQ(snapshot(lm.model.parameters()), before);
}

TEST(Train, MicroCorpusLearnsBelowUniform) {
    VifModel model(toy_model_config(AblationMode::full), 3);
    const Corpus c = toy_corpus(2, 16, 0.0);
    const TrainResult r = train(model, quick(200), c);
    ASSERT_EQ(r.log.size(), 200u);
    double tail = 0.0;
    for (std::size_t i = 180; i < 200; ++i) tail += r.log[i].loss.recon / 20.0;
    EXPECT_LT(tail, std::log(static_cast<double>(c.vocabulary().size)));
    EXPECT_LT(tail, r.log[0].loss.recon);
    for (const auto& row : r.log) {
        EXPECT_GE(row.loss.kl, 0.0);
        EXPECT_TRUE(std::isfinite(row.loss.total));
    }
    EXPECT_NEAR(r.log.back().loss.beta, 0.1, 1e-15);
}

TEST(Train, NoApHasZeroKlAndNoSpKeepsReportingSparsity) {
    const Corpus c = toy_corpus(2, 8);
    VifModel noap(toy_model_config(AblationMode::no_ap), 3);
    for (const auto& row : train(noap, quick(5), c).log) EXPECT_EQ(row.loss.kl, 0.0);
    VifModel nosp(toy_model_config(AblationMode::no_sp), 3);
    for (const auto& row : train(nosp, quick(5), c).log) {
        EXPECT_GT(row.loss.sparsity, 0.0);
        EXPECT_EQ(row.loss.gamma, 0.0);
    }
}

TEST(Train, FrozenBackboneIsBitIdentical) {
    VifModel model(toy_model_config(AblationMode::full), 3);
    const auto bb = snapshot(model.backbone_parameters());
    const auto vif = snapshot(model.vif_parameters());
    TrainConfig t = quick(10);
    t.freeze_backbone = true;
    train(model, t, toy_corpus(2, 8));
    EXPECT_EQ(snapshot(model.backbone_parameters()), bb);
    EXPECT_NE(snapshot(model.vif_parameters()), vif);
    // Gradients are recorded again afterwards.
    for (const auto& p : model.backbone_parameters()) EXPECT_TRUE(p.tensor.requires_grad());
}

TEST(Train, LogIsReproducible) {
    const Corpus c = toy_corpus(2, 8);
    auto run = [&](const std::string& path) {
        VifModel model(toy_model_config(AblationMode::full), 3);
        TrainConfig t = quick(15);
        t.log_path = path;
        train(model, t, c);
        std::ifstream in(path);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    const std::string a = run(::testing::TempDir() + "log_a.csv");
    const std::string b = run(::testing::TempDir() + "log_b.csv");
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.substr(0, a.find('\n')), "step,recon,kl,sparsity,total,beta_effective");
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 16);
}

TEST(Train, RejectsBadConfigs) {
    VifModel model(toy_model_config(AblationMode::full), 3);
    const Corpus c = toy_corpus(2, 4);
    TrainConfig t = quick(1);
    t.batch = 0;
    EXPECT_THROW(train(model, t, c), ConfigError);
    t = quick(1);
    t.lr = 0.0;
    EXPECT_THROW(train(model, t, c), ConfigError);
    EXPECT_THROW(train(model, quick(1), Corpus{}), Error);
}

TEST(Eval, UntrainedModelIsNearChance) {
    VifModel model(toy_model_config(AblationMode::full), 4);
    const Corpus c = toy_corpus(9, 600);
    const EvalReport r = evaluate(model, c, EvalOptions{});
    const double p = 1.0 / static_cast<double>(c.vocabulary().answer_count);
    const double half = 2.576 * std::sqrt(p * (1.0 - p) / 600.0);
    EXPECT_NEAR(r.accuracy, p, half);
    EXPECT_EQ(r.instances, 600u);
    EXPECT_EQ(r.ambiguous, 300u);
}

TEST(Eval, RepeatedEvaluationIsIdentical) {
    VifModel model(toy_model_config(AblationMode::full), 4);
    const Corpus c = toy_corpus(9, 40);
    EvalOptions o;
    o.baseline_entropy = true;
    std::ostringstream a, b;
    write_eval_report(a, evaluate(model, c, o));
    write_eval_report(b, evaluate(model, c, o));
    EXPECT_EQ(a.str(), b.str());
    o.limit = 7;
    EXPECT_EQ(evaluate(model, c, o).instances, 7u);
}

TEST(Eval, OverlapAndGridMismatchAreRejected) {
    VifModel model(toy_model_config(AblationMode::full), 4);
    const Corpus c = toy_corpus(9, 10);
    std::set<std::uint64_t> hashes = {instance_hash(c.instances[3])};
    EXPECT_THROW(evaluate(model, c, EvalOptions{}, hashes), ContractError);
    TaskConfig big = toy_task_config(1);
    big.grid_h = 5;
    const Corpus other = make_corpus(big, generate(big, 3));
    EXPECT_THROW(evaluate(model, other, EvalOptions{}), ConfigError);
}

TEST(Eval, GreedyPicksTheBestAnswerToken) {
    const Vocabulary v = Vocabulary::for_task(toy_task_config(1));
    std::vector<double> lv(2 * v.size, 0.0);
    lv[v.size + 0] = 100.0;  // not an answer token
    lv[v.size + static_cast<std::size_t>(v.answer0) + 2] = 1.0;
    EXPECT_EQ(greedy_answer(Tensor::from_vector({2, v.size}, lv), v), v.answer0 + 2);
}

TEST(Ablation, CsvIsReproducibleAndHasEveryMode) {
    const CorpusSplit s = make_split(toy_task_config(4), 12, 6);
    const ModelConfig mc = toy_model_config(AblationMode::full);
    auto csv = [&]() {
        std::ostringstream os;
        write_ablation_csv(os, run_ablation(mc, quick(3), s.train, s.heldout, all_modes()));
        return os.str();
    };
    const std::string a = csv();
    EXPECT_EQ(a, csv());
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 7);
    EXPECT_NE(a.find("\nfull,"), std::string::npos);
    EXPECT_NE(a.find("\nmid-deep-feature,"), std::string::npos);
}
