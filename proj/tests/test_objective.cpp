#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vif/attender.hpp"
#include "vif/error.hpp"
#include "vif/gradcheck.hpp"
#include "vif/objective.hpp"

using namespace vif;

namespace {

SpatialMixture mix_with(std::vector<double> pi, std::vector<double> spreads) {
    const std::size_t k = pi.size();
    return {Tensor::from_vector({k}, std::move(pi)), Tensor::full({k, 2}, 0.5), Tensor::from_vector({k}, std::move(spreads))};
}

}  // namespace

TEST(Recon, UniformLogitsGiveLogVocab) {
    ModalityLayout layout = ModalityLayout::make(2, 2, 2, 1);
    const std::size_t t = layout.seq_len();
    std::vector<int> targets(t, 3);
    Tensor logits = Tensor::zeros({t, 256});
    EXPECT_NEAR(recon_loss(logits, targets, layout).item(), 5.5452, 1e-4);
    EXPECT_NEAR(recon_loss(logits, targets, layout).item(), std::log(256.0), 1e-12);
}

TEST(Recon, ConfidentCorrectPredictionIsNearZero) {
    ModalityLayout layout = ModalityLayout::make(2, 2, 1, 2);
    const std::size_t t = layout.seq_len();
    std::vector<int> targets = {0, 0, 0, 0, 1, 5, 7};
    std::vector<double> lv(t * 8, 0.0);
    // Rows 4 and 5 predict the answer tokens 5 and 7.
    lv[4 * 8 + 5] = 30.0;
    lv[5 * 8 + 7] = 30.0;
    const double l = recon_loss(Tensor::from_vector({t, 8}, lv), targets, layout).item();
    EXPECT_LT(l, 1e-6);
    EXPECT_GT(l, 0.0);
    // Only generation rows count: a wrong guess at row 6 changes nothing.
    lv[6 * 8 + 2] = 50.0;
    EXPECT_EQ(recon_loss(Tensor::from_vector({t, 8}, lv), targets, layout).item(), l);
}

TEST(Recon, ContractsAndShapes) {
    ModalityLayout noans = ModalityLayout::make(2, 2, 1, 0);
    EXPECT_THROW(recon_loss(Tensor::zeros({5, 4}), std::vector<int>(5, 0), noans), ContractError);
    ModalityLayout layout = ModalityLayout::make(2, 2, 1, 1);
    EXPECT_THROW(recon_loss(Tensor::zeros({5, 4}), std::vector<int>(6, 0), layout), DimensionError);
    EXPECT_THROW(recon_loss(Tensor::zeros({6, 4}), std::vector<int>{0, 0, 0, 0, 0, 9}, layout), VocabError);
}

TEST(Recon, GradCheck) {
    ModalityLayout layout = ModalityLayout::make(2, 1, 1, 2);
    const std::size_t t = layout.seq_len();
    std::mt19937_64 rng(1);
    std::vector<double> lv(t * 6);
    for (double& x : lv) x = std::normal_distribution<double>(0.0, 2.0)(rng);
    Tensor logits = Tensor::from_vector({t, 6}, lv);
    std::vector<int> targets = {0, 0, 1, 4, 2};
    EXPECT_LT(grad_check([&]() { return recon_loss(logits, targets, layout); }, {logits}).max_rel_error, 1e-8);
}

TEST(Sparsity, UniformAnchor) {
    SpatialMixture m = mix_with(std::vector<double>(16, 1.0 / 16.0), std::vector<double>(16, 1.0));
    EXPECT_NEAR(sparsity_loss(m).item(), 2.8351, 1e-4);
    EXPECT_NEAR(sparsity_loss(m).item(), std::log(16.0) + 1.0 / 16.0, 1e-12);
}

TEST(Sparsity, OneHotAnchor) {
    std::vector<double> pi(16, 0.0);
    pi[5] = 1.0;
    SpatialMixture m = mix_with(pi, std::vector<double>(16, 1.0));
    EXPECT_NEAR(sparsity_loss(m).item(), 0.0625, 1e-6);
}

TEST(Sparsity, EntropyTermBoundedByLogK) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> pi(16);
        double s = 0.0;
        for (double& p : pi) s += (p = u(rng) * u(rng));
        for (double& p : pi) p /= s;
        // Spreads tiny so the volume term is negligible.
        const double v = sparsity_loss(mix_with(pi, std::vector<double>(16, 1e-9))).item();
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, std::log(16.0) + 1e-12);
    }
}

TEST(Sparsity, GradCheck) {
    Tensor pi = Tensor::from_vector({3}, {0.2, 0.5, 0.3});
    Tensor s = Tensor::from_vector({3}, {0.1, 0.7, 0.4});
    auto f = [&]() { return sparsity_loss({pi, Tensor::full({3, 2}, 0.5), s}); };
    EXPECT_LT(grad_check(f, {pi, s}).max_rel_error, 1e-8);
}

TEST(Total, WeightedSum) {
    LossBreakdown b = total_loss(1.0, 2.0, 3.0, 0.1, 0.01);
    EXPECT_NEAR(b.total, 1.23, 1e-15);
    EXPECT_NEAR(elbo_estimate(b), -3.0, 1e-15);
    Tensor t = total_loss(Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0), 0.1, 0.01);
    EXPECT_NEAR(t.item(), 1.23, 1e-15);
}

TEST(Total, RejectsNonFiniteAndNegativeWeights) {
    EXPECT_THROW(total_loss(NAN, 0.0, 0.0, 0.1, 0.01), NumericError);
    EXPECT_THROW(total_loss(0.0, INFINITY, 0.0, 0.1, 0.01), NumericError);
    EXPECT_THROW(total_loss(0.0, 0.0, NAN, 0.1, 0.01), NumericError);
    EXPECT_THROW(total_loss(0.0, 0.0, 0.0, -0.1, 0.01), ContractError);
    EXPECT_THROW(total_loss(0.0, 0.0, 0.0, 0.1, -1.0), ContractError);
}

TEST(Schedule, BetaWarmsUpLinearly) {
    EXPECT_NEAR(beta_at(0, 1000, 0.1, 0.1), 0.001, 1e-15);
    EXPECT_NEAR(beta_at(49, 1000, 0.1, 0.1), 0.05, 1e-15);
    EXPECT_EQ(beta_at(99, 1000, 0.1, 0.1), 0.1);
    EXPECT_EQ(beta_at(500, 1000, 0.1, 0.1), 0.1);
    EXPECT_EQ(beta_at(0, 1000, 0.1, 0.0), 0.1);
}

TEST(Elbo, LowerBoundsExactLogLikelihood) {
    // One-dimensional latent, prior N(0, 1), likelihood p(a = 1 | z) = sigmoid(w z + b).
    // log p(a) by quadrature; the ELBO by Monte Carlo through the library KL.
    const double w = 1.7, b = -0.4;
    auto log_lik = [&](double z) { return -std::log1p(std::exp(-(w * z + b))); };
    double px = 0.0;
    const double dz = 1e-3;
    for (double z = -12.0; z <= 12.0; z += dz) px += std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI) * std::exp(log_lik(z)) * dz;
    const double log_px = std::log(px);
    DiagGaussian prior{Tensor::zeros({1}), Tensor::zeros({1})};
    for (double mq : {-1.0, 0.0, 0.4, 1.5}) {
        for (double lq : {-2.0, -0.5, 0.0}) {
            DiagGaussian q{Tensor::from_vector({1}, {mq}), Tensor::from_vector({1}, {lq})};
            double acc = 0.0;
            const int n = 20000;
            for (int s = 0; s < n; ++s) acc += log_lik(reparameterize(q, static_cast<std::uint64_t>(s)).z[0]);
            LossBreakdown lb = total_loss(-acc / n, kl_divergence(q, prior).item(), 0.0, 1.0, 0.0);
            EXPECT_LE(elbo_estimate(lb), log_px + 1e-3);
            EXPECT_NEAR(elbo_estimate(lb), -lb.total, 1e-15);
        }
    }
}
