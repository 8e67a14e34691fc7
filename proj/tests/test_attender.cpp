#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vif/attender.hpp"
#include "vif/error.hpp"
#include "vif/gradcheck.hpp"

using namespace vif;

namespace {

AttenderConfig small() {
    AttenderConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.latent_dim = 3;
    c.components = 2;
    return c;
}

Tensor randn(Shape s, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    std::vector<double> v(shape_numel(s));
    for (double& x : v) x = n(rng);
    return Tensor::from_vector(std::move(s), std::move(v));
}

void perturb(const Attender& a, std::uint64_t seed, double sd = 0.3) {
    ParameterList ps;
    a.parameters(ps, "att");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    for (auto& p : ps)
        for (double& x : p.tensor.mutable_data()) x += n(rng);
}

DiagGaussian gaussian(std::vector<double> mu, std::vector<double> lv) {
    const std::size_t d = mu.size();
    return {Tensor::from_vector({d}, std::move(mu)), Tensor::from_vector({d}, std::move(lv))};
}

// Independent closed form, per dimension.
double kl_oracle(const std::vector<double>& mq, const std::vector<double>& lq, const std::vector<double>& mp,
                 const std::vector<double>& lp) {
    double s = 0.0;
    for (std::size_t i = 0; i < mq.size(); ++i) {
        const double vq = std::exp(lq[i]), vp = std::exp(lp[i]);
        s += 0.5 * (std::log(vp / vq) + (vq + (mq[i] - mp[i]) * (mq[i] - mp[i])) / vp - 1.0);
    }
    return s;
}

double log_normal(double x, double m, double lv) {
    return -0.5 * (std::log(2.0 * M_PI) + lv + (x - m) * (x - m) / std::exp(lv));
}

}  // namespace

TEST(Attender, ZeroInitHeadsGiveStandardNormal) {
    Attender a(small(), 3);
    std::mt19937_64 rng(1);
    DiagGaussian g = a.encode_prior(randn({9, 8}, rng), randn({3, 8}, rng));
    ASSERT_EQ(g.dim(), 6u);
    for (double x : g.mu.data()) EXPECT_EQ(x, 0.0);
    for (double x : g.log_var.data()) EXPECT_EQ(x, 0.0);
    DiagGaussian q = a.encode_posterior(randn({9, 8}, rng), randn({3, 8}, rng), randn({1, 8}, rng));
    EXPECT_EQ(kl_divergence(q, g).item(), 0.0);
}

TEST(Attender, EmptyTextIsRejected) {
    Attender a(small(), 3);
    std::mt19937_64 rng(1);
    const Tensor v = randn({4, 8}, rng);
    const Tensor q = randn({2, 8}, rng);
    EXPECT_THROW(a.encode_prior(v, Tensor::zeros({0, 8})), ContractError);
    EXPECT_THROW(a.encode_posterior(v, q, Tensor::zeros({0, 8})), ContractError);
    EXPECT_THROW(a.encode_prior(randn({4, 7}, rng), q), DimensionError);
}

TEST(Attender, PosteriorReadsTheAnswer) {
    Attender a(small(), 5);
    perturb(a, 11);
    std::mt19937_64 rng(2);
    const Tensor v = randn({6, 8}, rng), q = randn({2, 8}, rng);
    DiagGaussian p1 = a.encode_posterior(v, q, randn({1, 8}, rng));
    DiagGaussian p2 = a.encode_posterior(v, q, randn({1, 8}, rng));
    double diff = 0.0;
    for (std::size_t i = 0; i < p1.dim(); ++i) diff += std::abs(p1.mu[i] - p2.mu[i]);
    EXPECT_GT(diff, 1e-6);
    // Prior and posterior are separate branches.
    DiagGaussian pr = a.encode_prior(v, q);
    EXPECT_GT(kl_divergence(p1, pr).item(), 0.0);
}

TEST(Attender, InvariantToVisualRowOrder) {
    Attender a(small(), 7);
    perturb(a, 12);
    std::mt19937_64 rng(3);
    const Tensor v = randn({5, 8}, rng), q = randn({3, 8}, rng);
    std::vector<double> rows(v.data().begin(), v.data().end());
    std::vector<double> perm(rows.size());
    const std::size_t order[5] = {3, 0, 4, 1, 2};
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 8; ++c) perm[r * 8 + c] = rows[order[r] * 8 + c];
    DiagGaussian g1 = a.encode_prior(v, q);
    DiagGaussian g2 = a.encode_prior(Tensor::from_vector({5, 8}, perm), q);
    for (std::size_t i = 0; i < g1.dim(); ++i) {
        EXPECT_NEAR(g1.mu[i], g2.mu[i], 1e-12);
        EXPECT_NEAR(g1.log_var[i], g2.log_var[i], 1e-12);
    }
}

TEST(Attender, LogVarIsClamped) {
    Attender a(small(), 7);
    ParameterList ps;
    a.parameters(ps, "att");
    for (auto& p : ps)
        if (p.name.find("prior") != std::string::npos && p.name.find("b_lv") != std::string::npos)
            for (double& x : p.tensor.mutable_data()) x = 1e3;
    std::mt19937_64 rng(4);
    DiagGaussian g = a.encode_prior(randn({4, 8}, rng), randn({2, 8}, rng));
    for (double x : g.log_var.data()) EXPECT_EQ(x, kLogVarMax);
}

TEST(Attender, ParameterNamesSeparateBranches) {
    Attender a(small(), 1);
    ParameterList ps;
    a.parameters(ps, "vif.pair3_6");
    std::size_t prior = 0, post = 0;
    for (const auto& p : ps) {
        prior += p.name.rfind("vif.pair3_6.prior.", 0) == 0;
        post += p.name.rfind("vif.pair3_6.posterior.", 0) == 0;
    }
    EXPECT_EQ(prior + post, ps.size());
    EXPECT_EQ(prior, post);
}

TEST(Reparameterize, TinyVarianceReturnsMean) {
    DiagGaussian g = gaussian({0.3, -1.2, 2.0}, {kLogVarMin, kLogVarMin, kLogVarMin});
    LatentSample s = reparameterize(g, 9);
    const double sigma = std::exp(0.5 * kLogVarMin);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s.z[i], g.mu[i], 8.0 * sigma);
    LatentSample m = mean_sample(g);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(m.z[i], g.mu[i]);
}

TEST(Reparameterize, SampleMomentsMatch) {
    // 100 seeds x 1000 dims = 1e5 draws of one shared (mu, sigma).
    const std::size_t d = 1000;
    DiagGaussian g = gaussian(std::vector<double>(d, 0.7), std::vector<double>(d, std::log(2.25)));
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        LatentSample x = reparameterize(g, seed);
        for (double z : x.z.data()) {
            s += z;
            s2 += z * z;
            ++n;
        }
    }
    const double mean = s / static_cast<double>(n);
    const double var = s2 / static_cast<double>(n) - mean * mean;
    EXPECT_NEAR(mean, 0.7, 4.0 * 1.5 / std::sqrt(1e5));
    EXPECT_NEAR(var, 2.25, 0.03);
}

TEST(Reparameterize, SeedDeterminesDraw) {
    DiagGaussian g = gaussian({0, 0, 0, 0}, {0, 0, 0, 0});
    LatentSample a = reparameterize(g, 4), b = reparameterize(g, 4), c = reparameterize(g, 5);
    bool differs = false;
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(a.z[i], b.z[i]);
        differs = differs || a.z[i] != c.z[i];
    }
    EXPECT_TRUE(differs);
}

TEST(Reparameterize, GradientFlowsToMuAndLogVar) {
    std::mt19937_64 rng(8);
    Tensor mu = randn({4}, rng);
    Tensor lv = randn({4}, rng, 0.5);
    auto f = [&]() {
        LatentSample s = reparameterize({mu, lv}, 77);
        return sum(square(s.z));
    };
    EXPECT_LT(grad_check(f, {mu, lv}).max_rel_error, 1e-7);
}

TEST(KL, IdenticalDistributionsGiveZero) {
    std::mt19937_64 rng(1);
    Tensor mu = randn({16}, rng), lv = randn({16}, rng);
    EXPECT_LT(std::abs(kl_divergence({mu, lv}, {mu, lv}).item()), 1e-12);
}

TEST(KL, UnitShiftIsOneHalf) {
    EXPECT_NEAR(kl_divergence(gaussian({1.0}, {0.0}), gaussian({0.0}, {0.0})).item(), 0.5, 1e-15);
}

TEST(KL, MatchesClosedFormOracle) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> mq(5), lq(5), mp(5), lp(5);
        for (std::size_t i = 0; i < 5; ++i) {
            mq[i] = n(rng);
            mp[i] = n(rng);
            lq[i] = 2.0 * n(rng);
            lp[i] = 2.0 * n(rng);
        }
        const double got = kl_divergence(gaussian(mq, lq), gaussian(mp, lp)).item();
        EXPECT_NEAR(got, kl_oracle(mq, lq, mp, lp), 1e-10 * std::max(1.0, got));
    }
}

TEST(KL, NonNegativeOnRandomPairs) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> mq(3), lq(3), mp(3), lp(3);
        for (std::size_t i = 0; i < 3; ++i) {
            mq[i] = 3.0 * n(rng);
            mp[i] = 3.0 * n(rng);
            lq[i] = 4.0 * n(rng);
            lp[i] = 4.0 * n(rng);
        }
        ASSERT_GE(kl_divergence(gaussian(mq, lq), gaussian(mp, lp)).item(), 0.0);
    }
}

TEST(KL, MonteCarloAgreesWithinTwoPercent) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int pair = 0; pair < 50; ++pair) {
        std::vector<double> mq(4), lq(4), mp(4), lp(4);
        for (std::size_t i = 0; i < 4; ++i) {
            mq[i] = n(rng);
            mp[i] = n(rng);
            lq[i] = u(rng);
            lp[i] = u(rng);
        }
        const double closed = kl_divergence(gaussian(mq, lq), gaussian(mp, lp)).item();
        double acc = 0.0;
        const int samples = 100000;
        for (int s = 0; s < samples; ++s) {
            for (std::size_t i = 0; i < 4; ++i) {
                const double x = mq[i] + std::exp(0.5 * lq[i]) * n(rng);
                acc += log_normal(x, mq[i], lq[i]) - log_normal(x, mp[i], lp[i]);
            }
        }
        EXPECT_NEAR(acc / samples, closed, 0.02 * closed) << "pair " << pair;
    }
}

TEST(KL, NonFiniteInputsRaise) {
    EXPECT_THROW(kl_divergence(gaussian({NAN}, {0.0}), gaussian({0.0}, {0.0})), NumericError);
    EXPECT_THROW(kl_divergence(gaussian({0.0}, {0.0}), gaussian({0.0, 1.0}, {0.0, 0.0})), DimensionError);
}

TEST(KL, GradCheck) {
    std::mt19937_64 rng(5);
    Tensor mq = randn({6}, rng), lq = randn({6}, rng), mp = randn({6}, rng), lp = randn({6}, rng);
    auto f = [&]() { return kl_divergence({mq, lq}, {mp, lp}); };
    EXPECT_LT(grad_check(f, {mq, lq, mp, lp}).max_rel_error, 1e-7);
}

TEST(Attender, EncoderGradCheck) {
    Attender a(small(), 9);
    perturb(a, 13);
    std::mt19937_64 rng(6);
    Tensor v = randn({4, 8}, rng), q = randn({2, 8}, rng), ans = randn({1, 8}, rng);
    ParameterList ps;
    a.parameters(ps, "att");
    std::vector<Tensor> point{v, q, ans};
    for (auto& p : ps) point.push_back(p.tensor);
    auto f = [&]() {
        DiagGaussian pr = a.encode_prior(v, q);
        DiagGaussian po = a.encode_posterior(v, q, ans);
        LatentSample s = reparameterize(po, 3);
        return add(kl_divergence(po, pr), sum(square(s.z)));
    };
    GradCheckOptions o;
    o.max_coords = 300;
    o.seed = 1;
    EXPECT_LT(grad_check(f, point, o).max_rel_error, 1e-6);
}
