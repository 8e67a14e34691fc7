#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "vif/kernels.hpp"

using namespace vif::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

void expect_close(const std::vector<double>& a, const std::vector<double>& b, double scale) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12 * scale) << "at " << i;
}

class KernelEquivalence : public ::testing::Test {
protected:
    void SetUp() override {
        if (avx2_table() == nullptr) GTEST_SKIP() << "host has no AVX2+FMA";
    }
};

}  // namespace

TEST(Kernels, ScalarIsAlwaysAvailable) {
    EXPECT_TRUE(host_supports(Isa::scalar));
    EXPECT_EQ(scalar_table().isa, Isa::scalar);
}

TEST(Kernels, ScalarGemmMatchesNaiveTripleLoop) {
    std::mt19937_64 rng(1);
    const std::size_t m = 5, n = 7, k = 3;
    auto a = random_vec(m * k, rng);
    auto b = random_vec(k * n, rng);
    std::vector<double> c(m * n);
    scalar_table().gemm(m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            EXPECT_DOUBLE_EQ(c[i * n + j], s);
        }
}

TEST_F(KernelEquivalence, GemmVariantsAgreeAcrossShapes) {
    const auto& s = scalar_table();
    const auto& v = *avx2_table();
    std::mt19937_64 rng(42);
    const std::size_t dims[] = {1, 3, 4, 5, 8, 9, 16, 17, 33};
    for (std::size_t m : dims)
        for (std::size_t n : dims)
            for (std::size_t k : {1ul, 2ul, 7ul, 16ul, 31ul}) {
                auto a = random_vec(m * k, rng);
                auto b = random_vec(k * n, rng);
                auto bt = random_vec(n * k, rng);
                auto at = random_vec(k * m, rng);
                auto c0 = random_vec(m * n, rng);
                for (bool acc : {false, true}) {
                    auto c1 = c0, c2 = c0;
                    s.gemm(m, n, k, a.data(), k, b.data(), n, c1.data(), n, acc);
                    v.gemm(m, n, k, a.data(), k, b.data(), n, c2.data(), n, acc);
                    expect_close(c1, c2, static_cast<double>(k));
                    c1 = c0, c2 = c0;
                    s.gemm_nt(m, n, k, a.data(), k, bt.data(), k, c1.data(), n, acc);
                    v.gemm_nt(m, n, k, a.data(), k, bt.data(), k, c2.data(), n, acc);
                    expect_close(c1, c2, static_cast<double>(k));
                    c1 = c0, c2 = c0;
                    s.gemm_tn(m, n, k, at.data(), m, b.data(), n, c1.data(), n, acc);
                    v.gemm_tn(m, n, k, at.data(), m, b.data(), n, c2.data(), n, acc);
                    expect_close(c1, c2, static_cast<double>(k));
                }
            }
}

TEST_F(KernelEquivalence, VectorRoutinesAgree) {
    const auto& s = scalar_table();
    const auto& v = *avx2_table();
    std::mt19937_64 rng(7);
    for (std::size_t n = 0; n < 70; ++n) {
        auto x = random_vec(n, rng);
        auto y = random_vec(n, rng);
        EXPECT_NEAR(s.dot(n, x.data(), y.data()), v.dot(n, x.data(), y.data()), 1e-12 * (1.0 + static_cast<double>(n)));
        auto y1 = y, y2 = y;
        s.axpy(n, 0.37, x.data(), y1.data());
        v.axpy(n, 0.37, x.data(), y2.data());
        expect_close(y1, y2, 1.0);
        y1 = y, y2 = y;
        s.mul_inplace(n, x.data(), y1.data());
        v.mul_inplace(n, x.data(), y2.data());
        EXPECT_EQ(y1, y2);
    }
}

TEST_F(KernelEquivalence, SelectSwitchesActiveTable) {
    select(Isa::scalar);
    EXPECT_EQ(active().isa, Isa::scalar);
    select(Isa::avx2);
    EXPECT_EQ(active().isa, Isa::avx2);
}
