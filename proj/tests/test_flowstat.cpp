#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>
#include <sstream>

#include "vif/error.hpp"
#include "vif/flowstat.hpp"

using namespace vif;

namespace {

// All-visible attention (no mask) so hand values are easy to state.
AttentionTensor dense(std::size_t heads, std::size_t t, std::vector<double> p) {
    auto mask = std::make_shared<const std::vector<std::uint8_t>>(t * t, 1);
    return {Tensor::from_vector({heads, t, t}, std::move(p)), mask};
}

AttentionTensor uniform(std::size_t heads, std::size_t t) {
    return dense(heads, t, std::vector<double>(heads * t * t, 1.0 / static_cast<double>(t)));
}

AttentionTensor random_causal(const ModalityLayout& layout, std::size_t heads, std::mt19937_64& rng) {
    const std::size_t t = layout.seq_len();
    auto mask = std::make_shared<const std::vector<std::uint8_t>>(visibility_mask(layout));
    std::exponential_distribution<double> e(1.0);
    std::vector<double> p(heads * t * t, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < t; ++j)
                if ((*mask)[i * t + j]) s += (p[(h * t + i) * t + j] = e(rng) * e(rng));
            for (std::size_t j = 0; j < t; ++j) p[(h * t + i) * t + j] /= s;
        }
    return {Tensor::from_vector({heads, t, t}, std::move(p)), mask};
}

AttentionDump dump_of(const ModalityLayout& layout, const std::vector<AttentionTensor>& layers) {
    AttentionDump d;
    d.n_layers = static_cast<std::uint32_t>(layers.size());
    d.n_heads = static_cast<std::uint32_t>(layers[0].heads());
    d.seq = static_cast<std::uint32_t>(layout.seq_len());
    d.layout = layout;
    for (const auto& a : layers) d.layers.emplace_back(a.probs.data().begin(), a.probs.data().end());
    return d;
}

}  // namespace

TEST(Ratio, UniformIsVisualFraction) {
    ModalityLayout layout = ModalityLayout::make(4, 4, 3, 2);
    const std::size_t t = layout.seq_len();
    AttentionTensor a = uniform(2, t);
    EXPECT_NEAR(vision_attention_ratio(a, layout, QueryScope::generation), 16.0 / 21.0, 1e-12);
    EXPECT_NEAR(vision_attention_ratio(a, layout, QueryScope::text), 16.0 / 21.0, 1e-12);
}

TEST(Ratio, AllVisualMassIsOne) {
    ModalityLayout layout = ModalityLayout::make(2, 2, 2, 1);
    const std::size_t t = layout.seq_len();
    std::vector<double> p(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) p[i * t + (i % 4)] = 1.0;
    AttentionTensor a = dense(1, t, p);
    EXPECT_NEAR(vision_attention_ratio(a, layout, QueryScope::generation), 1.0, 1e-12);
    // Point mass on one visual token: entropy 0.
    EntropyStat e = visual_attention_entropy(a, layout, QueryScope::text);
    EXPECT_NEAR(e.mean, 0.0, 1e-12);
    EXPECT_EQ(e.rows_used, 3u);
    EXPECT_EQ(e.rows_excluded, 0u);
}

TEST(Entropy, UniformOverSixtyFourVisualTokens) {
    ModalityLayout layout = ModalityLayout::make(8, 8, 2, 1);
    AttentionTensor a = uniform(3, layout.seq_len());
    EXPECT_NEAR(visual_attention_entropy(a, layout, QueryScope::generation).mean, std::log(64.0), 1e-12);
    EXPECT_NEAR(std::log(64.0), 4.1589, 1e-4);
}

TEST(Entropy, ZeroVisualRowsAreExcludedAndCounted) {
    ModalityLayout layout = ModalityLayout::make(1, 2, 2, 1);
    const std::size_t t = layout.seq_len();
    std::vector<double> p(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) p[i * t + i] = 1.0;  // text rows attend only to themselves
    p[3 * t + 3] = 0.5;
    p[3 * t + 0] = 0.25;
    p[3 * t + 1] = 0.25;
    EntropyStat e = visual_attention_entropy(dense(1, t, p), layout, QueryScope::text);
    EXPECT_EQ(e.rows_used, 1u);
    EXPECT_EQ(e.rows_excluded, 2u);
    EXPECT_NEAR(e.mean, std::log(2.0), 1e-12);
}

TEST(Diagnostics, MatchBruteForceOracle) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        ModalityLayout layout = ModalityLayout::make(3, 4, 1 + trial % 3, trial % 2 + 1);
        const std::size_t heads = 1 + trial % 3;
        AttentionTensor a = random_causal(layout, heads, rng);
        const std::size_t t = layout.seq_len();
        for (QueryScope scope : {QueryScope::generation, QueryScope::text}) {
            const auto rows = scope_rows(layout, scope);
            double ratio = 0.0, ent = 0.0;
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t i : rows) {
                    double vis = 0.0;
                    for (std::size_t j = 0; j < 12; ++j) vis += a.at(h, i, j);
                    ratio += vis;
                    double hsum = 0.0;
                    for (std::size_t j = 0; j < 12; ++j) {
                        const double q = a.at(h, i, j) / vis;
                        if (q > 0) hsum -= q * std::log(q);
                    }
                    ent += hsum;
                }
            }
            const double n = static_cast<double>(heads * rows.size());
            EXPECT_NEAR(vision_attention_ratio(a, layout, scope), ratio / n, 1e-12);
            EXPECT_NEAR(visual_attention_entropy(a, layout, scope).mean, ent / n, 1e-12);
        }
        (void)t;
    }
}

TEST(Diagnostics, InvariantToHeadPermutation) {
    std::mt19937_64 rng(2);
    ModalityLayout layout = ModalityLayout::make(3, 3, 2, 2);
    const std::size_t t = layout.seq_len();
    AttentionTensor a = random_causal(layout, 3, rng);
    std::vector<double> p(a.probs.data().begin(), a.probs.data().end()), q(p.size());
    const std::size_t order[3] = {2, 0, 1};
    for (std::size_t h = 0; h < 3; ++h)
        std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(order[h] * t * t), t * t,
                    q.begin() + static_cast<std::ptrdiff_t>(h * t * t));
    AttentionTensor b{Tensor::from_vector({3, t, t}, q), a.mask};
    EXPECT_NEAR(vision_attention_ratio(a, layout, QueryScope::text), vision_attention_ratio(b, layout, QueryScope::text),
                1e-15);
    EXPECT_NEAR(visual_attention_entropy(a, layout, QueryScope::text).mean,
                visual_attention_entropy(b, layout, QueryScope::text).mean, 1e-15);
}

TEST(Diagnostics, EmptyScopeIsAContractError) {
    ModalityLayout layout = ModalityLayout::make(2, 2, 0, 0);
    AttentionTensor a = uniform(1, layout.seq_len());
    EXPECT_THROW(vision_attention_ratio(a, layout, QueryScope::text), ContractError);
    EXPECT_THROW(parse_scope("all"), UsageError);
    EXPECT_EQ(parse_scope("gen"), QueryScope::generation);
    EXPECT_EQ(parse_scope("text"), QueryScope::text);
}

TEST(Quantiles, HandValuesAndOrdering) {
    // One generation row with visual weights 0.1, 0.2, 0.3, 0.4 (p = 1/4 x ...).
    ModalityLayout layout = ModalityLayout::make(2, 2, 1, 0);
    const std::size_t t = layout.seq_len();
    std::vector<double> p(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) p[i * t + i] = 1.0;
    p[4 * t + 4] = 0.0;
    p[4 * t + 0] = 0.1;
    p[4 * t + 1] = 0.2;
    p[4 * t + 2] = 0.3;
    p[4 * t + 3] = 0.4;
    AttentionTensor a = dense(1, t, p);
    const auto q = visual_weight_quantiles(view_of(a), layout, QueryScope::generation);
    // Type-7: position (n-1)p over sorted {0.1, 0.2, 0.3, 0.4}.
    EXPECT_NEAR(q[0], 0.115, 1e-12);
    EXPECT_NEAR(q[1], 0.175, 1e-12);
    EXPECT_NEAR(q[2], 0.25, 1e-12);
    EXPECT_NEAR(q[3], 0.325, 1e-12);
    EXPECT_NEAR(q[4], 0.385, 1e-12);
}

TEST(Dump, HandBuiltTwoLayerProfile) {
    // Layer 0 uniform, layer 1 a point mass on visual token 0 from every row.
    ModalityLayout layout = ModalityLayout::make(2, 2, 1, 1);
    const std::size_t t = layout.seq_len();
    std::vector<double> p1(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) p1[i * t] = 1.0;
    AttentionDump d = dump_of(layout, {uniform(2, t), dense(2, t, [&] {
                                            std::vector<double> v(p1);
                                            v.insert(v.end(), p1.begin(), p1.end());
                                            return v;
                                        }())});
    const auto stats = layer_profile(d, QueryScope::generation);
    ASSERT_EQ(stats.size(), 2u);
    EXPECT_NEAR(stats[0].ratio, 4.0 / 6.0, 1e-7);
    EXPECT_NEAR(stats[0].entropy, std::log(4.0), 1e-7);
    EXPECT_NEAR(stats[0].quantiles[2], 1.0 / 6.0, 1e-7);
    EXPECT_NEAR(stats[1].ratio, 1.0, 1e-12);
    EXPECT_NEAR(stats[1].entropy, 0.0, 1e-12);
    // Pooled over two heads: six zeros and two ones.
    EXPECT_NEAR(stats[1].quantiles[3], 0.25, 1e-12);
    EXPECT_NEAR(stats[1].quantiles[4], 1.0, 1e-12);

    std::ostringstream os;
    write_profile_csv(os, stats);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "layer,ratio,entropy,p5,p25,p50,p75,p95");
}

TEST(Dump, UniformLayersGiveConstantRatio) {
    ModalityLayout layout = ModalityLayout::make(3, 3, 2, 1);
    const std::size_t t = layout.seq_len();
    AttentionDump d = dump_of(layout, {uniform(2, t), uniform(2, t), uniform(2, t)});
    for (const auto& s : layer_profile(d, QueryScope::text)) EXPECT_NEAR(s.ratio, 9.0 / 12.0, 1e-7);
}

TEST(Dump, RoundTripIsLosslessAtFloat) {
    std::mt19937_64 rng(3);
    ModalityLayout layout = ModalityLayout::make(3, 2, 2, 1);
    AttentionDump d = dump_of(layout, {random_causal(layout, 2, rng), random_causal(layout, 2, rng)});
    std::stringstream ss;
    write_dump(ss, d);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 7), "VIFADP1");
    EXPECT_EQ(bytes.size(), 7u + 4u * 12u + 2u * 2u * 9u * 9u * 4u);
    AttentionDump back = read_dump(ss);
    EXPECT_EQ(back.layout, layout);
    EXPECT_EQ(back.layers, d.layers);
}

TEST(Dump, TruncatedAndCorruptInputsFailClosed) {
    ModalityLayout layout = ModalityLayout::make(2, 2, 1, 1);
    AttentionDump d = dump_of(layout, {uniform(1, 6)});
    std::stringstream ss;
    write_dump(ss, d);
    const std::string bytes = ss.str();

    std::istringstream cut(bytes.substr(0, bytes.size() - 3));
    try {
        read_dump(cut);
        FAIL() << "truncated dump accepted";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("at byte"), std::string::npos);
    }
    std::string magic = bytes;
    magic[3] = 'X';
    std::istringstream bm(magic);
    EXPECT_THROW(read_dump(bm), FormatError);
    std::istringstream extra(bytes + "zz");
    EXPECT_THROW(read_dump(extra), FormatError);
    std::istringstream head(bytes.substr(0, 20));
    EXPECT_THROW(read_dump(head), FormatError);
}
