#pragma once

// Focal-bias injection of a decoded importance map into deep-layer attention,
// and the single-pass driver that extracts middle-layer states, runs the
// attender and renderer, and patches the paired deep layers.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "vif/attender.hpp"
#include "vif/backbone.hpp"
#include "vif/flowstat.hpp"
#include "vif/gmm.hpp"

namespace vif {

struct PlanPair {
    std::size_t extract = 0;
    std::size_t inject = 0;
    double alpha = 0.5;
    bool operator==(const PlanPair&) const = default;
};

struct LayerPatchPlan {
    std::vector<PlanPair> pairs;
    // Deep-only extracts at the injection layer itself.
    bool allow_same_layer = false;

    // Throws PlanError: extract < inject (or <= when allowed), indices below
    // n_layers, injection layers unique.
    void validate(std::size_t n_layers) const;
    std::set<std::size_t> extraction_layers() const;
    std::set<std::size_t> injection_layers() const;

    // {11,13,15,17} -> {25,27,29,31} at 32 layers; otherwise each index is
    // scaled by n_layers/32 (floor) and pairs colliding on the injection
    // layer keep the first.
    static LayerPatchPlan standard(std::size_t n_layers, double alpha);
    // (l', l') for every injection layer of the given plan.
    static LayerPatchPlan deep_only(const LayerPatchPlan& plan);
};

// V_hat on visual key columns, zero elsewhere; [T].
Tensor build_bias(const ImportanceMap& map, const ModalityLayout& layout, std::size_t seq_len);
// Whole-row variant: V_hat * N_v / T on visual columns and 1 / T on text
// columns, so the bias is itself a distribution over the full row.
Tensor build_full_sequence_bias(const ImportanceMap& map, const ModalityLayout& layout, std::size_t seq_len);

// Adds alpha * bias to every row of every head, zeroes invisible entries and
// renormalizes rows. alpha is a scalar tensor so it can be learned; alpha == 0
// without a gradient returns the input untouched.
AttentionTensor inject(const AttentionTensor& flow, const Tensor& bias, const Tensor& alpha);
AttentionTensor inject(const AttentionTensor& flow, const Tensor& bias, double alpha);

struct InjectionRecord {
    std::size_t extract = 0;
    std::size_t inject = 0;
    double alpha = 0.0;
    double pre_entropy = 0.0;
    double post_entropy = 0.0;
    double pre_ratio = 0.0;
    double post_ratio = 0.0;
    double max_rowsum_dev = 0.0;
};

struct InjectionReport {
    std::vector<InjectionRecord> records;
    void write_csv(std::ostream& out) const;
};

// Trainable modules owned by one (l, l') pair.
struct PairModule {
    Attender attender;
    MixtureDecoder decoder;
    Tensor alpha;  // scalar; requires_grad when learnable

    void parameters(ParameterList& out, const std::string& prefix) const;
};

enum class InjectionKind { attention, full_sequence, hidden_feature };
enum class LatentSource { posterior, prior, prior_mean };

struct ApplyOptions {
    InjectionKind kind = InjectionKind::attention;
    LatentSource source = LatentSource::prior;
    // Also encode the prior when sampling from the posterior, for the KL term.
    bool with_prior = true;
    std::uint64_t seed = 0;
    std::optional<double> alpha_override;
    QueryScope scope = QueryScope::generation;
    std::set<std::size_t> extra_hooks;
};

struct PairOutcome {
    std::optional<DiagGaussian> prior;
    std::optional<DiagGaussian> posterior;
    LatentSample sample;
    SpatialMixture mixture;
    ImportanceMap map;
};

struct PlanResult {
    Tensor logits;
    std::vector<PairOutcome> pairs;  // plan order
    InjectionReport report;          // plan order
    LayerTrace trace;
};

// Seed of the latent draw for one pair; independent of pair order.
std::uint64_t pair_seed(std::uint64_t seed, const PlanPair& pair);

PlanResult apply_plan(const Backbone& model, std::span<const int> tokens, const ModalityLayout& layout,
                      const LayerPatchPlan& plan, const std::vector<PairModule>& modules, const ApplyOptions& options);

}  // namespace vif
