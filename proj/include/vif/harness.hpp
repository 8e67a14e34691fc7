#pragma once

// End-to-end model (backbone + per-pair attender/decoder/alpha), Adam,
// training with the ablation modes, greedy evaluation and the ablation suite.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vif/backbone.hpp"
#include "vif/inject.hpp"
#include "vif/objective.hpp"
#include "vif/synth.hpp"

namespace vif {

enum class AblationMode { full, no_ap, no_sp, full_seq, deep_only, mid_deep_feature };

std::string mode_name(AblationMode m);
AblationMode parse_mode(const std::string& s);  // ConfigError on unknown names
const std::vector<AblationMode>& all_modes();

struct ModelConfig {
    BackboneConfig backbone;
    std::size_t latent_dim = 32;
    std::size_t components = 16;
    std::size_t attender_heads = 4;
    std::size_t decoder_hidden = 32;
    double alpha = 0.5;
    bool learnable_alpha = false;
    AblationMode mode = AblationMode::full;
    // Empty means LayerPatchPlan::standard for the depth.
    std::vector<PlanPair> pairs;

    LayerPatchPlan plan() const;
    std::map<std::string, std::string> to_map() const;
    static ModelConfig from_map(const std::map<std::string, std::string>& kv);
};

class VifModel {
public:
    VifModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const Backbone& backbone() const { return backbone_; }
    const LayerPatchPlan& plan() const { return plan_; }
    const std::vector<PairModule>& pairs() const { return pairs_; }

    ParameterList parameters() const;
    ParameterList backbone_parameters() const;
    ParameterList vif_parameters() const;

    InjectionKind injection_kind() const;
    // Training-side pass: posterior latent unless the mode is no-ap.
    PlanResult run_train(const SynthInstance& inst, std::uint64_t seed) const;
    // Inference pass on grid + question with a prior latent.
    PlanResult run_eval(const SynthInstance& inst, std::uint64_t seed, std::optional<double> alpha_override = {},
                        bool sample_prior = true, const std::set<std::size_t>& hooks = {}) const;

private:
    ModelConfig config_;
    Backbone backbone_;
    LayerPatchPlan plan_;
    std::vector<PairModule> pairs_;
};

struct StepLoss {
    Tensor total;
    Tensor recon;
    Tensor kl;
    Tensor sparsity;
};

// Loss of one training instance under the model's mode.
StepLoss instance_loss(const VifModel& model, const SynthInstance& inst, std::uint64_t seed, double beta, double gamma);

class Adam {
public:
    Adam(ParameterList params, double lr, double beta1, double beta2, double eps = 1e-8);
    // Applies one update from the accumulated gradients, then clears them.
    void step();
    void zero_grad();
    std::size_t steps_taken() const { return t_; }

private:
    ParameterList params_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 32;
    double lr = 3e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double beta = 0.1;
    double warmup_fraction = 0.1;
    double gamma = 0.01;
    bool freeze_backbone = false;
    std::uint64_t seed = 1;
    std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
    std::string checkpoint_path;       // empty: no checkpoint files
    std::string log_path;              // empty: no log file

    void validate() const;
    // Gamma after the mode is applied (no-sp turns the regularizer off).
    double effective_gamma(AblationMode mode) const { return mode == AblationMode::no_sp ? 0.0 : gamma; }
};

struct TrainLogRow {
    std::size_t step = 0;
    LossBreakdown loss;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
};

void write_train_log_header(std::ostream& out);
void write_train_log_row(std::ostream& out, const TrainLogRow& row);

// Checkpoint config block: model keys, the training-corpus hashes and task dims.
std::map<std::string, std::string> checkpoint_config(const VifModel& model, const Corpus& train_corpus);
void save_model(const std::string& path, const VifModel& model, const Corpus& train_corpus);

struct LoadedModel {
    VifModel model;
    std::set<std::uint64_t> train_hashes;
    std::size_t colors = 0;
    std::size_t shapes = 0;
};
LoadedModel load_model(const std::string& path);

// Throws NumericError on a non-finite loss after saving the last good state
// to checkpoint_path (when set).
TrainResult train(VifModel& model, const TrainConfig& config, const Corpus& corpus);

struct EvalOptions {
    std::uint64_t seed = 1;
    bool baseline_entropy = false;  // also run each instance with alpha forced to 0
    std::size_t limit = 0;          // 0: whole corpus
};

struct EvalReport {
    std::size_t instances = 0;
    std::size_t ambiguous = 0;
    double accuracy = 0.0;
    double ambiguous_accuracy = 0.0;
    double unambiguous_accuracy = 0.0;
    double localization = 0.0;
    double deep_entropy = 0.0;           // injected forward, mean over pairs and instances
    double baseline_deep_entropy = 0.0;  // alpha forced to 0, when requested
    double map_entropy = 0.0;
};

// Greedy answer: argmax of the final position over the answer tokens.
int greedy_answer(const Tensor& logits, const Vocabulary& vocab);

// Throws ConfigError when the corpus grid or vocabulary disagrees with the
// model, ValidationError-class ContractError when it overlaps training data.
EvalReport evaluate(const VifModel& model, const Corpus& corpus, const EvalOptions& options,
                    const std::set<std::uint64_t>& train_hashes = {});
void write_eval_report(std::ostream& out, const EvalReport& r);

struct AblationRow {
    AblationMode mode;
    EvalReport report;
};

// Trains every mode from the same seed and evaluates on the held-out corpus.
std::vector<AblationRow> run_ablation(const ModelConfig& base, const TrainConfig& train_config, const Corpus& train_corpus,
                                      const Corpus& eval_corpus, const std::vector<AblationMode>& modes);
// Table-3-shaped CSV; deltas are against the full-mode row when present.
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace vif
