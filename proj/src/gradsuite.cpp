#include "vif/gradsuite.hpp"

#include <random>

#include "vif/gradcheck.hpp"
#include "vif/seed.hpp"

namespace vif {

const std::vector<GradCase>& registered_grad_cases() {
    static const std::vector<GradCase> cases = {
        {"recon", AblationMode::full, LossTerm::recon},
        {"kl", AblationMode::full, LossTerm::kl},
        {"sparsity", AblationMode::full, LossTerm::sparsity},
        {"total", AblationMode::full, LossTerm::total},
        {"total/no-ap", AblationMode::no_ap, LossTerm::total},
        {"total/full-seq", AblationMode::full_seq, LossTerm::total},
        {"total/deep-only", AblationMode::deep_only, LossTerm::total},
        {"total/mid-deep-feature", AblationMode::mid_deep_feature, LossTerm::total},
    };
    return cases;
}

TaskConfig toy_task_config(std::uint64_t seed) {
    TaskConfig t;
    t.grid_h = 4;
    t.grid_w = 4;
    t.colors = 2;
    t.shapes = 2;
    t.min_objects = 3;
    t.max_objects = 5;
    t.ambiguity_rate = 0.5;
    t.seed = seed;
    return t;
}

ModelConfig toy_model_config(AblationMode mode) {
    const Vocabulary v = Vocabulary::for_task(toy_task_config(1));
    ModelConfig c;
    c.backbone.n_layers = 2;
    c.backbone.n_heads = 2;
    c.backbone.d_model = 8;
    c.backbone.vocab_size = v.size;
    c.backbone.max_seq = 32;
    c.backbone.grid_h = 4;
    c.backbone.grid_w = 4;
    c.latent_dim = 3;
    c.components = 3;
    c.attender_heads = 2;
    c.decoder_hidden = 6;
    c.alpha = 0.7;
    c.learnable_alpha = true;
    c.mode = mode;
    c.pairs = {{0, 1, 0.7}};
    return c;
}

GradCaseResult run_grad_case(const GradCase& c, const GradSuiteOptions& options) {
    GradCaseResult r;
    r.name = c.name;
    for (std::size_t s = 0; s < options.seeds; ++s) {
        const std::uint64_t seed = options.first_seed + s;
        VifModel model(toy_model_config(c.mode), seed);
        ParameterList params = model.parameters();
        std::mt19937_64 rng(derive_seed({seed, 0x9c}));
        std::normal_distribution<double> noise(0.0, 0.3);
        for (auto& p : params) {
            if (p.name.find(".alpha") != std::string::npos) continue;
            for (double& x : p.tensor.mutable_data()) x += noise(rng);
        }
        const SynthInstance inst = generate(toy_task_config(seed), 1)[0];
        auto f = [&]() {
            StepLoss l = instance_loss(model, inst, seed, 0.1, 0.01);
            switch (c.term) {
                case LossTerm::recon: return l.recon;
                case LossTerm::kl: return l.kl;
                case LossTerm::sparsity: return l.sparsity;
                case LossTerm::total: break;
            }
            return l.total;
        };
        std::vector<Tensor> point;
        for (const auto& p : params) point.push_back(p.tensor);
        GradCheckOptions go;
        go.h = options.h;
        go.max_coords = options.coords;
        go.seed = derive_seed({seed, 0x6c});
        const GradCheckResult g = grad_check(f, point, go);
        r.coords += g.coords_checked;
        ++r.seeds;
        if (r.seeds == 1 || g.max_rel_error > r.max_rel_error) {
            r.max_rel_error = g.max_rel_error;
            r.worst_seed = seed;
            r.worst_parameter = params[g.worst_tensor].name + "[" + std::to_string(g.worst_index) + "]";
        }
    }
    r.passed = r.max_rel_error < options.tolerance;
    return r;
}

std::vector<GradCaseResult> run_grad_suite(const GradSuiteOptions& options) {
    std::vector<GradCaseResult> out;
    for (const auto& c : registered_grad_cases()) out.push_back(run_grad_case(c, options));
    return out;
}

}  // namespace vif
