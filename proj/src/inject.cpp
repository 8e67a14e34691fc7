#include "vif/inject.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "vif/error.hpp"
#include "vif/seed.hpp"

namespace vif {

void LayerPatchPlan::validate(std::size_t n_layers) const {
    std::set<std::size_t> seen;
    for (const auto& p : pairs) {
        const std::string tag = "(" + std::to_string(p.extract) + "," + std::to_string(p.inject) + ")";
        if (p.extract >= n_layers || p.inject >= n_layers) {
            throw PlanError("inject", "pair " + tag + " outside a " + std::to_string(n_layers) + "-layer model");
        }
        if (allow_same_layer ? p.extract > p.inject : p.extract >= p.inject) {
            throw PlanError("inject", "pair " + tag + " must extract before it injects");
        }
        if (!seen.insert(p.inject).second) throw PlanError("inject", "injection layer repeated in " + tag);
        if (!std::isfinite(p.alpha) || p.alpha < 0.0) throw PlanError("inject", "alpha must be finite and >= 0");
    }
}

std::set<std::size_t> LayerPatchPlan::extraction_layers() const {
    std::set<std::size_t> s;
    for (const auto& p : pairs) s.insert(p.extract);
    return s;
}

std::set<std::size_t> LayerPatchPlan::injection_layers() const {
    std::set<std::size_t> s;
    for (const auto& p : pairs) s.insert(p.inject);
    return s;
}

LayerPatchPlan LayerPatchPlan::standard(std::size_t n_layers, double alpha) {
    static constexpr std::size_t from[4] = {11, 13, 15, 17};
    static constexpr std::size_t to[4] = {25, 27, 29, 31};
    LayerPatchPlan plan;
    std::set<std::size_t> used;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t l = from[i] * n_layers / 32;
        const std::size_t lp = to[i] * n_layers / 32;
        if (used.insert(lp).second) plan.pairs.push_back({l, lp, alpha});
    }
    plan.validate(n_layers);
    return plan;
}

LayerPatchPlan LayerPatchPlan::deep_only(const LayerPatchPlan& plan) {
    LayerPatchPlan out;
    out.allow_same_layer = true;
    for (const auto& p : plan.pairs) out.pairs.push_back({p.inject, p.inject, p.alpha});
    return out;
}

namespace {

void check_map(const ImportanceMap& map, const ModalityLayout& layout, std::size_t seq_len) {
    layout.validate();
    if (seq_len != layout.seq_len()) throw LayoutError("inject", "T disagrees with the layout");
    if (map.v_hat.numel() != layout.visual.size()) {
        throw LayoutError("inject", "importance map over " + std::to_string(map.v_hat.numel()) + " cells, visual span has " +
                                        std::to_string(layout.visual.size()));
    }
}

}  // namespace

Tensor build_bias(const ImportanceMap& map, const ModalityLayout& layout, std::size_t seq_len) {
    check_map(map, layout, seq_len);
    const std::size_t nv = layout.visual.size();
    if (nv == seq_len) return reshape(map.v_hat, {seq_len});
    return concat({reshape(map.v_hat, {nv}), Tensor::zeros({seq_len - nv})}, 0);
}

Tensor build_full_sequence_bias(const ImportanceMap& map, const ModalityLayout& layout, std::size_t seq_len) {
    check_map(map, layout, seq_len);
    const std::size_t nv = layout.visual.size();
    const double t = static_cast<double>(seq_len);
    Tensor visual = scale(reshape(map.v_hat, {nv}), static_cast<double>(nv) / t);
    if (nv == seq_len) return visual;
    return concat({visual, Tensor::full({seq_len - nv}, 1.0 / t)}, 0);
}

AttentionTensor inject(const AttentionTensor& flow, const Tensor& bias, const Tensor& alpha) {
    const std::size_t t = flow.seq_len();
    if (bias.shape() != Shape{t}) throw DimensionError("inject", "bias must be [T]");
    if (alpha.numel() != 1) throw DimensionError("inject", "alpha must be a scalar");
    if (alpha.item() == 0.0 && !alpha.requires_grad()) return flow;
    if (alpha.item() < 0.0 && !alpha.requires_grad()) throw ContractError("inject", "alpha must be nonnegative");
    std::vector<double> m(t * t);
    for (std::size_t i = 0; i < t * t; ++i) m[i] = (*flow.mask)[i] ? 1.0 : 0.0;
    Tensor visible = Tensor::from_vector({t, t}, std::move(m));
    // A learned alpha may wander below zero; clamping keeps the rows valid.
    Tensor a = alpha.requires_grad() ? clamp(reshape(alpha, {}), 0.0, 1e6) : reshape(alpha, {});
    Tensor biased = add(flow.probs, mul(a, bias));
    return {row_normalize(mul(biased, visible)), flow.mask};
}

AttentionTensor inject(const AttentionTensor& flow, const Tensor& bias, double alpha) {
    return inject(flow, bias, Tensor::scalar(alpha));
}

void InjectionReport::write_csv(std::ostream& out) const {
    out << "pair,alpha,pre_entropy,post_entropy,pre_ratio,post_ratio,max_rowsum_dev\n";
    std::ostringstream row;
    row << std::setprecision(17);
    for (const auto& r : records) {
        row.str("");
        row << r.extract << "->" << r.inject << ',' << r.alpha << ',' << r.pre_entropy << ',' << r.post_entropy << ','
            << r.pre_ratio << ',' << r.post_ratio << ',' << r.max_rowsum_dev;
        out << row.str() << '\n';
    }
}

void PairModule::parameters(ParameterList& out, const std::string& prefix) const {
    attender.parameters(out, prefix + ".attender");
    decoder.parameters(out, prefix + ".decoder");
    if (alpha.requires_grad()) out.push_back({prefix + ".alpha", alpha});
}

std::uint64_t pair_seed(std::uint64_t seed, const PlanPair& pair) {
    return derive_seed({seed, pair.extract, pair.inject});
}

PlanResult apply_plan(const Backbone& model, std::span<const int> tokens, const ModalityLayout& layout,
                      const LayerPatchPlan& plan, const std::vector<PairModule>& modules, const ApplyOptions& options) {
    plan.validate(model.config().n_layers);
    if (modules.size() != plan.pairs.size()) {
        throw PlanError("inject", std::to_string(plan.pairs.size()) + " pairs but " + std::to_string(modules.size()) +
                                      " pair modules");
    }
    const std::size_t n = plan.pairs.size();
    const std::size_t t = tokens.size();
    const std::size_t nv = layout.visual.size();
    std::map<std::size_t, std::vector<std::size_t>> by_extract;
    std::map<std::size_t, std::size_t> by_inject;
    for (std::size_t i = 0; i < n; ++i) {
        by_extract[plan.pairs[i].extract].push_back(i);
        by_inject[plan.pairs[i].inject] = i;
    }

    PlanResult res;
    res.pairs.resize(n);
    res.report.records.resize(n);
    std::vector<bool> ready(n, false);
    std::vector<Tensor> extracted(n);

    auto alpha_of = [&](std::size_t i) {
        return options.alpha_override ? Tensor::scalar(*options.alpha_override) : modules[i].alpha;
    };

    ForwardOptions fo;
    fo.hooks = options.extra_hooks;
    fo.on_layer_input = [&](std::size_t l, const Tensor& x) {
        auto it = by_extract.find(l);
        if (it == by_extract.end()) return;
        Tensor v = slice(x, 0, layout.visual.begin, nv);
        Tensor q = slice(x, 0, layout.question.begin, layout.question.size());
        for (std::size_t i : it->second) {
            const PairModule& m = modules[i];
            PairOutcome& out = res.pairs[i];
            const std::uint64_t s = pair_seed(options.seed, plan.pairs[i]);
            if (options.source != LatentSource::posterior || options.with_prior) out.prior = m.attender.encode_prior(v, q);
            switch (options.source) {
                case LatentSource::posterior: {
                    Tensor a = slice(x, 0, layout.answer.begin, layout.answer.size());
                    out.posterior = m.attender.encode_posterior(v, q, a);
                    out.sample = reparameterize(*out.posterior, s);
                    break;
                }
                case LatentSource::prior: out.sample = reparameterize(*out.prior, s); break;
                case LatentSource::prior_mean: out.sample = mean_sample(*out.prior); break;
            }
            out.mixture = m.decoder.decode(out.sample.z);
            out.map = aggregate_and_normalize(out.mixture, layout.grid_h, layout.grid_w);
            extracted[i] = x;
            ready[i] = true;
        }
    };

    auto pending = [&](std::size_t l) {
        const std::size_t i = by_inject.at(l);
        if (!ready[i]) throw PlanError("inject", "layer " + std::to_string(l) + " patched before its extraction ran");
        return i;
    };

    if (options.kind == InjectionKind::hidden_feature) {
        fo.hidden_patch_layers = plan.injection_layers();
        for (std::size_t l : fo.hidden_patch_layers) fo.hooks.insert(l);
        fo.patch_hidden = [&](std::size_t l, const Tensor& x) {
            const std::size_t i = pending(l);
            Tensor vis = mul(slice(extracted[i], 0, layout.visual.begin, nv), reshape(alpha_of(i), {}));
            if (t > nv) vis = concat({vis, Tensor::zeros({t - nv, x.dim(1)})}, 0);
            return add(x, vis);
        };
    } else {
        fo.patch_layers = plan.injection_layers();
        fo.patch_attention = [&](std::size_t l, const AttentionTensor& at) {
            const std::size_t i = pending(l);
            const ImportanceMap& map = res.pairs[i].map;
            Tensor bias = options.kind == InjectionKind::attention ? build_bias(map, layout, t)
                                                                    : build_full_sequence_bias(map, layout, t);
            Tensor a = alpha_of(i);
            AttentionTensor out = inject(at, bias, a);
            InjectionRecord& r = res.report.records[i];
            r.alpha = a.item();
            r.pre_entropy = visual_attention_entropy(at, layout, options.scope).mean;
            r.pre_ratio = vision_attention_ratio(at, layout, options.scope);
            r.post_entropy = visual_attention_entropy(out, layout, options.scope).mean;
            r.post_ratio = vision_attention_ratio(out, layout, options.scope);
            r.max_rowsum_dev = out.check(1e-6);
            return out;
        };
    }

    ForwardResult fwd = model.forward(tokens, layout, fo);
    for (std::size_t i = 0; i < n; ++i) {
        InjectionRecord& r = res.report.records[i];
        r.extract = plan.pairs[i].extract;
        r.inject = plan.pairs[i].inject;
        if (options.kind == InjectionKind::hidden_feature) {
            const AttentionTensor& at = fwd.trace.attention.at(r.inject);
            r.alpha = alpha_of(i).item();
            r.pre_entropy = r.pre_ratio = std::numeric_limits<double>::quiet_NaN();
            r.post_entropy = visual_attention_entropy(at, layout, options.scope).mean;
            r.post_ratio = vision_attention_ratio(at, layout, options.scope);
            r.max_rowsum_dev = at.check(1e-6);
        }
    }
    if (options.kind == InjectionKind::hidden_feature) {
        for (std::size_t l : plan.injection_layers()) {
            if (!options.extra_hooks.count(l)) {
                fwd.trace.attention.erase(l);
                fwd.trace.hidden.erase(l);
            }
        }
    }
    res.logits = fwd.logits;
    res.trace = std::move(fwd.trace);
    return res;
}

}  // namespace vif
