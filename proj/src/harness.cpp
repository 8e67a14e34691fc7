#include "vif/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "vif/checkpoint.hpp"
#include "vif/error.hpp"
#include "vif/seed.hpp"

namespace vif {

// ---- modes ----------------------------------------------------------------

std::string mode_name(AblationMode m) {
    switch (m) {
        case AblationMode::full: return "full";
        case AblationMode::no_ap: return "no-ap";
        case AblationMode::no_sp: return "no-sp";
        case AblationMode::full_seq: return "full-seq";
        case AblationMode::deep_only: return "deep-only";
        case AblationMode::mid_deep_feature: return "mid-deep-feature";
    }
    return "?";
}

const std::vector<AblationMode>& all_modes() {
    static const std::vector<AblationMode> modes = {AblationMode::full,     AblationMode::no_ap,
                                                    AblationMode::no_sp,    AblationMode::full_seq,
                                                    AblationMode::deep_only, AblationMode::mid_deep_feature};
    return modes;
}

AblationMode parse_mode(const std::string& s) {
    for (AblationMode m : all_modes())
        if (mode_name(m) == s) return m;
    throw ConfigError("harness", "unknown mode '" + s +
                                     "' (expected full, no-ap, no-sp, full-seq, deep-only, mid-deep-feature)");
}

// ---- model config ---------------------------------------------------------

LayerPatchPlan ModelConfig::plan() const {
    LayerPatchPlan base;
    if (pairs.empty()) {
        base = LayerPatchPlan::standard(backbone.n_layers, alpha);
    } else {
        base.pairs = pairs;
    }
    if (mode == AblationMode::deep_only) base = LayerPatchPlan::deep_only(base);
    base.validate(backbone.n_layers);
    return base;
}

namespace {

std::string fmt_double(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

std::size_t get_size(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("harness", "missing config key " + key);
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("harness", "config key " + key + " is not a count: " + it->second);
    }
}

double get_double(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("harness", "missing config key " + key);
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("harness", "config key " + key + " is not a number: " + it->second);
    }
}

}  // namespace

std::map<std::string, std::string> ModelConfig::to_map() const {
    std::map<std::string, std::string> kv;
    kv["model.n_layers"] = std::to_string(backbone.n_layers);
    kv["model.n_heads"] = std::to_string(backbone.n_heads);
    kv["model.d_model"] = std::to_string(backbone.d_model);
    kv["model.vocab_size"] = std::to_string(backbone.vocab_size);
    kv["model.max_seq"] = std::to_string(backbone.max_seq);
    kv["model.grid_h"] = std::to_string(backbone.grid_h);
    kv["model.grid_w"] = std::to_string(backbone.grid_w);
    kv["model.latent_dim"] = std::to_string(latent_dim);
    kv["model.components"] = std::to_string(components);
    kv["model.attender_heads"] = std::to_string(attender_heads);
    kv["model.decoder_hidden"] = std::to_string(decoder_hidden);
    kv["model.alpha"] = fmt_double(alpha);
    kv["model.learnable_alpha"] = learnable_alpha ? "1" : "0";
    kv["model.mode"] = mode_name(mode);
    std::string p;
    for (const auto& pp : pairs) {
        if (!p.empty()) p += ',';
        p += std::to_string(pp.extract) + "-" + std::to_string(pp.inject) + ":" + fmt_double(pp.alpha);
    }
    kv["model.pairs"] = p.empty() ? "standard" : p;
    return kv;
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    c.backbone.n_layers = get_size(kv, "model.n_layers");
    c.backbone.n_heads = get_size(kv, "model.n_heads");
    c.backbone.d_model = get_size(kv, "model.d_model");
    c.backbone.vocab_size = get_size(kv, "model.vocab_size");
    c.backbone.max_seq = get_size(kv, "model.max_seq");
    c.backbone.grid_h = get_size(kv, "model.grid_h");
    c.backbone.grid_w = get_size(kv, "model.grid_w");
    c.latent_dim = get_size(kv, "model.latent_dim");
    c.components = get_size(kv, "model.components");
    c.attender_heads = get_size(kv, "model.attender_heads");
    c.decoder_hidden = get_size(kv, "model.decoder_hidden");
    c.alpha = get_double(kv, "model.alpha");
    c.learnable_alpha = get_size(kv, "model.learnable_alpha") != 0;
    c.mode = parse_mode(kv.at("model.mode"));
    const std::string& p = kv.at("model.pairs");
    if (p != "standard") {
        std::istringstream is(p);
        for (std::string item; std::getline(is, item, ',');) {
            PlanPair pp;
            char dash = 0, colon = 0;
            std::istringstream it(item);
            if (!(it >> pp.extract >> dash >> pp.inject >> colon >> pp.alpha) || dash != '-' || colon != ':') {
                throw ConfigError("harness", "bad pair '" + item + "' (expected l-l':alpha)");
            }
            c.pairs.push_back(pp);
        }
    }
    return c;
}

// ---- model ----------------------------------------------------------------

VifModel::VifModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), backbone_(config.backbone, seed), plan_(config.plan()) {
    AttenderConfig ac;
    ac.d_model = config.backbone.d_model;
    ac.n_heads = config.attender_heads;
    ac.latent_dim = config.latent_dim;
    ac.components = config.components;
    for (std::size_t i = 0; i < plan_.pairs.size(); ++i) {
        PairModule m;
        m.attender = Attender(ac, derive_seed({seed, i, 1}));
        m.decoder = MixtureDecoder(config.latent_dim, config.components, config.decoder_hidden, derive_seed({seed, i, 2}));
        m.alpha = Tensor::scalar(plan_.pairs[i].alpha, config.learnable_alpha);
        pairs_.push_back(std::move(m));
    }
}

ParameterList VifModel::backbone_parameters() const {
    ParameterList out;
    backbone_.parameters(out);
    return out;
}

ParameterList VifModel::vif_parameters() const {
    ParameterList out;
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
        const auto& p = plan_.pairs[i];
        pairs_[i].parameters(out, "vif.pair" + std::to_string(p.extract) + "_" + std::to_string(p.inject));
    }
    return out;
}

ParameterList VifModel::parameters() const {
    ParameterList out = backbone_parameters();
    ParameterList v = vif_parameters();
    out.insert(out.end(), v.begin(), v.end());
    return out;
}

InjectionKind VifModel::injection_kind() const {
    switch (config_.mode) {
        case AblationMode::full_seq: return InjectionKind::full_sequence;
        case AblationMode::mid_deep_feature: return InjectionKind::hidden_feature;
        default: return InjectionKind::attention;
    }
}

PlanResult VifModel::run_train(const SynthInstance& inst, std::uint64_t seed) const {
    const auto tokens = inst.tokens(true);
    ApplyOptions o;
    o.kind = injection_kind();
    o.source = config_.mode == AblationMode::no_ap ? LatentSource::prior : LatentSource::posterior;
    o.with_prior = true;
    o.seed = seed;
    return apply_plan(backbone_, tokens, inst.layout(true), plan_, pairs_, o);
}

PlanResult VifModel::run_eval(const SynthInstance& inst, std::uint64_t seed, std::optional<double> alpha_override,
                              bool sample_prior, const std::set<std::size_t>& hooks) const {
    const auto tokens = inst.tokens(false);
    ApplyOptions o;
    o.kind = injection_kind();
    o.source = sample_prior ? LatentSource::prior : LatentSource::prior_mean;
    o.seed = seed;
    o.alpha_override = alpha_override;
    o.extra_hooks = hooks;
    return apply_plan(backbone_, tokens, inst.layout(false), plan_, pairs_, o);
}

StepLoss instance_loss(const VifModel& model, const SynthInstance& inst, std::uint64_t seed, double beta, double gamma) {
    PlanResult r = model.run_train(inst, seed);
    const auto tokens = inst.tokens(true);
    StepLoss s;
    s.recon = recon_loss(r.logits, tokens, inst.layout(true));
    const std::size_t n = r.pairs.size();
    if (n == 0 || model.config().mode == AblationMode::no_ap) {
        s.kl = Tensor::scalar(0.0);
    } else {
        std::vector<Tensor> kls;
        for (const auto& p : r.pairs) kls.push_back(reshape(kl_divergence(*p.posterior, *p.prior), {1}));
        s.kl = scale(sum(concat(kls, 0)), 1.0 / static_cast<double>(n));
    }
    if (n == 0) {
        s.sparsity = Tensor::scalar(0.0);
    } else {
        std::vector<Tensor> sp;
        for (const auto& p : r.pairs) sp.push_back(reshape(sparsity_loss(p.mixture), {1}));
        s.sparsity = scale(sum(concat(sp, 0)), 1.0 / static_cast<double>(n));
    }
    s.total = total_loss(s.recon, s.kl, s.sparsity, beta, gamma);
    return s;
}

// ---- optimizer ------------------------------------------------------------

Adam::Adam(ParameterList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].tensor;
        if (!p.has_grad()) continue;
        auto g = p.mutable_grad();
        auto x = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
            m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
            v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
            x[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
    zero_grad();
}

void Adam::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

// ---- training -------------------------------------------------------------

void TrainConfig::validate() const {
    if (batch == 0) throw ConfigError("harness", "batch must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("harness", "lr must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw ConfigError("harness", "adam moment coefficients must lie in [0, 1)");
    }
    if (beta < 0.0 || gamma < 0.0 || warmup_fraction < 0.0) throw ConfigError("harness", "schedules must be nonnegative");
}

void write_train_log_header(std::ostream& out) { out << "step,recon,kl,sparsity,total,beta_effective\n"; }

void write_train_log_row(std::ostream& out, const TrainLogRow& row) {
    std::ostringstream os;
    os << std::setprecision(17) << row.step << ',' << row.loss.recon << ',' << row.loss.kl << ',' << row.loss.sparsity
       << ',' << row.loss.total << ',' << row.loss.beta << '\n';
    out << os.str();
}

std::map<std::string, std::string> checkpoint_config(const VifModel& model, const Corpus& train_corpus) {
    auto kv = model.config().to_map();
    kv["task.colors"] = std::to_string(train_corpus.colors);
    kv["task.shapes"] = std::to_string(train_corpus.shapes);
    std::vector<std::uint64_t> hashes;
    for (const auto& inst : train_corpus.instances) hashes.push_back(instance_hash(inst));
    std::sort(hashes.begin(), hashes.end());
    hashes.erase(std::unique(hashes.begin(), hashes.end()), hashes.end());
    std::ostringstream os;
    os << std::hex;
    for (std::size_t i = 0; i < hashes.size(); ++i) os << (i ? "," : "") << hashes[i];
    kv["train.hashes"] = os.str();
    return kv;
}

void save_model(const std::string& path, const VifModel& model, const Corpus& train_corpus) {
    save_checkpoint(path, checkpoint_config(model, train_corpus), model.parameters());
}

LoadedModel load_model(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    LoadedModel lm{VifModel(ModelConfig::from_map(ck.config), 0), {}, 0, 0};
    ParameterList params = lm.model.parameters();
    restore_parameters(ck, params);
    lm.colors = get_size(ck.config, "task.colors");
    lm.shapes = get_size(ck.config, "task.shapes");
    auto it = ck.config.find("train.hashes");
    if (it != ck.config.end() && !it->second.empty()) {
        std::istringstream is(it->second);
        for (std::string h; std::getline(is, h, ',');) lm.train_hashes.insert(std::stoull(h, nullptr, 16));
    }
    return lm;
}

namespace {

void check_task(const VifModel& model, const Corpus& corpus) {
    const BackboneConfig& b = model.backbone().config();
    if (corpus.grid_h != b.grid_h || corpus.grid_w != b.grid_w) {
        throw ConfigError("harness", "corpus grid " + std::to_string(corpus.grid_h) + "x" + std::to_string(corpus.grid_w) +
                                         " does not match the model grid " + std::to_string(b.grid_h) + "x" +
                                         std::to_string(b.grid_w));
    }
    if (corpus.vocabulary().size != b.vocab_size) {
        throw ConfigError("harness", "corpus vocabulary of " + std::to_string(corpus.vocabulary().size) +
                                         " tokens does not match the model's " + std::to_string(b.vocab_size));
    }
}

// Backbone leaves stop recording gradients for the lifetime of the guard.
class FreezeGuard {
public:
    FreezeGuard(const ParameterList& params, bool active) : params_(params), active_(active) {
        if (active_)
            for (auto& p : params_) p.tensor.set_requires_grad(false);
    }
    ~FreezeGuard() {
        if (active_)
            for (auto& p : params_) p.tensor.set_requires_grad(true);
    }

private:
    ParameterList params_;
    bool active_;
};

}  // namespace

TrainResult train(VifModel& model, const TrainConfig& config, const Corpus& corpus) {
    config.validate();
    if (corpus.instances.empty()) throw ContractError("harness", "training corpus is empty");
    check_task(model, corpus);

    const double gamma = config.effective_gamma(model.config().mode);
    FreezeGuard freeze(model.backbone_parameters(), config.freeze_backbone);
    Adam opt(config.freeze_backbone ? model.vif_parameters() : model.parameters(), config.lr, config.adam_beta1,
             config.adam_beta2);
    opt.zero_grad();

    std::ofstream log_file;
    if (!config.log_path.empty()) {
        log_file.open(config.log_path, std::ios::trunc);
        if (!log_file) throw ConfigError("harness", "cannot open log " + config.log_path);
        write_train_log_header(log_file);
    }

    std::mt19937_64 order_rng(derive_seed({config.seed, 0x0bdeULL}));
    std::vector<std::size_t> order(corpus.instances.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    std::size_t cursor = 0;

    TrainResult result;
    const double inv_b = 1.0 / static_cast<double>(config.batch);
    for (std::size_t step = 0; step < config.steps; ++step) {
        const double beta = beta_at(step, config.steps, config.beta, config.warmup_fraction);
        double recon = 0.0, kl = 0.0, sparsity = 0.0;
        for (std::size_t b = 0; b < config.batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), order_rng);
                cursor = 0;
            }
            const SynthInstance& inst = corpus.instances[order[cursor++]];
            StepLoss loss;
            bool finite = true;
            try {
                loss = instance_loss(model, inst, derive_seed({config.seed, step, b}), beta, gamma);
                finite = loss.total.all_finite();
            } catch (const NumericError&) {
                finite = false;
            }
            if (!finite) {
                // Parameters still hold the last completed update.
                if (!config.checkpoint_path.empty()) save_model(config.checkpoint_path, model, corpus);
                throw NumericError("harness", "loss diverged at step " + std::to_string(step) +
                                                  "; last good state kept at " +
                                                  (config.checkpoint_path.empty() ? "<none>" : config.checkpoint_path));
            }
            backward(scale(loss.total, inv_b));
            recon += loss.recon.item() * inv_b;
            kl += loss.kl.item() * inv_b;
            sparsity += loss.sparsity.item() * inv_b;
        }
        opt.step();
        TrainLogRow row{step, total_loss(recon, kl, sparsity, beta, gamma)};
        if (log_file.is_open()) write_train_log_row(log_file, row);
        result.log.push_back(row);
        if (config.checkpoint_every && !config.checkpoint_path.empty() && (step + 1) % config.checkpoint_every == 0) {
            save_model(config.checkpoint_path, model, corpus);
        }
    }
    if (!config.checkpoint_path.empty()) save_model(config.checkpoint_path, model, corpus);
    return result;
}

// ---- evaluation -----------------------------------------------------------

int greedy_answer(const Tensor& logits, const Vocabulary& vocab) {
    const std::size_t t = logits.dim(0);
    const std::size_t v = logits.dim(1);
    const auto d = logits.data();
    int best = vocab.answer0;
    double best_v = -INFINITY;
    for (std::size_t k = 0; k < vocab.answer_count; ++k) {
        const std::size_t id = static_cast<std::size_t>(vocab.answer0) + k;
        const double x = d[(t - 1) * v + id];
        if (x > best_v) {
            best_v = x;
            best = static_cast<int>(id);
        }
    }
    return best;
}

EvalReport evaluate(const VifModel& model, const Corpus& corpus, const EvalOptions& options,
                    const std::set<std::uint64_t>& train_hashes) {
    check_task(model, corpus);
    if (corpus.instances.empty()) throw ContractError("harness", "evaluation corpus is empty");
    for (const auto& inst : corpus.instances) {
        if (train_hashes.count(instance_hash(inst))) {
            throw ContractError("harness", "held-out corpus shares instances with the training split");
        }
    }
    NoGradGuard no_grad;
    const Vocabulary vocab = corpus.vocabulary();
    const std::size_t n =
        options.limit ? std::min(options.limit, corpus.instances.size()) : corpus.instances.size();
    EvalReport r;
    std::size_t correct = 0, amb_correct = 0;
    double loc = 0.0, ent = 0.0, base = 0.0, ment = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const SynthInstance& inst = corpus.instances[i];
        const std::uint64_t seed = derive_seed({options.seed, i});
        PlanResult res = model.run_eval(inst, seed);
        const bool ok = greedy_answer(res.logits, vocab) == inst.answer[0];
        correct += ok;
        if (inst.ambiguous()) {
            ++r.ambiguous;
            amb_correct += ok;
        }
        const std::size_t np = res.pairs.size();
        if (np) {
            double l = 0.0, e = 0.0, me = 0.0;
            for (std::size_t k = 0; k < np; ++k) {
                l += localization_score(res.pairs[k].map, inst);
                e += res.report.records[k].post_entropy;
                me += map_entropy(res.pairs[k].map);
            }
            loc += l / static_cast<double>(np);
            ent += e / static_cast<double>(np);
            ment += me / static_cast<double>(np);
            if (options.baseline_entropy) {
                PlanResult b = model.run_eval(inst, seed, 0.0);
                double be = 0.0;
                for (const auto& rec : b.report.records) be += rec.post_entropy;
                base += be / static_cast<double>(np);
            }
        }
    }
    const double dn = static_cast<double>(n);
    r.instances = n;
    r.accuracy = static_cast<double>(correct) / dn;
    r.ambiguous_accuracy = r.ambiguous ? static_cast<double>(amb_correct) / static_cast<double>(r.ambiguous) : 0.0;
    r.unambiguous_accuracy =
        n > r.ambiguous ? static_cast<double>(correct - amb_correct) / static_cast<double>(n - r.ambiguous) : 0.0;
    r.localization = loc / dn;
    r.deep_entropy = ent / dn;
    r.baseline_deep_entropy = base / dn;
    r.map_entropy = ment / dn;
    return r;
}

void write_eval_report(std::ostream& out, const EvalReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "instances," << r.instances << '\n'
       << "ambiguous," << r.ambiguous << '\n'
       << "accuracy," << r.accuracy << '\n'
       << "ambiguous_accuracy," << r.ambiguous_accuracy << '\n'
       << "unambiguous_accuracy," << r.unambiguous_accuracy << '\n'
       << "localization," << r.localization << '\n'
       << "deep_entropy," << r.deep_entropy << '\n'
       << "baseline_deep_entropy," << r.baseline_deep_entropy << '\n'
       << "map_entropy," << r.map_entropy << '\n';
    out << os.str();
}

// ---- ablation -------------------------------------------------------------

std::vector<AblationRow> run_ablation(const ModelConfig& base, const TrainConfig& train_config, const Corpus& train_corpus,
                                      const Corpus& eval_corpus, const std::vector<AblationMode>& modes) {
    std::vector<AblationRow> rows;
    TrainConfig tc = train_config;
    tc.checkpoint_path.clear();
    tc.log_path.clear();
    for (AblationMode m : modes) {
        ModelConfig mc = base;
        mc.mode = m;
        VifModel model(mc, train_config.seed);
        train(model, tc, train_corpus);
        EvalOptions eo;
        eo.seed = train_config.seed;
        rows.push_back({m, evaluate(model, eval_corpus, eo)});
    }
    return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
    const EvalReport* full = nullptr;
    for (const auto& r : rows)
        if (r.mode == AblationMode::full) full = &r.report;
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "mode,accuracy,ambiguous_accuracy,unambiguous_accuracy,localization,deep_entropy,map_entropy,"
          "delta_accuracy,delta_localization\n";
    for (const auto& r : rows) {
        const EvalReport& e = r.report;
        os << mode_name(r.mode) << ',' << e.accuracy << ',' << e.ambiguous_accuracy << ',' << e.unambiguous_accuracy
           << ',' << e.localization << ',' << e.deep_entropy << ',' << e.map_entropy << ','
           << (full ? e.accuracy - full->accuracy : 0.0) << ',' << (full ? e.localization - full->localization : 0.0)
           << '\n';
    }
    out << os.str();
}

}  // namespace vif
