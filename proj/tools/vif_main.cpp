// vif: command-line entry point.
//   gen | train | eval | ablate | analyze | render-map | dump-attn | gradcheck
// Every subcommand accepts --config <file> with flat key=value lines named
// after its long flags; flags given on the command line win.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vif/checkpoint.hpp"
#include "vif/error.hpp"
#include "vif/flowstat.hpp"
#include "vif/gmm.hpp"
#include "vif/gradsuite.hpp"
#include "vif/harness.hpp"
#include "vif/synth.hpp"

using namespace vif;

namespace {

struct TaskFlags {
    std::size_t grid_h = 8, grid_w = 8, colors = 4, shapes = 4;
    double ambiguity = 0.5;
    std::size_t min_objects = 6, max_objects = 10;

    void add(CLI::App* app) {
        app->add_option("--grid-h", grid_h, "grid rows")->capture_default_str();
        app->add_option("--grid-w", grid_w, "grid columns")->capture_default_str();
        app->add_option("--colors", colors, "object colors")->capture_default_str();
        app->add_option("--shapes", shapes, "object shapes")->capture_default_str();
        app->add_option("--ambiguity", ambiguity, "fraction of ambiguous instances")->capture_default_str();
        app->add_option("--min-objects", min_objects)->capture_default_str();
        app->add_option("--max-objects", max_objects)->capture_default_str();
    }
    TaskConfig make(std::uint64_t seed) const {
        TaskConfig t;
        t.grid_h = grid_h;
        t.grid_w = grid_w;
        t.colors = colors;
        t.shapes = shapes;
        t.ambiguity_rate = ambiguity;
        t.min_objects = min_objects;
        t.max_objects = max_objects;
        t.seed = seed;
        return t;
    }
};

struct ModelFlags {
    std::size_t layers = 8, heads = 4, d_model = 64, latent_dim = 32, components = 16, attender_heads = 4,
                decoder_hidden = 32;
    double alpha = 0.5;
    bool learnable_alpha = false;
    std::string pairs;
    std::string mode = "full";

    void add(CLI::App* app) {
        app->add_option("--layers", layers, "backbone depth")->capture_default_str();
        app->add_option("--heads", heads, "attention heads")->capture_default_str();
        app->add_option("--d-model", d_model, "residual width")->capture_default_str();
        app->add_option("--latent-dim", latent_dim, "latent width per component")->capture_default_str();
        app->add_option("--components", components, "mixture components K")->capture_default_str();
        app->add_option("--attender-heads", attender_heads)->capture_default_str();
        app->add_option("--decoder-hidden", decoder_hidden)->capture_default_str();
        app->add_option("--alpha", alpha, "injection strength")->capture_default_str();
        app->add_flag("--learnable-alpha", learnable_alpha, "train alpha (clamped to be nonnegative)");
        app->add_option("--pairs", pairs, "layer pairs l-l',... (default: standard plan)");
        app->add_option("--mode", mode, "full | no-ap | no-sp | full-seq | deep-only | mid-deep-feature")
            ->capture_default_str();
    }
    ModelConfig make(const Corpus& corpus) const {
        ModelConfig c;
        c.backbone.n_layers = layers;
        c.backbone.n_heads = heads;
        c.backbone.d_model = d_model;
        c.backbone.vocab_size = corpus.vocabulary().size;
        c.backbone.grid_h = corpus.grid_h;
        c.backbone.grid_w = corpus.grid_w;
        std::size_t longest = 0;
        for (const auto& inst : corpus.instances) longest = std::max(longest, inst.tokens(true).size());
        c.backbone.max_seq = std::max(c.backbone.max_seq, longest);
        c.latent_dim = latent_dim;
        c.components = components;
        c.attender_heads = attender_heads;
        c.decoder_hidden = decoder_hidden;
        c.alpha = alpha;
        c.learnable_alpha = learnable_alpha;
        c.mode = parse_mode(mode);
        c.pairs = parse_pairs(pairs, alpha);
        return c;
    }
    static std::vector<PlanPair> parse_pairs(const std::string& s, double alpha) {
        std::vector<PlanPair> out;
        if (s.empty() || s == "standard") return out;
        std::istringstream is(s);
        for (std::string item; std::getline(is, item, ',');) {
            PlanPair p;
            p.alpha = alpha;
            char dash = 0;
            std::istringstream it(item);
            if (!(it >> p.extract >> dash >> p.inject) || dash != '-' || !it.eof()) {
                throw UsageError("cli", "bad --pairs entry '" + item + "' (expected l-l')");
            }
            out.push_back(p);
        }
        return out;
    }
};

struct TrainFlags {
    std::size_t steps = 2000, batch = 32, checkpoint_every = 0;
    double lr = 3e-4, adam_beta1 = 0.9, adam_beta2 = 0.999, beta = 0.1, warmup = 0.1, gamma = 0.01;
    bool freeze_backbone = false;

    void add(CLI::App* app) {
        app->add_option("--steps", steps, "optimizer steps")->capture_default_str();
        app->add_option("--batch", batch, "instances per step")->capture_default_str();
        app->add_option("--lr", lr, "learning rate")->capture_default_str();
        app->add_option("--adam-beta1", adam_beta1)->capture_default_str();
        app->add_option("--adam-beta2", adam_beta2)->capture_default_str();
        app->add_option("--beta", beta, "KL weight after warm-up")->capture_default_str();
        app->add_option("--warmup", warmup, "KL warm-up fraction of the steps")->capture_default_str();
        app->add_option("--gamma", gamma, "sparsity weight")->capture_default_str();
        app->add_flag("--freeze-backbone", freeze_backbone, "train only the injection modules");
        app->add_option("--checkpoint-every", checkpoint_every, "steps between checkpoints (0: final only)")
            ->capture_default_str();
    }
    TrainConfig make(std::uint64_t seed) const {
        TrainConfig t;
        t.steps = steps;
        t.batch = batch;
        t.lr = lr;
        t.adam_beta1 = adam_beta1;
        t.adam_beta2 = adam_beta2;
        t.beta = beta;
        t.warmup_fraction = warmup;
        t.gamma = gamma;
        t.freeze_backbone = freeze_backbone;
        t.checkpoint_every = checkpoint_every;
        t.seed = seed;
        return t;
    }
};

// Listed for --help only; expand_config consumes the flag before parsing.
void add_config(CLI::App* app) {
    app->add_option("--config", "key=value file; command-line flags override it");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// CLI11 reads config files on the top-level app only, so a subcommand's
// --config file is turned into --key=value flags placed before the
// command-line flags (options take the last value given).
std::vector<std::string> expand_config(std::vector<std::string> args) {
    for (std::size_t i = 2; i < args.size(); ++i) {
        std::string path;
        std::size_t drop = 1;
        if (args[i] == "--config") {
            if (i + 1 == args.size()) throw UsageError("cli", "--config needs a file");
            path = args[i + 1];
            drop = 2;
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        } else {
            continue;
        }
        std::ifstream in(path);
        if (!in) throw ConfigError("cli", "cannot open config " + path);
        std::vector<std::string> flags;
        std::size_t lineno = 0;
        for (std::string line; std::getline(in, line);) {
            ++lineno;
            line = trim(line);
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos || trim(line.substr(0, eq)).empty()) {
                throw UsageError("cli", path + ":" + std::to_string(lineno) + ": expected key=value");
            }
            flags.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
        }
        args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + drop));
        args.insert(args.begin() + 2, flags.begin(), flags.end());
        break;
    }
    return args;
}

// Output goes to the named file, or stdout when no path was given.
template <class F>
void emit(const std::string& path, F&& write) {
    if (path.empty()) {
        write(std::cout);
        std::cout.flush();
        return;
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cli", "cannot open " + path + " for writing");
        write(out);
        if (!out) throw ConfigError("cli", "write to " + path + " failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ConfigError("cli", "cannot move output into " + path);
}

const SynthInstance& pick_instance(const Corpus& c, std::size_t index) {
    if (index >= c.instances.size()) {
        throw UsageError("cli", "--index " + std::to_string(index) + " out of range for " +
                                    std::to_string(c.instances.size()) + " instances");
    }
    return c.instances[index];
}

// Copies same-named backbone parameters from a checkpoint into a fresh model.
void warm_start(VifModel& model, const std::string& path) {
    LoadedModel init = load_model(path);
    ParameterList src = init.model.backbone_parameters();
    ParameterList dst = model.backbone_parameters();
    if (src.size() != dst.size()) throw ConfigError("cli", "--init checkpoint has a different backbone");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape()) {
            throw ConfigError("cli", "--init parameter " + src[i].name + " does not match " + dst[i].name);
        }
        auto from = src[i].tensor.data();
        auto to = dst[i].tensor.mutable_data();
        std::copy(from.begin(), from.end(), to.begin());
    }
}

void write_pgm(std::ostream& out, const ImportanceMap& map) {
    const auto values = map.v_hat.data();
    const double top = *std::max_element(values.begin(), values.end());
    out << "P5\n" << map.grid_w << ' ' << map.grid_h << "\n255\n";
    for (double v : values) {
        const double px = top > 0.0 ? std::round(255.0 * v / top) : 0.0;
        out.put(static_cast<char>(static_cast<unsigned char>(std::clamp(px, 0.0, 255.0))));
    }
}

void write_map_csv(std::ostream& out, const ImportanceMap& map) {
    std::ostringstream os;
    os << std::setprecision(17) << "row,col,v_hat\n";
    for (std::size_t r = 0; r < map.grid_h; ++r)
        for (std::size_t c = 0; c < map.grid_w; ++c) os << r << ',' << c << ',' << map.v_hat.data()[r * map.grid_w + c] << '\n';
    out << os.str();
}

int exit_code(const Error& e) { return static_cast<int>(e.error_class()); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vif: importance-flow injection on a toy vision-language transformer"};
    app.require_subcommand(1);
    app.fallthrough(false);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic grid-world corpus");
    TaskFlags gen_task;
    std::size_t gen_n = 2000, gen_heldout_n = 0;
    std::uint64_t gen_seed = 1;
    std::string gen_out, gen_heldout;
    gen_task.add(gen);
    gen->add_option("--n", gen_n, "instances in the main corpus")->capture_default_str();
    gen->add_option("--seed", gen_seed)->capture_default_str();
    gen->add_option("--out", gen_out, "corpus file")->required();
    gen->add_option("--heldout", gen_heldout, "also write a disjoint held-out corpus here");
    gen->add_option("--heldout-n", gen_heldout_n, "held-out instances")->capture_default_str();
    add_config(gen);

    // train
    auto* tr = app.add_subcommand("train", "train a model on a corpus");
    ModelFlags tr_model;
    TrainFlags tr_flags;
    std::string tr_data, tr_out, tr_log, tr_init;
    std::uint64_t tr_seed = 1;
    tr_model.add(tr);
    tr_flags.add(tr);
    tr->add_option("--data", tr_data, "training corpus")->required();
    tr->add_option("--out", tr_out, "checkpoint file")->required();
    tr->add_option("--log", tr_log, "per-step loss CSV");
    tr->add_option("--init", tr_init, "start the backbone from this checkpoint");
    tr->add_option("--seed", tr_seed)->capture_default_str();
    add_config(tr);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a held-out corpus");
    std::string ev_ckpt, ev_data, ev_out;
    std::uint64_t ev_seed = 1;
    std::size_t ev_limit = 0;
    bool ev_baseline = false;
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--data", ev_data, "held-out corpus")->required();
    ev->add_option("--out", ev_out, "report CSV (default stdout)");
    ev->add_option("--seed", ev_seed)->capture_default_str();
    ev->add_option("--limit", ev_limit, "evaluate only the first N instances")->capture_default_str();
    ev->add_flag("--baseline", ev_baseline, "also measure deep entropy with alpha forced to 0");
    add_config(ev);

    // ablate
    auto* ab = app.add_subcommand("ablate", "train and evaluate every ablation mode under one seed");
    TaskFlags ab_task;
    ModelFlags ab_model;
    TrainFlags ab_flags;
    std::uint64_t ab_seed = 7;
    std::size_t ab_train_n = 2000, ab_eval_n = 500;
    std::string ab_out, ab_modes;
    ab_task.add(ab);
    ab_model.add(ab);
    ab_flags.add(ab);
    ab->add_option("--seed", ab_seed)->capture_default_str();
    ab->add_option("--train-n", ab_train_n)->capture_default_str();
    ab->add_option("--eval-n", ab_eval_n)->capture_default_str();
    ab->add_option("--modes", ab_modes, "comma-separated subset (default: all)");
    ab->add_option("--out", ab_out, "comparison CSV (default stdout)");
    add_config(ab);

    // analyze
    auto* an = app.add_subcommand("analyze", "per-layer attention statistics of a dump");
    std::string an_dump, an_scope = "gen", an_out;
    an->add_option("--dump", an_dump)->required();
    an->add_option("--scope", an_scope, "gen | text")->capture_default_str();
    an->add_option("--out", an_out, "stats CSV (default stdout)");
    add_config(an);

    // render-map
    auto* rm = app.add_subcommand("render-map", "render an instance's importance map as PGM and CSV");
    std::string rm_ckpt, rm_data, rm_out, rm_csv;
    std::size_t rm_index = 0, rm_pair = 0;
    std::uint64_t rm_seed = 1;
    ModelFlags rm_model;
    TaskFlags rm_task;
    rm->add_option("--ckpt", rm_ckpt, "checkpoint (default: a freshly initialized model)");
    rm->add_option("--data", rm_data, "corpus to take the instance from (default: one generated instance)");
    rm->add_option("--index", rm_index, "instance index")->capture_default_str();
    rm->add_option("--pair", rm_pair, "plan pair index")->capture_default_str();
    rm->add_option("--seed", rm_seed)->capture_default_str();
    rm->add_option("--out", rm_out, "PGM file")->required();
    rm->add_option("--csv", rm_csv, "CSV file");
    rm_model.add(rm);
    rm_task.add(rm);
    add_config(rm);

    // dump-attn
    auto* da = app.add_subcommand("dump-attn", "write every layer's attention for one instance");
    std::string da_ckpt, da_data, da_out;
    std::size_t da_index = 0;
    std::uint64_t da_seed = 1;
    std::optional<double> da_alpha;
    da->add_option("--ckpt", da_ckpt)->required();
    da->add_option("--data", da_data)->required();
    da->add_option("--index", da_index)->capture_default_str();
    da->add_option("--seed", da_seed)->capture_default_str();
    da->add_option("--alpha", da_alpha, "override alpha (0 gives the uninjected baseline)");
    da->add_option("--out", da_out, "dump file")->required();
    add_config(da);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "run the registered gradient checks on the toy model");
    GradSuiteOptions gc_opts;
    std::string gc_out;
    gc->add_option("--seeds", gc_opts.seeds)->capture_default_str();
    gc->add_option("--first-seed", gc_opts.first_seed)->capture_default_str();
    gc->add_option("--coords", gc_opts.coords, "sampled coordinates per check and seed")->capture_default_str();
    gc->add_option("--tol", gc_opts.tolerance)->capture_default_str();
    gc->add_option("--out", gc_out, "results CSV (default stdout)");
    add_config(gc);

    try {
        std::vector<std::string> args;
        try {
            args = expand_config(std::vector<std::string>(argv, argv + argc));
        } catch (const Error& e) {
            std::cerr << e.what() << "\n";
            return exit_code(e);
        }
        std::vector<const char*> ptrs;
        for (const auto& a : args) ptrs.push_back(a.c_str());
        app.parse(static_cast<int>(ptrs.size()), ptrs.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "cli: usage error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (*gen) {
            const TaskConfig tc = gen_task.make(gen_seed);
            if (gen_heldout.empty()) {
                Corpus c = make_corpus(tc, generate(tc, gen_n));
                emit(gen_out, [&](std::ostream& o) { write_corpus(o, c); });
            } else {
                if (gen_heldout_n == 0) throw UsageError("cli", "--heldout needs --heldout-n > 0");
                CorpusSplit s = make_split(tc, gen_n, gen_heldout_n);
                emit(gen_out, [&](std::ostream& o) { write_corpus(o, s.train); });
                emit(gen_heldout, [&](std::ostream& o) { write_corpus(o, s.heldout); });
            }
        } else if (*tr) {
            const Corpus corpus = load_corpus(tr_data);
            VifModel model(tr_model.make(corpus), tr_seed);
            if (!tr_init.empty()) warm_start(model, tr_init);
            TrainConfig tc = tr_flags.make(tr_seed);
            tc.checkpoint_path = tr_out;
            tc.log_path = tr_log;
            const TrainResult r = train(model, tc, corpus);
            if (!r.log.empty()) {
                const auto& last = r.log.back().loss;
                std::cerr << "trained " << r.log.size() << " steps; final total " << last.total << " (recon "
                          << last.recon << ", kl " << last.kl << ", sparsity " << last.sparsity << ")\n";
            }
        } else if (*ev) {
            LoadedModel lm = load_model(ev_ckpt);
            const Corpus corpus = load_corpus(ev_data);
            EvalOptions eo;
            eo.seed = ev_seed;
            eo.limit = ev_limit;
            eo.baseline_entropy = ev_baseline;
            const EvalReport r = evaluate(lm.model, corpus, eo, lm.train_hashes);
            emit(ev_out, [&](std::ostream& o) { write_eval_report(o, r); });
        } else if (*ab) {
            const CorpusSplit split = make_split(ab_task.make(ab_seed), ab_train_n, ab_eval_n);
            std::vector<AblationMode> modes = all_modes();
            if (!ab_modes.empty()) {
                modes.clear();
                std::istringstream is(ab_modes);
                for (std::string m; std::getline(is, m, ',');) modes.push_back(parse_mode(m));
            }
            const auto rows =
                run_ablation(ab_model.make(split.train), ab_flags.make(ab_seed), split.train, split.heldout, modes);
            emit(ab_out, [&](std::ostream& o) { write_ablation_csv(o, rows); });
        } else if (*an) {
            const QueryScope scope = parse_scope(an_scope);
            const AttentionDump d = load_dump(an_dump);
            const auto stats = layer_profile(d, scope);
            emit(an_out, [&](std::ostream& o) { write_profile_csv(o, stats); });
        } else if (*rm) {
            std::optional<LoadedModel> lm;
            Corpus corpus;
            if (!rm_ckpt.empty()) lm.emplace(load_model(rm_ckpt));
            if (!rm_data.empty()) {
                corpus = load_corpus(rm_data);
            } else {
                TaskConfig tc = rm_task.make(rm_seed);
                if (lm) {
                    tc.grid_h = lm->model.config().backbone.grid_h;
                    tc.grid_w = lm->model.config().backbone.grid_w;
                    tc.colors = lm->colors;
                    tc.shapes = lm->shapes;
                }
                corpus = make_corpus(tc, generate(tc, rm_index + 1));
            }
            std::optional<VifModel> fresh;
            if (!lm) fresh.emplace(rm_model.make(corpus), rm_seed);
            const VifModel& model = lm ? lm->model : *fresh;
            const SynthInstance& inst = pick_instance(corpus, rm_index);
            NoGradGuard ng;
            const PlanResult r = model.run_eval(inst, rm_seed, {}, false);
            if (rm_pair >= r.pairs.size()) {
                throw UsageError("cli", "--pair " + std::to_string(rm_pair) + " out of range for a plan of " +
                                            std::to_string(r.pairs.size()) + " pairs");
            }
            const ImportanceMap& map = r.pairs[rm_pair].map;
            emit(rm_out, [&](std::ostream& o) { write_pgm(o, map); });
            if (!rm_csv.empty()) emit(rm_csv, [&](std::ostream& o) { write_map_csv(o, map); });
        } else if (*da) {
            LoadedModel lm = load_model(da_ckpt);
            const Corpus corpus = load_corpus(da_data);
            const SynthInstance& inst = pick_instance(corpus, da_index);
            const std::size_t n_layers = lm.model.config().backbone.n_layers;
            std::set<std::size_t> hooks;
            for (std::size_t l = 0; l < n_layers; ++l) hooks.insert(l);
            NoGradGuard ng;
            const PlanResult r = lm.model.run_eval(inst, da_seed, da_alpha, false, hooks);
            AttentionDump d;
            d.n_layers = static_cast<std::uint32_t>(n_layers);
            d.n_heads = static_cast<std::uint32_t>(lm.model.config().backbone.n_heads);
            d.layout = inst.layout(false);
            d.seq = static_cast<std::uint32_t>(d.layout.seq_len());
            for (std::size_t l = 0; l < n_layers; ++l) {
                const auto src = r.trace.attention.at(l).probs.data();
                d.layers.emplace_back(src.begin(), src.end());
            }
            save_dump(da_out, d);
        } else if (*gc) {
            const auto results = run_grad_suite(gc_opts);
            bool ok = true;
            emit(gc_out, [&](std::ostream& o) {
                std::ostringstream os;
                os << "check,seeds,coords,max_rel_error,worst_seed,worst_parameter,status\n";
                for (const auto& r : results) {
                    os << r.name << ',' << r.seeds << ',' << r.coords << ',' << std::scientific << std::setprecision(3)
                       << r.max_rel_error << std::defaultfloat << ',' << r.worst_seed << ',' << r.worst_parameter << ','
                       << (r.passed ? "PASS" : "FAIL") << '\n';
                    ok = ok && r.passed;
                }
                o << os.str();
            });
            if (!ok) {
                std::cerr << "gradcheck: invariant error: analytic and numeric gradients disagree beyond tolerance\n";
                return 2;
            }
        }
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return exit_code(e);
    } catch (const std::exception& e) {
        std::cerr << "cli: internal error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
