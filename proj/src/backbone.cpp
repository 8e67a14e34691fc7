#include "vif/backbone.hpp"

#include <cmath>
#include <string>

#include "vif/error.hpp"

namespace vif {

void BackboneConfig::validate(std::size_t min_layers) const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || vocab_size == 0 || max_seq == 0) {
        throw ConfigError("backbone", "all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("backbone", "d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                          std::to_string(n_heads));
    }
    if (n_layers < min_layers) {
        throw ConfigError("backbone", "n_layers " + std::to_string(n_layers) + " below the " +
                                          std::to_string(min_layers) + " layers the patch plan needs");
    }
    if (grid_h == 0 || grid_w == 0 || grid_h * grid_w >= max_seq) {
        throw ConfigError("backbone", "grid must be nonempty and leave room for text within max_seq");
    }
}

double AttentionTensor::check(double tol) const {
    const Shape& s = probs.shape();
    if (s.size() != 3 || s[1] != s[2] || !mask || mask->size() != s[1] * s[2]) {
        throw InvariantError("attention", "attention tensor must be [H,T,T] with a [T,T] mask, got " + shape_str(s));
    }
    const std::size_t h = s[0];
    const std::size_t t = s[1];
    const auto p = probs.data();
    double worst = 0.0;
    for (std::size_t head = 0; head < h; ++head) {
        for (std::size_t i = 0; i < t; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < t; ++j) {
                const double v = p[(head * t + i) * t + j];
                if (!std::isfinite(v) || v < 0.0) {
                    throw InvariantError("attention", "entry (" + std::to_string(head) + "," + std::to_string(i) + "," +
                                                          std::to_string(j) + ") is negative or non-finite");
                }
                if (!(*mask)[i * t + j] && v != 0.0) {
                    throw InvariantError("attention", "masked entry (" + std::to_string(head) + "," +
                                                          std::to_string(i) + "," + std::to_string(j) +
                                                          ") carries mass");
                }
                row += v;
            }
            worst = std::max(worst, std::abs(row - 1.0));
        }
    }
    if (worst > tol) {
        throw InvariantError("attention", "row sums deviate from 1 by " + std::to_string(worst) + " (tolerance " +
                                              std::to_string(tol) + ")");
    }
    return worst;
}

Backbone::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.d_model;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sd_out = sd / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
    token_embedding_ = normal_parameter({config_.vocab_size, d}, 0.5, rng);
    position_embedding_ = normal_parameter({config_.max_seq, d}, 0.1, rng);
    grid_row_embedding_ = normal_parameter({config_.grid_h, d}, 0.1, rng);
    grid_col_embedding_ = normal_parameter({config_.grid_w, d}, 0.1, rng);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        Block b;
        b.ln1_gain = constant_parameter({d}, 1.0);
        b.ln1_bias = constant_parameter({d}, 0.0);
        b.wq = normal_parameter({d, d}, sd, rng);
        b.wk = normal_parameter({d, d}, sd, rng);
        b.wv = normal_parameter({d, d}, sd, rng);
        b.wo = normal_parameter({d, d}, sd_out, rng);
        b.ln2_gain = constant_parameter({d}, 1.0);
        b.ln2_bias = constant_parameter({d}, 0.0);
        b.w1 = normal_parameter({d, 4 * d}, sd, rng);
        b.b1 = constant_parameter({4 * d}, 0.0);
        b.w2 = normal_parameter({4 * d, d}, sd_out / 2.0, rng);
        b.b2 = constant_parameter({d}, 0.0);
        blocks_.push_back(std::move(b));
    }
    lnf_gain_ = constant_parameter({d}, 1.0);
    lnf_bias_ = constant_parameter({d}, 0.0);
    w_out_ = normal_parameter({d, config_.vocab_size}, sd, rng);
    b_out_ = constant_parameter({config_.vocab_size}, 0.0);
}

void Backbone::parameters(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".token_embedding", token_embedding_});
    out.push_back({prefix + ".position_embedding", position_embedding_});
    out.push_back({prefix + ".grid_row_embedding", grid_row_embedding_});
    out.push_back({prefix + ".grid_col_embedding", grid_col_embedding_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const Block& b = blocks_[l];
        const std::string p = prefix + ".layer" + std::to_string(l) + ".";
        out.push_back({p + "ln1_gain", b.ln1_gain});
        out.push_back({p + "ln1_bias", b.ln1_bias});
        out.push_back({p + "wq", b.wq});
        out.push_back({p + "wk", b.wk});
        out.push_back({p + "wv", b.wv});
        out.push_back({p + "wo", b.wo});
        out.push_back({p + "ln2_gain", b.ln2_gain});
        out.push_back({p + "ln2_bias", b.ln2_bias});
        out.push_back({p + "w1", b.w1});
        out.push_back({p + "b1", b.b1});
        out.push_back({p + "w2", b.w2});
        out.push_back({p + "b2", b.b2});
    }
    out.push_back({prefix + ".lnf_gain", lnf_gain_});
    out.push_back({prefix + ".lnf_bias", lnf_bias_});
    out.push_back({prefix + ".w_out", w_out_});
    out.push_back({prefix + ".b_out", b_out_});
}

Tensor Backbone::embed(std::span<const int> tokens, const ModalityLayout& layout) const {
    layout.validate();
    const std::size_t t = tokens.size();
    if (t != layout.seq_len()) {
        throw LayoutError("backbone", std::to_string(t) + " tokens for a layout of " + std::to_string(layout.seq_len()));
    }
    if (t > config_.max_seq) throw LayoutError("backbone", "sequence longer than max_seq");
    if (layout.grid_h != config_.grid_h || layout.grid_w != config_.grid_w) {
        throw LayoutError("backbone", "layout grid does not match the model grid");
    }
    std::vector<int> positions(t);
    for (std::size_t i = 0; i < t; ++i) positions[i] = static_cast<int>(i);
    Tensor x = add(embedding(token_embedding_, tokens), embedding(position_embedding_, positions));

    const std::size_t nv = layout.visual.size();
    std::vector<int> rows(nv), cols(nv);
    for (std::size_t n = 0; n < nv; ++n) {
        rows[n] = static_cast<int>(n / layout.grid_w);
        cols[n] = static_cast<int>(n % layout.grid_w);
    }
    Tensor grid_code = add(embedding(grid_row_embedding_, rows), embedding(grid_col_embedding_, cols));
    if (t > nv) grid_code = concat({grid_code, Tensor::zeros({t - nv, config_.d_model})}, 0);
    return add(x, grid_code);
}

std::vector<Tensor> Backbone::head_probs(const Block& block, const Tensor& normed,
                                         std::span<const std::uint8_t> mask) const {
    const std::size_t dh = config_.d_head();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = matmul(normed, block.wq);
    Tensor k = matmul(normed, block.wk);
    std::vector<Tensor> probs;
    probs.reserve(config_.n_heads);
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
        Tensor scores = scale(matmul_nt(slice(q, 1, h * dh, dh), slice(k, 1, h * dh, dh)), inv_sqrt);
        probs.push_back(masked_softmax_lastdim(scores, mask));
    }
    return probs;
}

namespace {

AttentionTensor stack_heads(const std::vector<Tensor>& heads, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
    std::vector<Tensor> parts;
    parts.reserve(heads.size());
    for (const Tensor& p : heads) parts.push_back(reshape(p, {1, p.dim(0), p.dim(1)}));
    return {concat(parts, 0), std::move(mask)};
}

}  // namespace

AttentionTensor Backbone::attention_probs(const Tensor& hidden, std::size_t layer,
                                          std::shared_ptr<const std::vector<std::uint8_t>> mask) const {
    if (layer >= blocks_.size()) throw ContractError("backbone", "layer " + std::to_string(layer) + " out of range");
    const Block& b = blocks_[layer];
    if (!mask) throw ContractError("backbone", "attention_probs needs a visibility mask");
    Tensor normed = layer_norm(hidden, b.ln1_gain, b.ln1_bias);
    std::vector<Tensor> heads = head_probs(b, normed, *mask);
    return stack_heads(heads, std::move(mask));
}

ForwardResult Backbone::forward(std::span<const int> tokens, const ModalityLayout& layout,
                                const ForwardOptions& options) const {
    ForwardResult result;
    Tensor x = embed(tokens, layout);
    const std::size_t t = tokens.size();
    const std::size_t dh = config_.d_head();
    auto mask = std::make_shared<const std::vector<std::uint8_t>>(visibility_mask(layout));

    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const Block& b = blocks_[l];
        if (options.on_layer_input) options.on_layer_input(l, x);
        if (options.patch_hidden && options.hidden_patch_layers.count(l)) {
            x = options.patch_hidden(l, x);
            if (x.shape() != Shape{t, config_.d_model}) {
                throw InvariantError("backbone", "hidden patch changed the residual shape at layer " + std::to_string(l));
            }
        }
        const bool hooked = options.hooks.count(l) != 0;
        const bool patched = options.patch_attention && options.patch_layers.count(l) != 0;
        if (hooked) result.trace.hidden.emplace(l, x);

        Tensor normed = layer_norm(x, b.ln1_gain, b.ln1_bias);
        std::vector<Tensor> probs = head_probs(b, normed, *mask);
        if (hooked || patched) {
            AttentionTensor at = stack_heads(probs, mask);
            if (patched) {
                at = options.patch_attention(l, at);
                if (at.probs.shape() != Shape{config_.n_heads, t, t}) {
                    throw InvariantError("backbone", "attention patch changed the shape at layer " + std::to_string(l));
                }
                at.mask = mask;
                at.check(1e-6);
                for (std::size_t h = 0; h < config_.n_heads; ++h) probs[h] = reshape(slice(at.probs, 0, h, 1), {t, t});
            }
            if (hooked) result.trace.attention.emplace(l, at);
        }

        Tensor v = matmul(normed, b.wv);
        std::vector<Tensor> ctx;
        ctx.reserve(config_.n_heads);
        for (std::size_t h = 0; h < config_.n_heads; ++h) ctx.push_back(matmul(probs[h], slice(v, 1, h * dh, dh)));
        x = add(x, matmul(concat(ctx, 1), b.wo));

        Tensor ff = add(matmul(gelu(add(matmul(layer_norm(x, b.ln2_gain, b.ln2_bias), b.w1), b.b1)), b.w2), b.b2);
        x = add(x, ff);
    }
    result.logits = add(matmul(layer_norm(x, lnf_gain_, lnf_bias_), w_out_), b_out_);
    return result;
}

}  // namespace vif
