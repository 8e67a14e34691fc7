#include "vif/attender.hpp"

#include <cmath>

#include "vif/error.hpp"

namespace vif {

void AttenderConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || latent_dim == 0 || components == 0) {
        throw ConfigError("attender", "all dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("attender", "d_model not divisible by n_heads");
}

Mha::Mha(std::size_t d, std::mt19937_64& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    wq = normal_parameter({d, d}, sd, rng);
    wk = normal_parameter({d, d}, sd, rng);
    wv = normal_parameter({d, d}, sd, rng);
    wo = normal_parameter({d, d}, sd, rng);
}

Tensor Mha::operator()(const Tensor& q_rows, const Tensor& kv_rows, std::size_t n_heads) const {
    const std::size_t d = wq.dim(0);
    const std::size_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = matmul(q_rows, wq);
    Tensor k = matmul(kv_rows, wk);
    Tensor v = matmul(kv_rows, wv);
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor scores = scale(matmul_nt(slice(q, 1, h * dh, dh), slice(k, 1, h * dh, dh)), inv_sqrt);
        heads.push_back(matmul(softmax_lastdim(scores), slice(v, 1, h * dh, dh)));
    }
    return matmul(concat(heads, 1), wo);
}

void Mha::parameters(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".wo", wo});
}

AttenderBranch::AttenderBranch(const AttenderConfig& config, std::mt19937_64& rng) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d_model;
    const std::size_t dz = config_.total_dim();
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    ln_v_gain_ = constant_parameter({d}, 1.0);
    ln_v_bias_ = constant_parameter({d}, 0.0);
    ln_t_gain_ = constant_parameter({d}, 1.0);
    ln_t_bias_ = constant_parameter({d}, 0.0);
    v_from_t_ = Mha(d, rng);
    t_from_v_ = Mha(d, rng);
    fusion_ = Mha(d, rng);
    ln_f_gain_ = constant_parameter({d}, 1.0);
    ln_f_bias_ = constant_parameter({d}, 0.0);
    w1_ = normal_parameter({d, 4 * d}, sd, rng);
    b1_ = constant_parameter({4 * d}, 0.0);
    w2_ = normal_parameter({4 * d, d}, sd / 2.0, rng);
    b2_ = constant_parameter({d}, 0.0);
    // Zero heads start both branches at the standard normal.
    w_mu_ = constant_parameter({d, dz}, 0.0);
    b_mu_ = constant_parameter({dz}, 0.0);
    w_lv_ = constant_parameter({d, dz}, 0.0);
    b_lv_ = constant_parameter({dz}, 0.0);
}

DiagGaussian AttenderBranch::encode(const Tensor& visual, const Tensor& text) const {
    const std::size_t d = config_.d_model;
    if (visual.rank() != 2 || text.rank() != 2 || visual.dim(1) != d || text.dim(1) != d) {
        throw DimensionError("attender", "inputs must be [N, " + std::to_string(d) + "], got " +
                                             shape_str(visual.shape()) + " and " + shape_str(text.shape()));
    }
    if (visual.dim(0) == 0) throw ContractError("attender", "empty visual span");
    if (text.dim(0) == 0) throw ContractError("attender", "empty text span");
    const std::size_t h = config_.n_heads;
    Tensor v = layer_norm(visual, ln_v_gain_, ln_v_bias_);
    Tensor t = layer_norm(text, ln_t_gain_, ln_t_bias_);
    Tensor v2 = add(v, v_from_t_(v, t, h));
    Tensor t2 = add(t, t_from_v_(t, v, h));
    Tensor joint = concat({v2, t2}, 0);
    joint = add(joint, fusion_(joint, joint, h));
    Tensor pooled = reshape(mean_rows(joint), {1, d});
    Tensor f = layer_norm(pooled, ln_f_gain_, ln_f_bias_);
    f = add(pooled, add(matmul(gelu(add(matmul(f, w1_), b1_)), w2_), b2_));
    const std::size_t dz = config_.total_dim();
    Tensor mu = reshape(add(matmul(f, w_mu_), b_mu_), {dz});
    Tensor lv = reshape(clamp(add(matmul(f, w_lv_), b_lv_), kLogVarMin, kLogVarMax), {dz});
    return {mu, lv};
}

void AttenderBranch::parameters(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".ln_v_gain", ln_v_gain_});
    out.push_back({prefix + ".ln_v_bias", ln_v_bias_});
    out.push_back({prefix + ".ln_t_gain", ln_t_gain_});
    out.push_back({prefix + ".ln_t_bias", ln_t_bias_});
    v_from_t_.parameters(out, prefix + ".v_from_t");
    t_from_v_.parameters(out, prefix + ".t_from_v");
    fusion_.parameters(out, prefix + ".fusion");
    out.push_back({prefix + ".ln_f_gain", ln_f_gain_});
    out.push_back({prefix + ".ln_f_bias", ln_f_bias_});
    out.push_back({prefix + ".w1", w1_});
    out.push_back({prefix + ".b1", b1_});
    out.push_back({prefix + ".w2", w2_});
    out.push_back({prefix + ".b2", b2_});
    out.push_back({prefix + ".w_mu", w_mu_});
    out.push_back({prefix + ".b_mu", b_mu_});
    out.push_back({prefix + ".w_lv", w_lv_});
    out.push_back({prefix + ".b_lv", b_lv_});
}

Attender::Attender(const AttenderConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    prior_ = AttenderBranch(config_, rng);
    posterior_ = AttenderBranch(config_, rng);
}

DiagGaussian Attender::encode_prior(const Tensor& visual, const Tensor& question) const {
    if (question.rank() != 2 || question.dim(0) == 0) throw ContractError("attender", "empty question span");
    return prior_.encode(visual, question);
}

DiagGaussian Attender::encode_posterior(const Tensor& visual, const Tensor& question, const Tensor& answer) const {
    if (question.rank() != 2 || question.dim(0) == 0) throw ContractError("attender", "empty question span");
    if (answer.rank() != 2 || answer.dim(0) == 0) {
        throw ContractError("attender", "posterior needs a nonempty answer span (training only)");
    }
    return posterior_.encode(visual, concat({question, answer}, 0));
}

void Attender::parameters(ParameterList& out, const std::string& prefix) const {
    prior_.parameters(out, prefix + ".prior");
    posterior_.parameters(out, prefix + ".posterior");
}

LatentSample reparameterize(const DiagGaussian& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> eps(g.dim());
    for (double& e : eps) e = n01(rng);
    Tensor epsilon = Tensor::from_vector({g.dim()}, std::move(eps));
    Tensor z = add(g.mu, mul(exp(scale(g.log_var, 0.5)), epsilon));
    return {z, epsilon};
}

LatentSample mean_sample(const DiagGaussian& g) { return {g.mu, Tensor::zeros({g.dim()})}; }

Tensor kl_divergence(const DiagGaussian& q, const DiagGaussian& p) {
    if (q.dim() != p.dim() || q.log_var.numel() != q.dim() || p.log_var.numel() != p.dim()) {
        throw DimensionError("attender", "KL between Gaussians of different width");
    }
    if (!q.mu.all_finite() || !q.log_var.all_finite() || !p.mu.all_finite() || !p.log_var.all_finite()) {
        throw NumericError("attender", "non-finite Gaussian parameters in KL");
    }
    // log(sp2/sq2) + sq2/sp2 + (mq-mp)^2/sp2 - 1
    Tensor dlv = sub(q.log_var, p.log_var);
    Tensor diff = sub(q.mu, p.mu);
    Tensor terms = add(sub(exp(dlv), dlv), mul(square(diff), exp(negate(p.log_var))));
    return scale(sum(shift(terms, -1.0)), 0.5);
}

}  // namespace vif
