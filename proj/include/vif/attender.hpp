#pragma once

// CVAE attender. A prior branch reads (V, Q) and a posterior branch reads
// (V, [Q, A]); both emit a diagonal Gaussian over components*latent_dim
// dimensions. Slice k of a sample is the latent of mixture component k.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>

#include "vif/params.hpp"
#include "vif/tensor.hpp"

namespace vif {

struct DiagGaussian {
    Tensor mu;       // [D]
    Tensor log_var;  // [D]

    std::size_t dim() const { return mu.numel(); }
};

struct LatentSample {
    Tensor z;        // [D]
    Tensor epsilon;  // [D], constant
};

struct AttenderConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t latent_dim = 32;
    std::size_t components = 16;

    std::size_t total_dim() const { return latent_dim * components; }
    void validate() const;
};

inline constexpr double kLogVarMin = -30.0;
inline constexpr double kLogVarMax = 10.0;

// One multi-head attention block without masking: q rows attend over kv rows.
struct Mha {
    Tensor wq, wk, wv, wo;

    Mha() = default;
    Mha(std::size_t d, std::mt19937_64& rng);
    Tensor operator()(const Tensor& q_rows, const Tensor& kv_rows, std::size_t n_heads) const;
    void parameters(ParameterList& out, const std::string& prefix) const;
};

class AttenderBranch {
public:
    AttenderBranch() = default;
    AttenderBranch(const AttenderConfig& config, std::mt19937_64& rng);

    // visual [Nv, d], text [Nt, d]; both nonempty.
    DiagGaussian encode(const Tensor& visual, const Tensor& text) const;
    void parameters(ParameterList& out, const std::string& prefix) const;

private:
    AttenderConfig config_;
    Tensor ln_v_gain_, ln_v_bias_, ln_t_gain_, ln_t_bias_;
    Mha v_from_t_, t_from_v_, fusion_;
    Tensor ln_f_gain_, ln_f_bias_;
    Tensor w1_, b1_, w2_, b2_;
    Tensor w_mu_, b_mu_, w_lv_, b_lv_;
};

class Attender {
public:
    Attender() = default;
    Attender(const AttenderConfig& config, std::uint64_t seed);

    const AttenderConfig& config() const { return config_; }

    DiagGaussian encode_prior(const Tensor& visual, const Tensor& question) const;
    // Throws ContractError when the answer is empty.
    DiagGaussian encode_posterior(const Tensor& visual, const Tensor& question, const Tensor& answer) const;

    const AttenderBranch& prior() const { return prior_; }
    const AttenderBranch& posterior() const { return posterior_; }

    // Names are "<prefix>.prior.*" and "<prefix>.posterior.*".
    void parameters(ParameterList& out, const std::string& prefix) const;

private:
    AttenderConfig config_;
    AttenderBranch prior_;
    AttenderBranch posterior_;
};

// z = mu + exp(log_var / 2) * eps with eps ~ N(0, I) drawn from seed.
LatentSample reparameterize(const DiagGaussian& g, std::uint64_t seed);
// Deterministic z = mu; epsilon is all zeros.
LatentSample mean_sample(const DiagGaussian& g);

// KL(q || p) for diagonal Gaussians, summed over dimensions. Scalar tensor.
Tensor kl_divergence(const DiagGaussian& q, const DiagGaussian& p);

}  // namespace vif
