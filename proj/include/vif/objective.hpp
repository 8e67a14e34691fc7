#pragma once

// Training objective: answer reconstruction, prior/posterior KL and the
// mixture sparsity regularizer, combined as recon + beta * kl + gamma * sparsity.

#include <cstddef>
#include <span>
#include <string>

#include "vif/gmm.hpp"
#include "vif/layout.hpp"
#include "vif/tensor.hpp"

namespace vif {

// Mean next-token NLL over the answer span: row r predicts targets[r + 1] for
// r in generation_rows(layout). Scalar tensor.
Tensor recon_loss(const Tensor& logits, std::span<const int> targets, const ModalityLayout& layout);

// H(pi) + (1/K) sum_k pi_k sigma_k^2. Scalar tensor.
Tensor sparsity_loss(const SpatialMixture& mix);

struct LossBreakdown {
    double recon = 0.0;
    double kl = 0.0;
    double sparsity = 0.0;
    double beta = 0.0;
    double gamma = 0.0;
    double total = 0.0;
};

// Throws NumericError naming the first non-finite term, ContractError on
// negative weights.
LossBreakdown total_loss(double recon, double kl, double sparsity, double beta, double gamma);
// Same combination on tensors so the total can be differentiated.
Tensor total_loss(const Tensor& recon, const Tensor& kl, const Tensor& sparsity, double beta, double gamma);

// -(recon + kl); with beta = 1 and gamma = 0 the total loss is its negation.
double elbo_estimate(const LossBreakdown& b);

// Linear warm-up of beta over the first warmup_fraction of total_steps.
double beta_at(std::size_t step, std::size_t total_steps, double beta, double warmup_fraction);

}  // namespace vif
