#include "vif/objective.hpp"

#include <cmath>

#include "vif/error.hpp"

namespace vif {

Tensor recon_loss(const Tensor& logits, std::span<const int> targets, const ModalityLayout& layout) {
    if (layout.answer.empty()) throw ContractError("objective", "reconstruction needs a nonempty answer span");
    const std::size_t t = layout.seq_len();
    if (logits.rank() != 2 || logits.dim(0) != t || targets.size() != t) {
        throw DimensionError("objective", "logits must be [T, V] with T targets for the layout");
    }
    const auto rows = generation_rows(layout);
    std::vector<std::size_t> cols;
    cols.reserve(rows.size());
    for (std::size_t r : rows) {
        const int id = targets[r + 1];
        if (id < 0 || static_cast<std::size_t>(id) >= logits.dim(1)) {
            throw VocabError("objective", "answer token " + std::to_string(id) + " outside the vocabulary");
        }
        cols.push_back(static_cast<std::size_t>(id));
    }
    Tensor picked = pick(log_softmax_lastdim(logits), rows, cols);
    return negate(mean(picked));
}

Tensor sparsity_loss(const SpatialMixture& mix) {
    const double k = static_cast<double>(mix.components());
    Tensor volume = scale(sum(mul(mix.pi, square(mix.spreads))), 1.0 / k);
    return add(entropy(mix.pi), volume);
}

LossBreakdown total_loss(double recon, double kl, double sparsity, double beta, double gamma) {
    if (beta < 0.0 || gamma < 0.0) throw ContractError("objective", "loss weights must be nonnegative");
    if (!std::isfinite(recon)) throw NumericError("objective", "recon term is non-finite");
    if (!std::isfinite(kl)) throw NumericError("objective", "kl term is non-finite");
    if (!std::isfinite(sparsity)) throw NumericError("objective", "sparsity term is non-finite");
    LossBreakdown b{recon, kl, sparsity, beta, gamma, 0.0};
    b.total = recon + beta * kl + gamma * sparsity;
    if (!std::isfinite(b.total)) throw NumericError("objective", "total loss is non-finite");
    return b;
}

Tensor total_loss(const Tensor& recon, const Tensor& kl, const Tensor& sparsity, double beta, double gamma) {
    total_loss(recon.item(), kl.item(), sparsity.item(), beta, gamma);
    return add(add(recon, scale(kl, beta)), scale(sparsity, gamma));
}

double elbo_estimate(const LossBreakdown& b) { return -(b.recon + b.kl); }

double beta_at(std::size_t step, std::size_t total_steps, double beta, double warmup_fraction) {
    const double warm = warmup_fraction * static_cast<double>(total_steps);
    if (warm <= 0.0) return beta;
    const double f = (static_cast<double>(step) + 1.0) / warm;
    return f >= 1.0 ? beta : beta * f;
}

}  // namespace vif
