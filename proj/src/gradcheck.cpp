#include "vif/gradcheck.hpp"

#include <cmath>
#include <random>

#include "vif/error.hpp"

namespace vif {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
    NoGradGuard guard;
    const Tensor out = f();
    if (out.numel() != 1) throw ContractError("gradcheck", "function must return a scalar");
    const double v = out.item();
    if (!std::isfinite(v)) throw NumericError("gradcheck", "non-finite function value during finite differences");
    return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& point,
                           const GradCheckOptions& options) {
    if (!(options.h > 0.0)) throw ContractError("gradcheck", "step h must be positive");
    std::vector<Tensor> params = point;
    for (Tensor& p : params) {
        if (!p.is_leaf()) throw ContractError("gradcheck", "check points must be leaf tensors");
        p.set_requires_grad(true);
        p.zero_grad();
    }
    const Tensor root = f();
    if (!root.all_finite()) throw NumericError("gradcheck", "non-finite function value at the check point");
    backward(root);

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    std::size_t total = 0;
    for (const Tensor& p : params) total += p.numel();
    if (options.max_coords == 0 || options.max_coords >= total) {
        for (std::size_t t = 0; t < params.size(); ++t)
            for (std::size_t i = 0; i < params[t].numel(); ++i) coords.emplace_back(t, i);
    } else {
        std::mt19937_64 rng(options.seed);
        std::uniform_int_distribution<std::size_t> pick(0, total - 1);
        for (std::size_t c = 0; c < options.max_coords; ++c) {
            std::size_t flat = pick(rng);
            std::size_t t = 0;
            while (flat >= params[t].numel()) flat -= params[t++].numel();
            coords.emplace_back(t, flat);
        }
    }

    GradCheckResult result;
    for (const auto& [t, i] : coords) {
        Tensor& p = params[t];
        const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
        if (!std::isfinite(analytic)) throw NumericError("gradcheck", "non-finite analytic gradient");
        auto values = p.mutable_data();
        const double saved = values[i];
        values[i] = saved + options.h;
        const double up = eval_scalar(f);
        values[i] = saved - options.h;
        const double down = eval_scalar(f);
        values[i] = saved;
        const double numeric = (up - down) / (2.0 * options.h);
        const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
        if (result.coords_checked == 0 || err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst_tensor = t;
            result.worst_index = i;
        }
        ++result.coords_checked;
    }
    return result;
}

}  // namespace vif
