#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vif/tensor.hpp"

namespace vif {

struct GradCheckOptions {
    double h = 1e-5;
    // 0 checks every coordinate; otherwise this many coordinates are sampled
    // uniformly across all tensors (without replacement per tensor slot).
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
};

// Compares backward() against central differences. The relative error of a
// coordinate is |analytic - numeric| / max(1, |numeric|). Tensors in `point`
// must be leaves; f must be deterministic and build its graph from them.
GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& point,
                           const GradCheckOptions& options = {});

}  // namespace vif
