#pragma once

// Registered end-to-end gradient checks on a toy model: each loss term (and
// the composite) differentiated through backbone, attender, renderer and
// injector against central differences.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vif/harness.hpp"

namespace vif {

enum class LossTerm { recon, kl, sparsity, total };

struct GradCase {
    std::string name;
    AblationMode mode = AblationMode::full;
    LossTerm term = LossTerm::total;
};

const std::vector<GradCase>& registered_grad_cases();

struct GradSuiteOptions {
    std::size_t seeds = 100;
    std::uint64_t first_seed = 1;
    std::size_t coords = 48;  // sampled coordinates per (case, seed)
    double h = 1e-5;
    double tolerance = 1e-4;
};

struct GradCaseResult {
    std::string name;
    std::size_t seeds = 0;
    std::size_t coords = 0;
    double max_rel_error = 0.0;
    std::uint64_t worst_seed = 0;
    std::string worst_parameter;
    bool passed = false;
};

// Small model used by the checks: 2 layers, width 8, 4x4 grid, pair 0 -> 1,
// learnable alpha.
ModelConfig toy_model_config(AblationMode mode);
TaskConfig toy_task_config(std::uint64_t seed);

// Parameters are perturbed away from initialization per seed so zero-init
// heads and symmetric starts do not hide errors.
GradCaseResult run_grad_case(const GradCase& c, const GradSuiteOptions& options);
std::vector<GradCaseResult> run_grad_suite(const GradSuiteOptions& options);

}  // namespace vif
