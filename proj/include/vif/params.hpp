#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vif/tensor.hpp"

namespace vif {

struct NamedTensor {
    std::string name;
    Tensor tensor;  // shared handle; writes through to the owning module
};

using ParameterList = std::vector<NamedTensor>;

// Trainable leaf with N(0, sd^2) entries.
Tensor normal_parameter(Shape shape, double sd, std::mt19937_64& rng);
Tensor constant_parameter(Shape shape, double value);

// Deep copy of every value; used for freeze checks and parameter tying tests.
std::vector<std::vector<double>> snapshot(const ParameterList& params);

}  // namespace vif
