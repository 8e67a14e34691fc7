#include "vif/params.hpp"

namespace vif {

Tensor normal_parameter(Shape shape, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from_vector(std::move(shape), std::move(v), true);
}

Tensor constant_parameter(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

std::vector<std::vector<double>> snapshot(const ParameterList& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

}  // namespace vif
