#include "vif/gmm.hpp"

#include <cmath>

#include "vif/error.hpp"

namespace vif {

void SpatialMixture::validate(double tol) const {
    const std::size_t k = components();
    if (k == 0 || centers.shape() != Shape{k, 2} || spreads.shape() != Shape{k}) {
        throw InvariantError("gmm", "mixture needs pi [K], centers [K,2], spreads [K]");
    }
    double total = 0.0;
    for (double p : pi.data()) {
        if (!(p >= 0.0)) throw InvariantError("gmm", "negative or non-finite mixture weight");
        total += p;
    }
    if (std::abs(total - 1.0) > tol) throw InvariantError("gmm", "mixture weights sum to " + std::to_string(total));
    for (double c : centers.data()) {
        if (!(c >= 0.0 && c <= 1.0)) throw InvariantError("gmm", "center outside the unit square");
    }
    for (double s : spreads.data()) {
        if (!(s > 0.0) || !std::isfinite(s)) throw InvariantError("gmm", "spread must be positive and finite");
    }
}

std::vector<double> grid_coordinates(std::size_t grid_h, std::size_t grid_w) {
    std::vector<double> u;
    u.reserve(grid_h * grid_w * 2);
    for (std::size_t r = 0; r < grid_h; ++r) {
        for (std::size_t c = 0; c < grid_w; ++c) {
            u.push_back((static_cast<double>(c) + 0.5) / static_cast<double>(grid_w));
            u.push_back((static_cast<double>(r) + 0.5) / static_cast<double>(grid_h));
        }
    }
    return u;
}

MixtureDecoder::MixtureDecoder(std::size_t latent_dim, std::size_t components, std::size_t hidden, std::uint64_t seed)
    : latent_dim_(latent_dim), components_(components) {
    if (latent_dim == 0 || components == 0 || hidden == 0) throw ConfigError("gmm", "decoder dims must be positive");
    std::mt19937_64 rng(seed);
    w1_ = normal_parameter({latent_dim, hidden}, 1.0 / std::sqrt(static_cast<double>(latent_dim)), rng);
    b1_ = constant_parameter({hidden}, 0.0);
    w2_ = constant_parameter({hidden, 4}, 0.0);
    b2_ = constant_parameter({4}, 0.0);
}

SpatialMixture MixtureDecoder::decode(const Tensor& z) const {
    if (z.numel() != components_ * latent_dim_) {
        throw DimensionError("gmm", "latent of " + std::to_string(z.numel()) + " values for " +
                                        std::to_string(components_) + " slices of " + std::to_string(latent_dim_));
    }
    Tensor slices = reshape(z, {components_, latent_dim_});
    Tensor out = add(matmul(gelu(add(matmul(slices, w1_), b1_)), w2_), b2_);  // [K, 4]
    SpatialMixture mix;
    mix.centers = sigmoid(slice(out, 1, 0, 2));
    mix.spreads = shift(softplus(reshape(slice(out, 1, 2, 1), {components_})), kSpreadFloor);
    mix.pi = softmax_lastdim(reshape(slice(out, 1, 3, 1), {components_}));
    return mix;
}

void MixtureDecoder::parameters(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w1", w1_});
    out.push_back({prefix + ".b1", b1_});
    out.push_back({prefix + ".w2", w2_});
    out.push_back({prefix + ".b2", b2_});
}

Tensor render_components(const SpatialMixture& mix, const std::vector<double>& grid) {
    return gaussian_render(mix.centers, mix.spreads, grid);
}

Tensor render_component(std::size_t k, const SpatialMixture& mix, const std::vector<double>& grid) {
    if (k >= mix.components()) throw ContractError("gmm", "component " + std::to_string(k) + " out of range");
    Tensor g = render_components(mix, grid);
    return reshape(slice(g, 0, k, 1), {g.dim(1)});
}

ImportanceMap aggregate_and_normalize(const SpatialMixture& mix, std::size_t grid_h, std::size_t grid_w) {
    const std::size_t k = mix.components();
    const std::size_t n = grid_h * grid_w;
    Tensor g = render_components(mix, grid_coordinates(grid_h, grid_w));
    ImportanceMap m;
    m.raw_map = reshape(matmul(reshape(mix.pi, {1, k}), g), {n});
    m.v_hat = softmax_lastdim(m.raw_map);
    m.grid_h = grid_h;
    m.grid_w = grid_w;
    return m;
}

double map_entropy(const ImportanceMap& map) {
    double h = 0.0;
    for (double p : map.v_hat.data())
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

}  // namespace vif
