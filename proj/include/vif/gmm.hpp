#pragma once

// Spatial Gaussian mixture over the visual token grid. Latent slices decode to
// per-component centers, spreads and weights; rendering sums weighted
// isotropic Gaussians at grid-cell centers and softmaxes the result.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vif/params.hpp"
#include "vif/tensor.hpp"

namespace vif {

inline constexpr double kSpreadFloor = 0.02;

struct SpatialMixture {
    Tensor pi;       // [K], simplex
    Tensor centers;  // [K, 2] as (x, y) in [0,1]^2
    Tensor spreads;  // [K], >= kSpreadFloor when decoded

    std::size_t components() const { return pi.numel(); }
    // Throws InvariantError when pi is off the simplex, a center leaves the
    // unit square or a spread is nonpositive.
    void validate(double tol = 1e-9) const;
};

struct ImportanceMap {
    Tensor v_hat;    // [N_v], simplex
    Tensor raw_map;  // [N_v], pre-softmax
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
};

// Cell centers u_(r,c) = ((c + 0.5) / w, (r + 0.5) / h), row-major, flattened
// as x0, y0, x1, y1, ...
std::vector<double> grid_coordinates(std::size_t grid_h, std::size_t grid_w);

// Shared per-slice MLP: latent_dim -> hidden (GELU) -> 4 outputs read as
// (center x logit, center y logit, spread pre-softplus, weight logit). The
// output layer starts at zero.
class MixtureDecoder {
public:
    MixtureDecoder() = default;
    MixtureDecoder(std::size_t latent_dim, std::size_t components, std::size_t hidden, std::uint64_t seed);

    std::size_t components() const { return components_; }
    std::size_t latent_dim() const { return latent_dim_; }

    // z is [components * latent_dim]; slice k is z_k.
    SpatialMixture decode(const Tensor& z) const;
    void parameters(ParameterList& out, const std::string& prefix) const;

private:
    std::size_t latent_dim_ = 0;
    std::size_t components_ = 0;
    Tensor w1_, b1_, w2_, b2_;
};

// g_{k,n} = exp(-|u_n - mu_k|^2 / (2 sigma_k^2)) for all k; [K, N].
Tensor render_components(const SpatialMixture& mix, const std::vector<double>& grid);
// Row k of render_components; [N].
Tensor render_component(std::size_t k, const SpatialMixture& mix, const std::vector<double>& grid);
// V_Map = sum_k pi_k g_k, V_hat = softmax(V_Map).
ImportanceMap aggregate_and_normalize(const SpatialMixture& mix, std::size_t grid_h, std::size_t grid_w);

// Shannon entropy of V_hat in nats.
double map_entropy(const ImportanceMap& map);

}  // namespace vif
