#pragma once

// Toy decoder-only multimodal transformer. Pre-norm residual blocks with
// multi-head attention and a GELU feed-forward of width 4*d_model. The forward
// pass exposes per-layer hidden states and post-softmax attention so callers
// can read middle layers and rewrite deep-layer attention in the same pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vif/layout.hpp"
#include "vif/params.hpp"
#include "vif/tensor.hpp"

namespace vif {

struct BackboneConfig {
    std::size_t n_layers = 8;
    std::size_t n_heads = 4;
    std::size_t d_model = 64;
    std::size_t vocab_size = 64;
    std::size_t max_seq = 96;
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;

    std::size_t d_head() const { return d_model / n_heads; }
    // Throws ConfigError; min_layers lets plans demand enough depth.
    void validate(std::size_t min_layers = 1) const;
    bool operator==(const BackboneConfig&) const = default;
};

// Post-softmax attention of one layer, [n_heads, T, T], with the visibility
// mask it was computed under.
struct AttentionTensor {
    Tensor probs;
    std::shared_ptr<const std::vector<std::uint8_t>> mask;

    std::size_t heads() const { return probs.dim(0); }
    std::size_t seq_len() const { return probs.dim(1); }
    bool visible(std::size_t row, std::size_t col) const { return (*mask)[row * seq_len() + col] != 0; }
    double at(std::size_t head, std::size_t row, std::size_t col) const {
        const std::size_t t = seq_len();
        return probs[(head * t + row) * t + col];
    }
    // Largest |row sum - 1| over rows; throws InvariantError if a masked entry
    // is nonzero, an entry is negative or non-finite, or a deviation exceeds tol.
    double check(double tol) const;
};

struct LayerTrace {
    // Residual stream entering each hooked layer, [T, d_model].
    std::map<std::size_t, Tensor> hidden;
    std::map<std::size_t, AttentionTensor> attention;
};

struct ForwardOptions {
    // Layers whose hidden state and attention are recorded in the trace.
    std::set<std::size_t> hooks;
    // Called with the residual stream entering every layer.
    std::function<void(std::size_t layer, const Tensor& hidden)> on_layer_input;
    // Layers at which patch_attention runs; its result replaces the attention
    // probabilities before value aggregation.
    std::set<std::size_t> patch_layers;
    std::function<AttentionTensor(std::size_t layer, const AttentionTensor& original)> patch_attention;
    // Layers at which patch_hidden may rewrite the residual stream entering the block.
    std::set<std::size_t> hidden_patch_layers;
    std::function<Tensor(std::size_t layer, const Tensor& hidden)> patch_hidden;
};

struct ForwardResult {
    Tensor logits;  // [T, vocab_size]
    LayerTrace trace;
};

class Backbone {
public:
    Backbone(const BackboneConfig& config, std::uint64_t seed);

    const BackboneConfig& config() const { return config_; }

    Tensor embed(std::span<const int> tokens, const ModalityLayout& layout) const;
    AttentionTensor attention_probs(const Tensor& hidden, std::size_t layer,
                                    std::shared_ptr<const std::vector<std::uint8_t>> mask) const;
    ForwardResult forward(std::span<const int> tokens, const ModalityLayout& layout,
                          const ForwardOptions& options = {}) const;

    void parameters(ParameterList& out, const std::string& prefix = "backbone") const;

private:
    struct Block {
        Tensor ln1_gain, ln1_bias;
        Tensor wq, wk, wv, wo;
        Tensor ln2_gain, ln2_bias;
        Tensor w1, b1, w2, b2;
    };

    std::vector<Tensor> head_probs(const Block& block, const Tensor& normed, std::span<const std::uint8_t> mask) const;

    BackboneConfig config_;
    Tensor token_embedding_;
    Tensor position_embedding_;
    Tensor grid_row_embedding_;
    Tensor grid_col_embedding_;
    std::vector<Block> blocks_;
    Tensor lnf_gain_, lnf_bias_;
    Tensor w_out_, b_out_;
};

}  // namespace vif
