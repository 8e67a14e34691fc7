#pragma once

// Attention-flow diagnostics: how much attention text queries pay to the
// visual prefix, how concentrated it is, and how it is distributed, per layer.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vif/backbone.hpp"
#include "vif/layout.hpp"

namespace vif {

enum class QueryScope { generation, text };

QueryScope parse_scope(const std::string& s);  // "gen" | "text"
std::vector<std::size_t> scope_rows(const ModalityLayout& layout, QueryScope scope);

// Attention probabilities as plain doubles, [H, T, T], with the layout they
// were produced under. Both AttentionTensor and dump layers convert to this.
struct AttentionView {
    std::size_t heads = 0;
    std::size_t seq = 0;
    const double* probs = nullptr;

    double at(std::size_t h, std::size_t i, std::size_t j) const { return probs[(h * seq + i) * seq + j]; }
};

AttentionView view_of(const AttentionTensor& a);

// Mean over in-scope (head, row) pairs of the mass on visual columns.
double vision_attention_ratio(const AttentionView& a, const ModalityLayout& layout, QueryScope scope);
double vision_attention_ratio(const AttentionTensor& a, const ModalityLayout& layout, QueryScope scope);

struct EntropyStat {
    double mean = 0.0;          // nats, over rows with visual mass
    std::size_t rows_used = 0;  // (head, row) pairs
    std::size_t rows_excluded = 0;
};

// Each in-scope row restricted to visual columns, renormalized, then Shannon
// entropy; averaged jointly over (head, row).
EntropyStat visual_attention_entropy(const AttentionView& a, const ModalityLayout& layout, QueryScope scope);
EntropyStat visual_attention_entropy(const AttentionTensor& a, const ModalityLayout& layout, QueryScope scope);

// p5, p25, p50, p75, p95 of the raw attention weights on visual columns over
// in-scope (head, row) pairs; linear interpolation between order statistics.
std::array<double, 5> visual_weight_quantiles(const AttentionView& a, const ModalityLayout& layout, QueryScope scope);

struct LayerStats {
    std::size_t layer = 0;
    double ratio = 0.0;
    double entropy = 0.0;
    std::array<double, 5> quantiles{};
};

inline constexpr std::uint32_t kDumpVersion = 1;

// Binary dump: "VIFADP1", u32 version, n_layers, n_heads, T, six u32 span
// bounds (visual, question, answer), grid_h, grid_w, then per layer and head
// the row-major f32 T x T probabilities. Little-endian throughout.
struct AttentionDump {
    std::uint32_t n_layers = 0;
    std::uint32_t n_heads = 0;
    std::uint32_t seq = 0;
    ModalityLayout layout;
    std::vector<std::vector<float>> layers;  // each n_heads * T * T

    void validate() const;
};

void write_dump(std::ostream& out, const AttentionDump& dump);
// FormatError names the byte offset of the first bad field.
AttentionDump read_dump(std::istream& in);
void save_dump(const std::string& path, const AttentionDump& dump);
AttentionDump load_dump(const std::string& path);

std::vector<LayerStats> layer_profile(const AttentionDump& dump, QueryScope scope);
void write_profile_csv(std::ostream& out, const std::vector<LayerStats>& stats);

}  // namespace vif
