#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace vif {

// Half-open token index range [begin, end).
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool empty() const { return end == begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    bool operator==(const Span&) const = default;
};

// Where each modality sits in a token sequence. Visual tokens form a prefix
// laid out row-major over a grid_h x grid_w grid, followed by the question and
// then the (possibly empty) answer.
struct ModalityLayout {
    Span visual;
    Span question;
    Span answer;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;

    static ModalityLayout make(std::size_t grid_h, std::size_t grid_w, std::size_t question_len,
                               std::size_t answer_len);

    std::size_t seq_len() const { return answer.end; }
    // Throws LayoutError when spans overlap, are out of order, leave gaps, or
    // disagree with the grid.
    void validate() const;
    bool operator==(const ModalityLayout&) const = default;
};

// Row-major [T, T] visibility: the visual prefix attends bidirectionally
// within itself; every text position sees the whole visual prefix and the
// text positions up to and including itself.
std::vector<std::uint8_t> visibility_mask(const ModalityLayout& layout);

// Query rows that emit answer tokens under next-token prediction: rows
// answer.begin-1 .. answer.end-2, or the final row when the answer is empty.
std::vector<std::size_t> generation_rows(const ModalityLayout& layout);
// All question and answer rows.
std::vector<std::size_t> text_rows(const ModalityLayout& layout);

}  // namespace vif
