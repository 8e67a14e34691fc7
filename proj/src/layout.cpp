#include "vif/layout.hpp"

#include <string>

#include "vif/error.hpp"

namespace vif {

ModalityLayout ModalityLayout::make(std::size_t grid_h, std::size_t grid_w, std::size_t question_len,
                                    std::size_t answer_len) {
    ModalityLayout l;
    l.grid_h = grid_h;
    l.grid_w = grid_w;
    l.visual = {0, grid_h * grid_w};
    l.question = {l.visual.end, l.visual.end + question_len};
    l.answer = {l.question.end, l.question.end + answer_len};
    l.validate();
    return l;
}

void ModalityLayout::validate() const {
    if (grid_h == 0 || grid_w == 0) throw LayoutError("layout", "grid dims must be positive");
    if (visual.begin != 0) throw LayoutError("layout", "visual span must start the sequence");
    if (visual.size() != grid_h * grid_w) {
        throw LayoutError("layout", "visual span of " + std::to_string(visual.size()) + " tokens does not match grid " +
                                        std::to_string(grid_h) + "x" + std::to_string(grid_w));
    }
    if (visual.end > visual.begin + visual.size() || question.begin != visual.end || answer.begin != question.end ||
        question.end < question.begin || answer.end < answer.begin) {
        throw LayoutError("layout", "spans must be ordered visual < question < answer and cover the sequence");
    }
}

std::vector<std::uint8_t> visibility_mask(const ModalityLayout& layout) {
    const std::size_t t = layout.seq_len();
    const std::size_t nv = layout.visual.end;
    std::vector<std::uint8_t> m(t * t, 0);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) m[i * t + j] = (j < nv) || (i >= nv && j <= i);
    return m;
}

std::vector<std::size_t> generation_rows(const ModalityLayout& layout) {
    std::vector<std::size_t> rows;
    if (layout.answer.empty()) {
        if (layout.seq_len() > 0) rows.push_back(layout.seq_len() - 1);
        return rows;
    }
    for (std::size_t r = layout.answer.begin - 1; r + 1 < layout.answer.end; ++r) rows.push_back(r);
    return rows;
}

std::vector<std::size_t> text_rows(const ModalityLayout& layout) {
    std::vector<std::size_t> rows;
    for (std::size_t r = layout.question.begin; r < layout.answer.end; ++r) rows.push_back(r);
    return rows;
}

}  // namespace vif
