#pragma once

// Synthetic grid-world VQA. Each cell is empty or holds an object with a
// color, a shape and a brightness bit. Three question templates:
//   color_at (r, c)  -> color of the object at that cell
//   where (shape)    -> quadrant of the object with that shape
//   left_of (shape)  -> color of the object left of the one with that shape
// Ambiguous instances contain several objects matching the question; the
// answer always refers to the single bright one among them.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vif/gmm.hpp"
#include "vif/layout.hpp"

namespace vif {

struct TaskConfig {
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;
    std::size_t colors = 4;
    std::size_t shapes = 4;
    double ambiguity_rate = 0.5;
    std::uint64_t seed = 1;
    std::size_t min_objects = 6;
    std::size_t max_objects = 10;

    // Throws GenerationError explaining what cannot be met.
    void validate() const;
};

// Token id layout derived from a task: patches, question markers, row and
// column indices, shapes, then the closed answer set (colors, quadrants).
struct Vocabulary {
    std::size_t colors = 0;
    std::size_t shapes = 0;
    int q_color_at = 0;
    int q_where = 0;
    int q_left_of = 0;
    int row0 = 0;
    int col0 = 0;
    int shape0 = 0;
    int answer0 = 0;
    std::size_t answer_count = 0;
    std::size_t size = 0;

    static Vocabulary for_task(std::size_t grid_h, std::size_t grid_w, std::size_t colors, std::size_t shapes);
    static Vocabulary for_task(const TaskConfig& c) { return for_task(c.grid_h, c.grid_w, c.colors, c.shapes); }

    std::size_t patch_count() const { return 1 + colors * shapes * 2; }
    int patch_id(std::size_t color, std::size_t shape, bool bright) const;
    int color_answer(std::size_t color) const { return answer0 + static_cast<int>(color); }
    int quadrant_answer(std::size_t q) const { return answer0 + static_cast<int>(colors + q); }
    bool is_answer(int id) const { return id >= answer0 && id < answer0 + static_cast<int>(answer_count); }
};

struct SynthInstance {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::vector<int> grid;  // row-major patch ids, 0 = empty
    std::vector<int> question;
    std::vector<int> answer;
    std::vector<std::size_t> target_cells;
    std::vector<std::size_t> distractor_cells;

    bool ambiguous() const { return !distractor_cells.empty(); }
    // grid ++ question (++ answer)
    std::vector<int> tokens(bool with_answer) const;
    ModalityLayout layout(bool with_answer) const;
    bool operator==(const SynthInstance&) const = default;
};

std::vector<SynthInstance> generate(const TaskConfig& config, std::size_t n);

// Answers consistent with (grid, question) alone, one per matching object,
// sorted and deduplicated.
std::vector<int> candidate_answers(const SynthInstance& inst, const Vocabulary& v);
// Answer selected by the bright-object rule; -1 when the rule picks nothing
// or more than one object.
int rule_answer(const SynthInstance& inst, const Vocabulary& v);

// Total V_hat mass on the target cells.
double localization_score(const ImportanceMap& map, const SynthInstance& inst);

// "GRID <ids> | Q <ids> | A <ids> | TGT <cells> | DIS <cells>"
std::string encode_instance(const SynthInstance& inst);
SynthInstance decode_instance(const std::string& line, std::size_t grid_h, std::size_t grid_w);

struct Corpus {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::size_t colors = 0;
    std::size_t shapes = 0;
    std::vector<SynthInstance> instances;

    Vocabulary vocabulary() const { return Vocabulary::for_task(grid_h, grid_w, colors, shapes); }
};

Corpus make_corpus(const TaskConfig& config, std::vector<SynthInstance> instances);
// First line "# grid <h> <w> colors <c> shapes <s>", then one record per line.
void write_corpus(std::ostream& out, const Corpus& corpus);
Corpus read_corpus(std::istream& in);
void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path);

// FNV-1a over the encoded record.
std::uint64_t instance_hash(const SynthInstance& inst);

struct CorpusSplit {
    Corpus train;
    Corpus heldout;
};
// Held-out instances come from the same stream after the training ones and
// never repeat a training instance (by hash).
CorpusSplit make_split(const TaskConfig& config, std::size_t n_train, std::size_t n_heldout);

}  // namespace vif
