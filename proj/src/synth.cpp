#include "vif/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_set>

#include "vif/error.hpp"
#include "vif/seed.hpp"

namespace vif {

void TaskConfig::validate() const {
    if (grid_h == 0 || grid_w == 0) throw GenerationError("synth", "grid dims must be positive");
    if (colors == 0) throw GenerationError("synth", "need at least one color");
    if (shapes < 2) throw GenerationError("synth", "need >= 2 shapes so the queried shape stays unique in the scene");
    if (!(ambiguity_rate >= 0.0 && ambiguity_rate <= 1.0)) {
        throw GenerationError("synth", "ambiguity rate must lie in [0, 1]");
    }
    if (min_objects > max_objects) throw GenerationError("synth", "min_objects exceeds max_objects");
    if (grid_h < 2 || grid_w < 2) {
        throw GenerationError("synth", "quadrant and left-of questions need a grid of at least 2x2");
    }
    if (max_objects > grid_h * grid_w) throw GenerationError("synth", "more objects than grid cells");
    if (ambiguity_rate > 0.0) {
        if (colors < 2) throw GenerationError("synth", "ambiguity needs >= 2 colors so distractors answer differently");
        if (grid_h * grid_w < 6) throw GenerationError("synth", "grid too small to hold an ambiguous scene");
    }
}

Vocabulary Vocabulary::for_task(std::size_t grid_h, std::size_t grid_w, std::size_t colors, std::size_t shapes) {
    Vocabulary v;
    v.colors = colors;
    v.shapes = shapes;
    int next = static_cast<int>(v.patch_count());
    v.q_color_at = next++;
    v.q_where = next++;
    v.q_left_of = next++;
    v.row0 = next;
    next += static_cast<int>(grid_h);
    v.col0 = next;
    next += static_cast<int>(grid_w);
    v.shape0 = next;
    next += static_cast<int>(shapes);
    v.answer0 = next;
    v.answer_count = colors + 4;
    v.size = static_cast<std::size_t>(next) + v.answer_count;
    return v;
}

int Vocabulary::patch_id(std::size_t color, std::size_t shape, bool bright) const {
    return 1 + static_cast<int>((color * shapes + shape) * 2 + (bright ? 1 : 0));
}

std::vector<int> SynthInstance::tokens(bool with_answer) const {
    std::vector<int> t(grid);
    t.insert(t.end(), question.begin(), question.end());
    if (with_answer) t.insert(t.end(), answer.begin(), answer.end());
    return t;
}

ModalityLayout SynthInstance::layout(bool with_answer) const {
    return ModalityLayout::make(grid_h, grid_w, question.size(), with_answer ? answer.size() : 0);
}

namespace {

class Scene {
public:
    Scene(const TaskConfig& c, const Vocabulary& v, std::mt19937_64& rng)
        : c_(c), v_(v), rng_(rng), grid_(c.grid_h * c.grid_w, 0) {}

    std::size_t cells() const { return grid_.size(); }
    std::size_t row(std::size_t cell) const { return cell / c_.grid_w; }
    std::size_t col(std::size_t cell) const { return cell % c_.grid_w; }
    std::size_t quadrant(std::size_t cell) const {
        return (row(cell) >= c_.grid_h / 2 ? 2 : 0) + (col(cell) >= c_.grid_w / 2 ? 1 : 0);
    }
    bool free(std::size_t cell) const { return grid_[cell] == 0; }
    void put(std::size_t cell, std::size_t color, std::size_t shape, bool bright) {
        grid_[cell] = v_.patch_id(color, shape, bright);
        ++objects_;
    }
    std::size_t objects() const { return objects_; }

    std::size_t uniform(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
    bool coin() { return uniform(2) == 1; }
    std::size_t other_than(std::size_t n, std::size_t skip) {
        const std::size_t k = uniform(n - 1);
        return k >= skip ? k + 1 : k;
    }

    // Random free cell passing pred, or cells() when none exists.
    template <class Pred>
    std::size_t pick_cell(Pred pred) {
        std::vector<std::size_t> ok;
        for (std::size_t i = 0; i < cells(); ++i)
            if (free(i) && pred(i)) ok.push_back(i);
        return ok.empty() ? cells() : ok[uniform(ok.size())];
    }

    // Objects whose shape differs from banned_shape (or any shape when
    // banned_shape == shapes) until the object count is reached.
    void fill(std::size_t target_count, std::size_t banned_shape) {
        while (objects_ < target_count) {
            const std::size_t cell = pick_cell([](std::size_t) { return true; });
            if (cell == cells()) break;
            const std::size_t shape =
                banned_shape < c_.shapes ? other_than(c_.shapes, banned_shape) : uniform(c_.shapes);
            put(cell, uniform(c_.colors), shape, coin());
        }
    }

    std::vector<int> take() { return std::move(grid_); }

private:
    const TaskConfig& c_;
    const Vocabulary& v_;
    std::mt19937_64& rng_;
    std::vector<int> grid_;
    std::size_t objects_ = 0;
};

[[noreturn]] void no_room() { throw GenerationError("synth", "grid has no room for the requested scene"); }

SynthInstance make_instance(const TaskConfig& c, const Vocabulary& v, std::uint64_t seed, bool ambiguous) {
    std::mt19937_64 rng(seed);
    Scene s(c, v, rng);
    SynthInstance inst;
    inst.grid_h = c.grid_h;
    inst.grid_w = c.grid_w;
    const std::size_t n_objects = c.min_objects + s.uniform(c.max_objects - c.min_objects + 1);
    const std::size_t answer = s.uniform(v.answer_count);
    inst.answer = {v.answer0 + static_cast<int>(answer)};
    const std::size_t n_distractors = ambiguous ? 1 + s.uniform(2) : 0;

    if (answer >= c.colors) {
        // where (shape): answer is a quadrant
        const std::size_t quad = answer - c.colors;
        const std::size_t shape = s.uniform(c.shapes);
        const std::size_t target = s.pick_cell([&](std::size_t i) { return s.quadrant(i) == quad; });
        if (target == s.cells()) no_room();
        s.put(target, s.uniform(c.colors), shape, ambiguous ? true : s.coin());
        inst.target_cells = {target};
        for (std::size_t d = 0; d < n_distractors; ++d) {
            const std::size_t cell = s.pick_cell([&](std::size_t i) { return s.quadrant(i) != quad; });
            if (cell == s.cells()) no_room();
            s.put(cell, s.uniform(c.colors), shape, false);
            inst.distractor_cells.push_back(cell);
        }
        s.fill(n_objects, shape);
        inst.question = {v.q_where, v.shape0 + static_cast<int>(shape)};
    } else if (!ambiguous && s.coin()) {
        // color_at (r, c)
        const std::size_t target = s.pick_cell([](std::size_t) { return true; });
        s.put(target, answer, s.uniform(c.shapes), s.coin());
        inst.target_cells = {target};
        s.fill(n_objects, c.shapes);
        inst.question = {v.q_color_at, v.row0 + static_cast<int>(s.row(target)),
                         v.col0 + static_cast<int>(s.col(target))};
    } else {
        // left_of (shape): answer is the color of the left neighbor
        const std::size_t shape = s.uniform(c.shapes);
        auto place_pair = [&](std::size_t neighbor_color, bool bright) {
            const std::size_t anchor =
                s.pick_cell([&](std::size_t i) { return s.col(i) >= 1 && s.free(i - 1); });
            if (anchor == s.cells()) no_room();
            s.put(anchor, s.uniform(c.colors), shape, bright);
            s.put(anchor - 1, neighbor_color, s.other_than(c.shapes, shape), s.coin());
            return anchor;
        };
        const std::size_t anchor = place_pair(answer, ambiguous ? true : s.coin());
        inst.target_cells = {anchor - 1, anchor};
        for (std::size_t d = 0; d < n_distractors; ++d) {
            inst.distractor_cells.push_back(place_pair(s.other_than(c.colors, answer), false));
        }
        s.fill(n_objects, shape);
        inst.question = {v.q_left_of, v.shape0 + static_cast<int>(shape)};
    }
    std::sort(inst.target_cells.begin(), inst.target_cells.end());
    std::sort(inst.distractor_cells.begin(), inst.distractor_cells.end());
    inst.grid = s.take();
    return inst;
}

}  // namespace

std::vector<SynthInstance> generate(const TaskConfig& config, std::size_t n) {
    config.validate();
    if (n == 0) throw GenerationError("synth", "n must be at least 1");
    const Vocabulary v = Vocabulary::for_task(config);
    const auto n_ambiguous = static_cast<std::size_t>(std::llround(config.ambiguity_rate * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(splitmix64(config.seed));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> ambiguous(n, false);
    for (std::size_t i = 0; i < n_ambiguous; ++i) ambiguous[order[i]] = true;

    std::vector<SynthInstance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(make_instance(config, v, splitmix64(config.seed ^ splitmix64(i + 1)), ambiguous[i]));
        const SynthInstance& inst = out.back();
        const std::size_t hypotheses = candidate_answers(inst, v).size();
        if (rule_answer(inst, v) != inst.answer[0] || (ambiguous[i] ? hypotheses < 2 : hypotheses != 1)) {
            throw GenerationError("synth", "instance " + std::to_string(i) + " failed its answer enumeration check");
        }
    }
    return out;
}

namespace {

struct Match {
    std::size_t cell;
    int answer;
    bool bright;
};

std::vector<Match> matches(const SynthInstance& inst, const Vocabulary& v) {
    const int q = inst.question.at(0);
    const std::size_t w = inst.grid_w;
    auto decode = [&](int id, std::size_t& color, std::size_t& shape, bool& bright) {
        const int k = id - 1;
        bright = (k % 2) == 1;
        shape = static_cast<std::size_t>(k / 2) % v.shapes;
        color = static_cast<std::size_t>(k / 2) / v.shapes;
    };
    std::vector<Match> out;
    if (q == v.q_color_at) {
        const std::size_t cell = static_cast<std::size_t>(inst.question.at(1) - v.row0) * w +
                                 static_cast<std::size_t>(inst.question.at(2) - v.col0);
        if (cell < inst.grid.size() && inst.grid[cell] != 0) {
            std::size_t color, shape;
            bool bright;
            decode(inst.grid[cell], color, shape, bright);
            out.push_back({cell, v.color_answer(color), true});
        }
        return out;
    }
    const auto want = static_cast<std::size_t>(inst.question.at(1) - v.shape0);
    for (std::size_t cell = 0; cell < inst.grid.size(); ++cell) {
        if (inst.grid[cell] == 0) continue;
        std::size_t color, shape;
        bool bright;
        decode(inst.grid[cell], color, shape, bright);
        if (shape != want) continue;
        const std::size_t r = cell / w, c = cell % w;
        if (q == v.q_where) {
            const std::size_t quad = (r >= inst.grid_h / 2 ? 2 : 0) + (c >= w / 2 ? 1 : 0);
            out.push_back({cell, v.quadrant_answer(quad), bright});
        } else if (c >= 1 && inst.grid[cell - 1] != 0) {
            std::size_t ncolor, nshape;
            bool nbright;
            decode(inst.grid[cell - 1], ncolor, nshape, nbright);
            out.push_back({cell, v.color_answer(ncolor), bright});
        }
    }
    return out;
}

}  // namespace

std::vector<int> candidate_answers(const SynthInstance& inst, const Vocabulary& v) {
    std::vector<int> a;
    for (const auto& m : matches(inst, v)) a.push_back(m.answer);
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    return a;
}

int rule_answer(const SynthInstance& inst, const Vocabulary& v) {
    const auto ms = matches(inst, v);
    if (ms.size() == 1) return ms[0].answer;
    int found = -1;
    for (const auto& m : ms) {
        if (!m.bright) continue;
        if (found != -1) return -1;
        found = m.answer;
    }
    return found;
}

double localization_score(const ImportanceMap& map, const SynthInstance& inst) {
    if (map.grid_h != inst.grid_h || map.grid_w != inst.grid_w || map.v_hat.numel() != inst.grid.size()) {
        throw LayoutError("synth", "importance map does not match the instance grid");
    }
    double s = 0.0;
    for (std::size_t cell : inst.target_cells) s += map.v_hat[cell];
    return s;
}

// ---- serialization --------------------------------------------------------

namespace {

template <class T>
void put_list(std::ostringstream& os, const char* tag, const std::vector<T>& v) {
    os << tag;
    for (const T& x : v) os << ' ' << x;
}

template <class T>
std::vector<T> parse_list(const std::string& field, const std::string& tag) {
    std::istringstream is(field);
    std::string head;
    is >> head;
    if (head != tag) throw FormatError("synth", "expected field " + tag + ", got '" + head + "'");
    std::vector<T> out;
    std::string tok;
    while (is >> tok) {
        try {
            std::size_t used = 0;
            const long long x = std::stoll(tok, &used);
            if (used != tok.size() || x < 0) throw std::invalid_argument(tok);
            out.push_back(static_cast<T>(x));
        } catch (const std::exception&) {
            throw FormatError("synth", "bad value '" + tok + "' in field " + tag);
        }
    }
    return out;
}

}  // namespace

std::string encode_instance(const SynthInstance& inst) {
    std::ostringstream os;
    put_list(os, "GRID", inst.grid);
    put_list(os, " | Q", inst.question);
    put_list(os, " | A", inst.answer);
    put_list(os, " | TGT", inst.target_cells);
    put_list(os, " | DIS", inst.distractor_cells);
    return os.str();
}

SynthInstance decode_instance(const std::string& line, std::size_t grid_h, std::size_t grid_w) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t bar; (bar = line.find('|', start)) != std::string::npos; start = bar + 1) {
        fields.push_back(line.substr(start, bar - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 5) throw FormatError("synth", "record needs 5 '|'-separated fields, got " + std::to_string(fields.size()));
    SynthInstance inst;
    inst.grid_h = grid_h;
    inst.grid_w = grid_w;
    inst.grid = parse_list<int>(fields[0], "GRID");
    inst.question = parse_list<int>(fields[1], "Q");
    inst.answer = parse_list<int>(fields[2], "A");
    inst.target_cells = parse_list<std::size_t>(fields[3], "TGT");
    inst.distractor_cells = parse_list<std::size_t>(fields[4], "DIS");
    if (inst.grid.size() != grid_h * grid_w) throw FormatError("synth", "GRID length does not match the header grid");
    if (inst.question.empty() || inst.answer.size() != 1) throw FormatError("synth", "need a question and one answer token");
    if (inst.target_cells.empty()) throw FormatError("synth", "TGT must be nonempty");
    for (std::size_t c : inst.target_cells)
        if (c >= inst.grid.size()) throw FormatError("synth", "TGT cell out of range");
    for (std::size_t c : inst.distractor_cells)
        if (c >= inst.grid.size()) throw FormatError("synth", "DIS cell out of range");
    return inst;
}

Corpus make_corpus(const TaskConfig& config, std::vector<SynthInstance> instances) {
    return {config.grid_h, config.grid_w, config.colors, config.shapes, std::move(instances)};
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
    out << "# grid " << corpus.grid_h << ' ' << corpus.grid_w << " colors " << corpus.colors << " shapes "
        << corpus.shapes << '\n';
    for (const auto& inst : corpus.instances) out << encode_instance(inst) << '\n';
    if (!out) throw FormatError("synth", "corpus write failed");
}

Corpus read_corpus(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("synth", "empty corpus");
    Corpus c;
    {
        std::istringstream hs(line);
        std::string hash, g, co, sh;
        hs >> hash >> g >> c.grid_h >> c.grid_w >> co >> c.colors >> sh >> c.shapes;
        if (!hs || hash != "#" || g != "grid" || co != "colors" || sh != "shapes" || c.grid_h == 0 || c.grid_w == 0) {
            throw FormatError("synth", "corpus header must read '# grid <h> <w> colors <c> shapes <s>'");
        }
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        try {
            c.instances.push_back(decode_instance(line, c.grid_h, c.grid_w));
        } catch (const FormatError& e) {
            throw FormatError("synth", "line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    const Vocabulary v = c.vocabulary();
    for (const auto& inst : c.instances) {
        for (int id : inst.tokens(true)) {
            if (id < 0 || static_cast<std::size_t>(id) >= v.size) throw VocabError("synth", "token outside the task vocabulary");
        }
        if (!v.is_answer(inst.answer[0])) throw VocabError("synth", "answer token outside the answer set");
    }
    return c;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("synth", "cannot open " + path + " for writing");
    write_corpus(out, corpus);
}

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("synth", "cannot open " + path);
    return read_corpus(in);
}

std::uint64_t instance_hash(const SynthInstance& inst) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : encode_instance(inst)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

CorpusSplit make_split(const TaskConfig& config, std::size_t n_train, std::size_t n_heldout) {
    if (n_train == 0 || n_heldout == 0) throw GenerationError("synth", "both splits need at least one instance");
    auto pool = generate(config, n_train + 2 * n_heldout);
    std::vector<SynthInstance> train(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::unordered_set<std::uint64_t> seen;
    for (const auto& inst : train) seen.insert(instance_hash(inst));
    std::vector<SynthInstance> heldout;
    for (std::size_t i = n_train; i < pool.size() && heldout.size() < n_heldout; ++i) {
        if (seen.insert(instance_hash(pool[i])).second) heldout.push_back(pool[i]);
    }
    if (heldout.size() < n_heldout) {
        throw GenerationError("synth", "task space too small for " + std::to_string(n_heldout) +
                                           " held-out instances disjoint from training");
    }
    return {make_corpus(config, std::move(train)), make_corpus(config, std::move(heldout))};
}

}  // namespace vif
