#include "vif/flowstat.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "vif/error.hpp"

namespace vif {

static_assert(std::endian::native == std::endian::little, "dump IO assumes a little-endian host");

QueryScope parse_scope(const std::string& s) {
    if (s == "gen") return QueryScope::generation;
    if (s == "text") return QueryScope::text;
    throw UsageError("flowstat", "scope must be gen or text, got '" + s + "'");
}

std::vector<std::size_t> scope_rows(const ModalityLayout& layout, QueryScope scope) {
    return scope == QueryScope::generation ? generation_rows(layout) : text_rows(layout);
}

AttentionView view_of(const AttentionTensor& a) { return {a.heads(), a.seq_len(), a.probs.data().data()}; }

namespace {

std::vector<std::size_t> checked_rows(const AttentionView& a, const ModalityLayout& layout, QueryScope scope) {
    if (a.seq != layout.seq_len()) {
        throw LayoutError("flowstat", "attention over " + std::to_string(a.seq) + " tokens, layout covers " +
                                          std::to_string(layout.seq_len()));
    }
    auto rows = scope_rows(layout, scope);
    if (rows.empty() || a.heads == 0) throw ContractError("flowstat", "empty query scope");
    return rows;
}

}  // namespace

double vision_attention_ratio(const AttentionView& a, const ModalityLayout& layout, QueryScope scope) {
    const auto rows = checked_rows(a, layout, scope);
    double total = 0.0;
    for (std::size_t h = 0; h < a.heads; ++h) {
        for (std::size_t i : rows) {
            double mass = 0.0;
            for (std::size_t j = layout.visual.begin; j < layout.visual.end; ++j) mass += a.at(h, i, j);
            total += mass;
        }
    }
    return total / static_cast<double>(a.heads * rows.size());
}

double vision_attention_ratio(const AttentionTensor& a, const ModalityLayout& layout, QueryScope scope) {
    return vision_attention_ratio(view_of(a), layout, scope);
}

EntropyStat visual_attention_entropy(const AttentionView& a, const ModalityLayout& layout, QueryScope scope) {
    const auto rows = checked_rows(a, layout, scope);
    EntropyStat st;
    double total = 0.0;
    for (std::size_t h = 0; h < a.heads; ++h) {
        for (std::size_t i : rows) {
            double mass = 0.0;
            for (std::size_t j = layout.visual.begin; j < layout.visual.end; ++j) mass += a.at(h, i, j);
            if (!(mass > 0.0)) {
                ++st.rows_excluded;
                continue;
            }
            double ent = 0.0;
            for (std::size_t j = layout.visual.begin; j < layout.visual.end; ++j) {
                const double p = a.at(h, i, j) / mass;
                if (p > 0.0) ent -= p * std::log(p);
            }
            total += ent;
            ++st.rows_used;
        }
    }
    st.mean = st.rows_used ? total / static_cast<double>(st.rows_used) : 0.0;
    return st;
}

EntropyStat visual_attention_entropy(const AttentionTensor& a, const ModalityLayout& layout, QueryScope scope) {
    return visual_attention_entropy(view_of(a), layout, scope);
}

std::array<double, 5> visual_weight_quantiles(const AttentionView& a, const ModalityLayout& layout, QueryScope scope) {
    const auto rows = checked_rows(a, layout, scope);
    std::vector<double> w;
    w.reserve(a.heads * rows.size() * layout.visual.size());
    for (std::size_t h = 0; h < a.heads; ++h)
        for (std::size_t i : rows)
            for (std::size_t j = layout.visual.begin; j < layout.visual.end; ++j) w.push_back(a.at(h, i, j));
    std::array<double, 5> q{};
    if (w.empty()) return q;
    std::sort(w.begin(), w.end());
    constexpr double levels[5] = {0.05, 0.25, 0.50, 0.75, 0.95};
    for (std::size_t k = 0; k < 5; ++k) {
        const double pos = levels[k] * static_cast<double>(w.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, w.size() - 1);
        q[k] = w[lo] + (pos - static_cast<double>(lo)) * (w[hi] - w[lo]);
    }
    return q;
}

// ---- dump IO --------------------------------------------------------------

namespace {

constexpr char kDumpMagic[7] = {'V', 'I', 'F', 'A', 'D', 'P', '1'};

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

class DumpReader {
public:
    explicit DumpReader(std::istream& in) : in_(in) {}
    std::uint64_t offset() const { return offset_; }
    void bytes(char* dst, std::size_t n, const char* what) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError("flowstat", std::string("truncated ") + what + " at byte " + std::to_string(offset_));
        }
        offset_ += n;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        bytes(reinterpret_cast<char*>(&v), 4, what);
        return v;
    }

private:
    std::istream& in_;
    std::uint64_t offset_ = 0;
};

}  // namespace

void AttentionDump::validate() const {
    try {
        layout.validate();
    } catch (const LayoutError& e) {
        throw FormatError("flowstat", std::string("dump layout invalid: ") + e.what());
    }
    if (layout.seq_len() != seq) throw FormatError("flowstat", "dump layout does not cover T");
    if (layers.size() != n_layers) throw FormatError("flowstat", "dump layer count mismatch");
    const std::size_t per = static_cast<std::size_t>(n_heads) * seq * seq;
    for (const auto& l : layers) {
        if (l.size() != per) throw FormatError("flowstat", "dump layer payload has wrong length");
    }
}

void write_dump(std::ostream& out, const AttentionDump& dump) {
    dump.validate();
    out.write(kDumpMagic, 7);
    put_u32(out, kDumpVersion);
    put_u32(out, dump.n_layers);
    put_u32(out, dump.n_heads);
    put_u32(out, dump.seq);
    const auto& l = dump.layout;
    for (std::size_t v : {l.visual.begin, l.visual.end, l.question.begin, l.question.end, l.answer.begin, l.answer.end,
                          l.grid_h, l.grid_w}) {
        put_u32(out, static_cast<std::uint32_t>(v));
    }
    for (const auto& layer : dump.layers) {
        out.write(reinterpret_cast<const char*>(layer.data()), static_cast<std::streamsize>(layer.size() * 4));
    }
    if (!out) throw FormatError("flowstat", "dump write failed");
}

AttentionDump read_dump(std::istream& in) {
    DumpReader r(in);
    char magic[7];
    r.bytes(magic, 7, "magic");
    if (std::memcmp(magic, kDumpMagic, 7) != 0) throw FormatError("flowstat", "bad magic at byte 0");
    const std::uint32_t version = r.u32("version");
    if (version != kDumpVersion) throw FormatError("flowstat", "unsupported version at byte 7");
    AttentionDump d;
    d.n_layers = r.u32("n_layers");
    d.n_heads = r.u32("n_heads");
    const std::uint64_t seq_at = r.offset();
    d.seq = r.u32("T");
    if (d.n_layers > 4096 || d.n_heads > 4096 || d.seq > 65536) {
        throw FormatError("flowstat", "implausible header dims at byte " + std::to_string(seq_at - 8));
    }
    const std::uint64_t layout_at = r.offset();
    std::uint32_t f[8];
    for (std::uint32_t& x : f) x = r.u32("layout");
    d.layout.visual = {f[0], f[1]};
    d.layout.question = {f[2], f[3]};
    d.layout.answer = {f[4], f[5]};
    d.layout.grid_h = f[6];
    d.layout.grid_w = f[7];
    try {
        d.layout.validate();
    } catch (const LayoutError& e) {
        throw FormatError("flowstat", "inconsistent layout at byte " + std::to_string(layout_at) + ": " + e.what());
    }
    if (d.layout.seq_len() != d.seq) {
        throw FormatError("flowstat", "layout covers " + std::to_string(d.layout.seq_len()) + " tokens but T is " +
                                          std::to_string(d.seq) + " (byte " + std::to_string(layout_at) + ")");
    }
    const std::size_t per = static_cast<std::size_t>(d.n_heads) * d.seq * d.seq;
    d.layers.resize(d.n_layers);
    for (auto& layer : d.layers) {
        layer.resize(per);
        r.bytes(reinterpret_cast<char*>(layer.data()), per * 4, "payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("flowstat", "trailing bytes after payload at byte " + std::to_string(r.offset()));
    }
    return d;
}

void save_dump(const std::string& path, const AttentionDump& dump) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("flowstat", "cannot open " + path + " for writing");
    write_dump(out, dump);
}

AttentionDump load_dump(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("flowstat", "cannot open " + path);
    return read_dump(in);
}

std::vector<LayerStats> layer_profile(const AttentionDump& dump, QueryScope scope) {
    dump.validate();
    std::vector<LayerStats> out;
    std::vector<double> buf;
    for (std::uint32_t l = 0; l < dump.n_layers; ++l) {
        buf.assign(dump.layers[l].begin(), dump.layers[l].end());
        AttentionView v{dump.n_heads, dump.seq, buf.data()};
        LayerStats s;
        s.layer = l;
        s.ratio = vision_attention_ratio(v, dump.layout, scope);
        s.entropy = visual_attention_entropy(v, dump.layout, scope).mean;
        s.quantiles = visual_weight_quantiles(v, dump.layout, scope);
        out.push_back(s);
    }
    return out;
}

void write_profile_csv(std::ostream& out, const std::vector<LayerStats>& stats) {
    out << "layer,ratio,entropy,p5,p25,p50,p75,p95\n";
    std::ostringstream row;
    row << std::setprecision(17);
    for (const auto& s : stats) {
        row.str("");
        row << s.layer << ',' << s.ratio << ',' << s.entropy;
        for (double q : s.quantiles) row << ',' << q;
        out << row.str() << '\n';
    }
}

}  // namespace vif
