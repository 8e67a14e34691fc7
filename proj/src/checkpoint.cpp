#include "vif/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "vif/error.hpp"

namespace vif {

namespace {

constexpr char kMagic[8] = {'V', 'I', 'F', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }
    std::uint64_t offset() const { return offset_; }

    void bytes(char* dst, std::size_t n, const char* what) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError("checkpoint", std::string("truncated ") + what + " at byte " + std::to_string(offset_));
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

void write_checkpoint(std::ostream& out, const std::map<std::string, std::string>& config, const ParameterList& params) {
    out.write(kMagic, 8);
    put_u32(out, kCheckpointVersion);
    std::string block;
    for (const auto& [k, v] : config) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw FormatError("checkpoint", "config entry '" + k + "' cannot be encoded");
        }
        block += k + "=" + v + "\n";
    }
    put_u32(out, static_cast<std::uint32_t>(block.size()));
    out.write(block.data(), static_cast<std::streamsize>(block.size()));
    for (const auto& p : params) {
        put_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        const Shape& s = p.tensor.shape();
        put_u32(out, static_cast<std::uint32_t>(s.size()));
        for (std::size_t d : s) put_u32(out, static_cast<std::uint32_t>(d));
        const auto v = p.tensor.data();
        out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!out) throw FormatError("checkpoint", "write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
    Reader r(in);
    char magic[8];
    r.bytes(magic, 8, "magic");
    if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("checkpoint", "bad magic at byte 0");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint", "unsupported version " + std::to_string(version) + " at byte 8");
    }
    Checkpoint ck;
    const std::uint32_t block_len = r.u32("config length");
    std::string block(block_len, '\0');
    r.bytes(block.data(), block_len, "config block");
    std::istringstream lines(block);
    for (std::string line; std::getline(lines, line);) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("checkpoint", "config line without '=': " + line);
        ck.config[line.substr(0, eq)] = line.substr(eq + 1);
    }
    while (!r.at_eof()) {
        CheckpointRecord rec;
        const std::uint32_t name_len = r.u32("record name length");
        if (name_len > 4096) {
            throw FormatError("checkpoint", "implausible name length at byte " + std::to_string(r.offset() - 4));
        }
        rec.name.resize(name_len);
        r.bytes(rec.name.data(), name_len, "record name");
        const std::uint32_t rank = r.u32("record rank");
        if (rank > 8) throw FormatError("checkpoint", "implausible rank for " + rec.name);
        std::size_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            rec.shape.push_back(r.u32("record dims"));
            n *= rec.shape.back();
        }
        rec.values.resize(n);
        r.bytes(reinterpret_cast<char*>(rec.values.data()), n * sizeof(double), "record payload");
        ck.records.push_back(std::move(rec));
    }
    return ck;
}

void save_checkpoint(const std::string& path, const std::map<std::string, std::string>& config,
                     const ParameterList& params) {
    // Write beside the target and rename, so a crash never leaves a torn file.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("checkpoint", "cannot open " + tmp + " for writing");
        write_checkpoint(out, config, params);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("checkpoint", "cannot move " + tmp + " to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint", "cannot open " + path);
    return read_checkpoint(in);
}

void restore_parameters(const Checkpoint& ckpt, ParameterList& params) {
    std::unordered_map<std::string, const CheckpointRecord*> by_name;
    for (const auto& rec : ckpt.records) {
        if (!by_name.emplace(rec.name, &rec).second) throw FormatError("checkpoint", "duplicate record " + rec.name);
    }
    if (by_name.size() != params.size()) {
        throw FormatError("checkpoint", "checkpoint holds " + std::to_string(by_name.size()) + " records, model has " +
                                            std::to_string(params.size()) + " parameters");
    }
    for (auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw FormatError("checkpoint", "missing record " + p.name);
        if (it->second->shape != p.tensor.shape()) {
            throw FormatError("checkpoint", "record " + p.name + " has shape " + shape_str(it->second->shape) +
                                                ", model expects " + shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.mutable_data();
        std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
    }
}

}  // namespace vif
