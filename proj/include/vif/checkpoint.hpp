#pragma once

// Binary checkpoint: "VIFCKPT1", u32 version, a config block (u32 byte
// length then key=value lines), then named parameter records until EOF.
// Each record is u32 name length, name bytes, u32 rank, u32 dims, and the
// f64 payload. All integers and floats are little-endian.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "vif/params.hpp"

namespace vif {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::map<std::string, std::string> config;
    std::vector<CheckpointRecord> records;
};

void write_checkpoint(std::ostream& out, const std::map<std::string, std::string>& config, const ParameterList& params);
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const std::map<std::string, std::string>& config,
                     const ParameterList& params);
Checkpoint load_checkpoint(const std::string& path);

// Copies record values into same-named parameters. Every parameter must have
// exactly one record of matching shape; extras are a FormatError too.
void restore_parameters(const Checkpoint& ckpt, ParameterList& params);

}  // namespace vif
