#pragma once

// Named parameter blocks and the versioned binary checkpoint container.

#include "gtgm/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace gtgm {

struct ParamBlock {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;

    ParamBlock() = default;
    ParamBlock(std::string n, std::vector<std::size_t> s);

    std::size_t size() const noexcept { return value.size(); }
    void zero_grad();
};

using ParamRefs = std::vector<ParamBlock*>;

void zero_grads(const ParamRefs& params);
double grad_norm(const ParamRefs& params);
std::size_t parameter_count(const ParamRefs& params);

// Fan-in scaled uniform in [-sqrt(6 / fan_in), sqrt(6 / fan_in)].
void init_uniform_fan_in(ParamBlock& p, std::size_t fan_in, Rng& rng);

// Checkpoint layout, all integers little-endian:
//   "GTGMCKPT" | u32 version | u32 metadata length | metadata JSON |
//   u32 block count | per block: u32 name length, name, u32 ndim, u64 dims..., f64 values...
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<ParamBlock> blocks;

    const ParamBlock* find(const std::string& name) const;
    const ParamBlock& at(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies block values by name into params; missing or mis-shaped blocks are errors.
void load_blocks(const Checkpoint& c, const ParamRefs& params);
void append_blocks(Checkpoint& c, const ParamRefs& params);

} // namespace gtgm
