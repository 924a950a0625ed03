#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "membed/trainer.hpp"

namespace membed {

// Framework-neutral binary checkpoint: magic "MECK", format version, a JSON
// metadata block (stage, config echo, RNG stream states), a named-tensor
// table (name, dtype, shape, payload offset), the f64 little-endian payload,
// and a trailing CRC32 covering everything after the magic and version.
// Tensor names: head.branch<b>.weight / head.branch<b>.bias, arcface.weight,
// backbone.weight, backbone.bias.

struct LoadedCheckpoint {
    ModelParts parts;
    TrainConfig config;  // config echo of the run that saved the file
    RngStates rng;
    int stage = 0;
};

void save_checkpoint(const std::string& path, const ModelParts& parts,
                     const TrainConfig& cfg, const RngStates& rng);

LoadedCheckpoint load_checkpoint(const std::string& path);

// Header-level view: tensor names and shapes plus the stored CRC, without
// materializing any tensor.
struct CheckpointEntry {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::uint64_t count = 0;
};

struct CheckpointSummary {
    int stage = 0;
    std::uint32_t version = 0;
    std::vector<CheckpointEntry> tensors;
    std::uint32_t crc = 0;
    bool crc_ok = false;
    std::string meta_json;
};

CheckpointSummary inspect_checkpoint(const std::string& path);

// Writes one raw .bin per tensor (f64 little-endian, row-major) plus a
// manifest.json describing names, shapes, and byte order, so the weights can
// be loaded from any framework.
void export_checkpoint(const std::string& checkpoint_path, const std::string& out_dir);

}  // namespace membed
