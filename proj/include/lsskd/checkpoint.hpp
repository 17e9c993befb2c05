#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsskd/network.hpp"

namespace lsskd {

/// One named tensor in the container; element bytes are little-endian.
struct CheckpointRecord {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> data;
};

/// Versioned "LSSK" container. Parameter records carry the layer names;
/// batch-norm buffers end in running_mean / running_var; optimizer velocity
/// records are prefixed "opt.". Stripping removes branch-prefixed and
/// optimizer records.
struct Checkpoint {
    std::uint32_t version = 1;
    std::uint64_t config_digest = 0;
    bool stripped = false;
    std::uint32_t epoch = 0; // completed epochs
    double best_top1 = 0.0;
    std::vector<CheckpointRecord> records;

    const CheckpointRecord* find(const std::string& name) const;
};

CheckpointRecord record_from_tensor(const std::string& name, const Tensor& t);
Tensor tensor_from_record(const CheckpointRecord& rec);

Checkpoint checkpoint_from_network(const StudentNetwork& net, bool include_optimizer,
                                   std::uint32_t epoch = 0, double best_top1 = 0.0);
/// Restores parameters and buffers (and velocities when present and wanted).
/// Digest and precision must match.
void apply_checkpoint(const Checkpoint& ckpt, StudentNetwork& net, bool load_optimizer);

/// Drops every branch-prefixed record and all optimizer state.
Checkpoint strip_checkpoint(const Checkpoint& ckpt);

/// Scalar count over parameter records (optimizer and running stats excluded).
std::size_t checkpoint_parameter_count(const Checkpoint& ckpt);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

} // namespace lsskd
