#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "geopeft/tensor.hpp"

namespace geopeft {

struct NamedParameter {
    std::string name;
    Tensor tensor;
    /// Running statistics and similar state: stored, never optimized.
    bool buffer = false;
};

using ParameterList = std::vector<NamedParameter>;

/// One stored array: name, shape and little-endian f32 payload.
struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

/// Directory layout: manifest.json listing {name, shape, dtype "f32", offset,
/// length} per entry, and weights.bin holding the payloads back to back in
/// manifest order.
void save_checkpoint(const std::filesystem::path& dir, const std::vector<CheckpointEntry>& entries);
void save_checkpoint(const std::filesystem::path& dir, const ParameterList& params);
std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& dir);

/// Copies stored values into matching parameters (same name and shape).
/// Parameters without a stored entry are left untouched when allow_missing;
/// otherwise they are an error. Returns the number of parameters loaded.
std::size_t restore_parameters(ParameterList& params, const std::vector<CheckpointEntry>& entries,
                               bool allow_missing = false);

std::vector<CheckpointEntry> snapshot(const ParameterList& params);

}  // namespace geopeft
