#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbed/model.hpp"

namespace bbed {

// File layout, little-endian:
//   "BBED" | u32 version | u32 tensor count | u8 arch id          (13 bytes)
//   per tensor: u32 name length | name | u8 dtype | u32 rank | u64 dims[rank] | payload
// dtype 0 = f32, 1 = packed sign bits (dims = [bits], payload u64 words), 2 = i64.
// A model with layers carries "meta.model", "meta.compression", "meta.layers"
// plus "layerN.*" tensors; an empty model is the bare header.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderBytes = 13;

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
/// Throws CheckpointError naming the offending tensor; never returns a partial model.
Model decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Written to a temporary sibling and renamed into place.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace bbed
