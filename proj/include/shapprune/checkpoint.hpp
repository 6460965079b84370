#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "shapprune/model.hpp"

namespace shapprune {

// Checkpoint layout, all integers and floats little-endian:
//
//   offset  size  field
//   0       8     magic "SHPRUNE\0"
//   8       4     u32 format version (kCheckpointVersion)
//   12      4     u32 class_count
//   16      4     u32 input rank R
//   20      4R    u32 input extents
//   ..      4     u32 layer count L
//   ..      32L   layer descriptor table, eight u32 per layer:
//                   kind, then kind-specific fields zero-padded
//                   dense:     in_units, out_units
//                   conv2d:    in_channels, out_channels, kernel, stride, padding
//                   batchnorm: channels, momentum (f32 bits), epsilon (f32 bits)
//                   maxpool:   window
//   ..            tensors in layer order, f32 row-major, no per-tensor header:
//                   dense/conv2d: weight, bias
//                   batchnorm:    gamma, beta, running_mean, running_var
//   ..      4     u32 neuron count n
//   ..      ceil(n/8)  prune mask bitset, bit i of byte i/8 (LSB first); 1 = alive
//   end-4   4     u32 CRC-32 (zlib polynomial) of every preceding byte

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
/// Throws CheckpointError (BadMagic, BadVersion, BadChecksum, Malformed).
Model decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace shapprune
