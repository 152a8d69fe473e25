#pragma once

// Binary persistence. All multi-byte fields are little-endian.
//
// Volume file (20-byte header, then payload):
//   0  char[4]  "NPAV"
//   4  u16      format version (1)
//   6  u16      dtype tag (1 = float64)
//   8  u32      C
//  12  u32      H
//  16  u32      W
//  20  f64[C*H*W] row-major payload
//
// Checkpoint file:
//   0  char[4]  "NPCK"
//   4  u16      format version (1)
//   6  u64      config fingerprint (FNV-1a 64 of the compact config JSON)
//  14  u32      config JSON length L, then L bytes of JSON
//      u32      array count, then per array:
//               u16 name length, name bytes, u8 rank, u32 dims[rank], f64 payload

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "brnpa/tensor.hpp"

namespace brnpa::io {

inline constexpr std::uint16_t kVolumeVersion = 1;
inline constexpr std::uint16_t kDtypeFloat64 = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Dense array detached from any graph.
struct Array {
  Shape shape;
  std::vector<double> values;

  Tensor to_tensor() const { return Tensor::from(shape, values); }
  bool operator==(const Array&) const = default;
};

std::vector<std::uint8_t> encode_volume(const Array& volume);
Array decode_volume(std::span<const std::uint8_t> bytes);
void write_volume(const std::filesystem::path& path, const Array& volume);
Array read_volume(const std::filesystem::path& path);

/// NumPy .npy reader for little-endian float32/float64, C order, rank 3
/// (C,H,W) or rank 4 (N,C,H,W). float32 is widened exactly.
Array decode_npy(std::span<const std::uint8_t> bytes);
Array read_npy(const std::filesystem::path& path);
/// Writes float64 .npy (format 1.0).
std::vector<std::uint8_t> encode_npy(const Array& array);
/// Item `index` of a rank-4 batch, or the array itself when rank 3.
Array batch_item(const Array& array, std::size_t index);

struct NamedArray {
  std::string name;
  Array array;
  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  nlohmann::json config;
  std::vector<NamedArray> arrays;
};

std::uint64_t fingerprint(const nlohmann::json& config);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
/// Validates the stored fingerprint against the embedded config.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace brnpa::io
