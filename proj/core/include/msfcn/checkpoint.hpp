#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "msfcn/param_store.hpp"

namespace msfcn {

// Binary parameter checkpoint, little-endian:
//   "MSFC" | version u32 | count u32 | per entry:
//   name_len u16 | name bytes | dtype u8 (0=f32, 1=f64) | rank u8 | dims u32 x rank | raw values

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::variant<std::vector<float>, std::vector<double>> values;

  std::uint8_t dtype() const noexcept { return values.index() == 0 ? 0 : 1; }
  std::size_t numel() const noexcept;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint_file(const std::filesystem::path& path,
                           const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint_file(const std::filesystem::path& path);

template <typename T>
std::vector<CheckpointEntry> to_checkpoint(const ParamStore<T>& store);

/// Copies checkpoint values into `store`. Every store entry must be present
/// with identical dims; extra or missing names raise a config error naming them.
template <typename T>
void load_into(const std::vector<CheckpointEntry>& entries, ParamStore<T>& store);

}  // namespace msfcn
