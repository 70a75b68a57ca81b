#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tcaf/model.hpp"

// Binary model file: "TCAF", u32 version, ArchConfig as length-prefixed JSON,
// u32 parameter count, then per parameter its name, rank, dims and
// little-endian float32 values, then the batch-norm running statistics.
namespace tcaf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::uint8_t> serialize_model(const TcafModel<T>& model);
template <typename T>
TcafModel<T> deserialize_model(std::span<const std::uint8_t> bytes);

template <typename T>
void save_checkpoint(const TcafModel<T>& model, const std::filesystem::path& path);
template <typename T>
TcafModel<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace tcaf
