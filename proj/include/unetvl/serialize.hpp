#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "unetvl/tensor.hpp"

namespace uvl {

/// One tensor record: magic "UVL1", u8 dtype code (0=f32, 1=f64), u8 rank,
/// rank x u32 little-endian extents, then raw little-endian values.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Checkpoint container: magic "UVLC", u32 entry count, then per entry a
/// u32 name length, the UTF-8 name, and one UVL1 tensor record.
void save_container(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_container(const std::filesystem::path& path);

}  // namespace uvl
