// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpt/tensor.hpp"

namespace fpt {

/// Every binary artifact starts with:
///   magic (4 bytes) | version (u32 LE) | header length (u64 LE) | header (UTF-8 JSON)
/// followed by raw little-endian arrays whose layout the header declares.
struct FramedHeader {
  std::uint32_t version = 0;
  nlohmann::json header;
  std::uint64_t payload_offset = 0;  // absolute byte offset of the first array
};

void write_framed_header(std::ostream& out, std::string_view magic, std::uint32_t version,
                         const nlohmann::json& header);
FramedHeader read_framed_header(std::istream& in, std::string_view magic);

void write_f32_le(std::ostream& out, std::span<const float> values);
void read_f32_le(std::istream& in, std::span<float> values);
void write_u32_le(std::ostream& out, std::span<const std::uint32_t> values);
void read_u32_le(std::istream& in, std::span<std::uint32_t> values);

struct ArchiveTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct TensorArchive {
  nlohmann::json header;  // caller metadata plus "dtype" and "tensors"
  std::vector<ArchiveTensor> tensors;

  const ArchiveTensor& at(std::string_view name) const;
};

/// Writes `tensors` in order after a header listing their names and shapes.
/// `meta` keys are merged into the header.
void write_tensor_archive(const std::filesystem::path& path, std::string_view magic,
                          const nlohmann::json& meta, const std::vector<ArchiveTensor>& tensors);
TensorArchive read_tensor_archive(const std::filesystem::path& path, std::string_view magic);

}  // namespace fpt
