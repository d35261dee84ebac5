// SPDX-License-Identifier: Apache-2.0
#include "fpt/tensor_archive.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>

#include "fpt/errors.hpp"
#include "fpt/hash.hpp"

namespace fpt {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(std::string_view text) {
  if (text.empty() || text.size() > 16) {
    throw InvalidValueError("bad hex digest '" + std::string(text) + "'");
  }
  std::uint64_t v = 0;
  for (char c : text) {
    v <<= 4;
    if (c >= '0' && c <= '9') {
      v |= static_cast<std::uint64_t>(c - '0');
    } else if (c >= 'a' && c <= 'f') {
      v |= static_cast<std::uint64_t>(c - 'a' + 10);
    } else if (c >= 'A' && c <= 'F') {
      v |= static_cast<std::uint64_t>(c - 'A' + 10);
    } else {
      throw InvalidValueError("bad hex digest '" + std::string(text) + "'");
    }
  }
  return v;
}

namespace {

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  out.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> buf{};
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!in) {
    throw IoError("unexpected end of file");
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(buf[i]) << (8 * i);
  }
  return v;
}

constexpr std::size_t kChunk = 4096;

}  // namespace

void write_framed_header(std::ostream& out, std::string_view magic, std::uint32_t version,
                         const nlohmann::json& header) {
  if (magic.size() != 4) {
    throw InvalidValueError("magic must be 4 bytes");
  }
  const std::string text = header.dump();
  out.write(magic.data(), 4);
  put_le<std::uint32_t>(out, version);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) {
    throw IoError("write failed");
  }
}

FramedHeader read_framed_header(std::istream& in, std::string_view magic) {
  std::array<char, 4> got{};
  in.read(got.data(), 4);
  if (!in || std::string_view(got.data(), 4) != magic) {
    throw IoError("bad magic: expected '" + std::string(magic) + "'");
  }
  FramedHeader fh;
  fh.version = get_le<std::uint32_t>(in);
  const auto len = get_le<std::uint64_t>(in);
  if (len > (std::uint64_t(1) << 32)) {
    throw IoError("implausible header length");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) {
    throw IoError("truncated header");
  }
  try {
    fh.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("corrupt header: ") + e.what());
  }
  fh.payload_offset = 4 + 4 + 8 + len;
  return fh;
}

void write_f32_le(std::ostream& out, std::span<const float> values) {
  std::array<char, kChunk * 4> buf{};
  std::size_t i = 0;
  while (i < values.size()) {
    const std::size_t n = std::min(kChunk, values.size() - i);
    for (std::size_t j = 0; j < n; ++j) {
      const auto bits = std::bit_cast<std::uint32_t>(values[i + j]);
      for (int b = 0; b < 4; ++b) {
        buf[j * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
      }
    }
    out.write(buf.data(), static_cast<std::streamsize>(n * 4));
    i += n;
  }
  if (!out) {
    throw IoError("write failed");
  }
}

void read_f32_le(std::istream& in, std::span<float> values) {
  std::array<unsigned char, kChunk * 4> buf{};
  std::size_t i = 0;
  while (i < values.size()) {
    const std::size_t n = std::min(kChunk, values.size() - i);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    if (!in) {
      throw IoError("truncated array data");
    }
    for (std::size_t j = 0; j < n; ++j) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(buf[j * 4 + b]) << (8 * b);
      }
      values[i + j] = std::bit_cast<float>(bits);
    }
    i += n;
  }
}

void write_u32_le(std::ostream& out, std::span<const std::uint32_t> values) {
  for (auto v : values) {
    put_le<std::uint32_t>(out, v);
  }
  if (!out) {
    throw IoError("write failed");
  }
}

void read_u32_le(std::istream& in, std::span<std::uint32_t> values) {
  for (auto& v : values) {
    v = get_le<std::uint32_t>(in);
  }
}

const ArchiveTensor& TensorArchive::at(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) {
      return t;
    }
  }
  throw LookupError("archive has no tensor '" + std::string(name) + "'");
}

void write_tensor_archive(const std::filesystem::path& path, std::string_view magic,
                          const nlohmann::json& meta, const std::vector<ArchiveTensor>& tensors) {
  nlohmann::json header = meta.is_null() ? nlohmann::json::object() : meta;
  header["dtype"] = "f32le";
  auto list = nlohmann::json::array();
  for (const auto& t : tensors) {
    if (t.values.size() != shape_numel(t.shape)) {
      throw ShapeError("archive tensor '" + t.name + "' has inconsistent size");
    }
    list.push_back({{"name", t.name}, {"shape", t.shape}});
  }
  header["tensors"] = list;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open '" + path.string() + "' for writing");
  }
  write_framed_header(out, magic, 1, header);
  for (const auto& t : tensors) {
    write_f32_le(out, t.values);
  }
  out.flush();
  if (!out) {
    throw IoError("write to '" + path.string() + "' failed");
  }
}

TensorArchive read_tensor_archive(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open '" + path.string() + "'");
  }
  auto fh = read_framed_header(in, magic);
  TensorArchive archive;
  archive.header = std::move(fh.header);
  if (archive.header.value("dtype", "") != "f32le") {
    throw IoError("'" + path.string() + "': unsupported dtype");
  }
  for (const auto& entry : archive.header.at("tensors")) {
    ArchiveTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    t.values.resize(shape_numel(t.shape));
    read_f32_le(in, t.values);
    archive.tensors.push_back(std::move(t));
  }
  return archive;
}

}  // namespace fpt
