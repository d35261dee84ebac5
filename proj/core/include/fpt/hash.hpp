// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

namespace fpt {

/// Incremental 64-bit FNV-1a. Multi-byte values are fed little-endian so
/// digests agree across hosts.
class Fnv1a {
 public:
  Fnv1a& bytes(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001B3ULL;
    }
    return *this;
  }

  Fnv1a& u64(std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) {
      buf[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    return bytes(buf, 8);
  }

  Fnv1a& i64(std::int64_t v) { return u64(static_cast<std::uint64_t>(v)); }

  Fnv1a& f64(double v) { return u64(std::bit_cast<std::uint64_t>(v)); }

  Fnv1a& f32(float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    return u64(bits);
  }

  Fnv1a& str(std::string_view s) {
    u64(s.size());
    return bytes(s.data(), s.size());
  }

  Fnv1a& floats(std::span<const float> values) {
    for (float v : values) {
      f32(v);
    }
    return *this;
  }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

std::string hex64(std::uint64_t v);
std::uint64_t parse_hex64(std::string_view text);

}  // namespace fpt
