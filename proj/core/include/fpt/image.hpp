// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fpt {

/// 8-bit RGB image, channel-planar (C, H, W).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // 3 * height * width

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(3 * w * h, fill) {}

  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }

  bool operator==(const Image&) const = default;
};

/// Throws IoError on unreadable or undecodable files.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Bilinear resampling to (target_w, target_h) with half-pixel centers and
/// clamped borders; results round to nearest.
Image resize_bilinear(const Image& image, std::size_t target_w, std::size_t target_h);
inline Image resize_bilinear(const Image& image, std::size_t target) {
  return resize_bilinear(image, target, target);
}

Image flip_horizontal(const Image& image);
/// Copies the (w, h) window whose top-left corner is (x, y).
Image crop(const Image& image, std::size_t x, std::size_t y, std::size_t w, std::size_t h);

}  // namespace fpt
