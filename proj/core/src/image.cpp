// SPDX-License-Identifier: Apache-2.0
#include "fpt/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fpt/errors.hpp"

namespace fpt {

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&png, path.c_str()) == 0) {
    throw IoError("cannot read PNG '" + path.string() + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> interleaved(PNG_IMAGE_SIZE(png));
  if (png_image_finish_read(&png, nullptr, interleaved.data(), 0, nullptr) == 0) {
    const std::string message = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG '" + path.string() + "': " + message);
  }
  Image img(png.width, png.height);
  const std::size_t plane = img.width * img.height;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      img.pixels[c * plane + i] = interleaved[3 * i + c];
    }
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  const std::size_t plane = image.width * image.height;
  std::vector<std::uint8_t> interleaved(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      interleaved[3 * i + c] = image.pixels[c * plane + i];
    }
  }
  if (png_image_write_to_file(&png, path.c_str(), 0, interleaved.data(), 0, nullptr) == 0) {
    throw IoError("cannot write PNG '" + path.string() + "': " + png.message);
  }
}

namespace {

struct Tap2 {
  std::size_t lo;
  std::size_t hi;
  double t;
};

std::vector<Tap2> linear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap2> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps[o] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Image resize_bilinear(const Image& image, std::size_t target_w, std::size_t target_h) {
  if (target_w == 0 || target_h == 0) {
    throw InvalidValueError("resize_bilinear: target size must be at least 1");
  }
  if (target_w == image.width && target_h == image.height) {
    return image;
  }
  const auto xs = linear_taps(image.width, target_w);
  const auto ys = linear_taps(image.height, target_h);
  Image out(target_w, target_h);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < target_h; ++y) {
      const auto& ty = ys[y];
      for (std::size_t x = 0; x < target_w; ++x) {
        const auto& tx = xs[x];
        const double top = (1.0 - tx.t) * image.at(c, ty.lo, tx.lo) + tx.t * image.at(c, ty.lo, tx.hi);
        const double bottom =
            (1.0 - tx.t) * image.at(c, ty.hi, tx.lo) + tx.t * image.at(c, ty.hi, tx.hi);
        const double v = (1.0 - ty.t) * top + ty.t * bottom;
        out.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out(image.width, image.height);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < image.height; ++y) {
      for (std::size_t x = 0; x < image.width; ++x) {
        out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
      }
    }
  }
  return out;
}

Image crop(const Image& image, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  if (x + w > image.width || y + h > image.height) {
    throw InvalidValueError("crop window exceeds image bounds");
  }
  Image out(w, h);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t col = 0; col < w; ++col) {
        out.at(c, r, col) = image.at(c, y + r, x + col);
      }
    }
  }
  return out;
}

}  // namespace fpt
