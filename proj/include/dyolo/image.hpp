#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dyolo/errors.hpp"

namespace dyolo {

// Interleaved RGB intensities in [0,1], row-major (y, x, channel).
struct ImagePlane {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  ImagePlane() = default;
  ImagePlane(int w, int h, double fill = 0.0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h * 3, fill) {
    if (w < 1 || h < 1) throw InvalidArgument("ImagePlane: non-positive dimensions");
  }

  double& at(int x, int y, int c) { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int x, int y, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool same_size(const ImagePlane& o) const { return width == o.width && height == o.height; }
};

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_png(const std::filesystem::path& path, const ImagePlane& img) {
  std::vector<std::uint8_t> bytes(img.values.size());
  std::transform(img.values.begin(), img.values.end(), bytes.begin(), quantize);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError("write_png: " + path.string() + ": " + image.message);
  }
}

inline ImagePlane read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("read_png: " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("read_png: " + path.string() + ": " + image.message);
  }
  ImagePlane out(static_cast<int>(image.width), static_cast<int>(image.height));
  std::transform(bytes.begin(), bytes.end(), out.values.begin(),
                 [](std::uint8_t b) { return b / 255.0; });
  return out;
}

// Drop to 8-bit and back, as a PNG round trip would.
inline ImagePlane quantized(const ImagePlane& img) {
  ImagePlane out = img;
  for (double& v : out.values) v = quantize(v) / 255.0;
  return out;
}

}  // namespace dyolo
