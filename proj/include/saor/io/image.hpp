#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "saor/core/error.hpp"

namespace saor::io {

/// Planar float image: data[c * height * width + y * width + x].
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.f)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  std::size_t plane() const { return height * width; }
};

/// Reads an 8- or 16-bit PNG into [0,1]. `channels` is 1 (gray) or 3 (rgb);
/// other layouts are converted by libpng.
inline Image read_png(const std::string& path, std::size_t channels = 3) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path + ": " + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path + ": " + img.message);
  }
  Image out(channels, img.height, img.width);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        out.at(c, y, x) = buf[(y * out.width + x) * channels + c] / 255.f;
  return out;
}

/// Width and height from the PNG header without decoding pixels.
inline std::pair<std::size_t, std::size_t> png_size(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path + ": " + img.message);
  }
  const std::pair<std::size_t, std::size_t> wh{img.width, img.height};
  png_image_free(&img);
  return wh;
}

/// Writes a 1- or 3-channel image as 8-bit PNG, clamping to [0,1].
inline void write_png(const Image& im, const std::string& path) {
  if (im.channels != 1 && im.channels != 3) {
    throw std::invalid_argument("write_png supports 1 or 3 channels, got " + std::to_string(im.channels));
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(im.width * im.height * im.channels);
  for (std::size_t y = 0; y < im.height; ++y)
    for (std::size_t x = 0; x < im.width; ++x)
      for (std::size_t c = 0; c < im.channels; ++c) {
        const float v = std::clamp(im.at(c, y, x), 0.f, 1.f);
        buf[(y * im.width + x) * im.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.f));
      }
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path + ": " + img.message);
  }
}

/// Portable float map, little-endian, rows stored bottom to top.
inline void write_pfm(const Image& im, const std::string& path) {
  if (im.channels != 1 && im.channels != 3) throw std::invalid_argument("write_pfm supports 1 or 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << (im.channels == 3 ? "PF" : "Pf") << '\n' << im.width << ' ' << im.height << "\n-1.0\n";
  std::vector<float> row(im.width * im.channels);
  for (std::size_t y = im.height; y-- > 0;) {
    for (std::size_t x = 0; x < im.width; ++x)
      for (std::size_t c = 0; c < im.channels; ++c) row[x * im.channels + c] = im.at(c, y, x);
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!f) throw IoError("failed writing " + path);
}

inline Image read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string magic;
  std::size_t w = 0, h = 0;
  double scale = 0;
  f >> magic >> w >> h >> scale;
  f.get();
  if ((magic != "Pf" && magic != "PF") || w == 0 || h == 0 || !f) throw IoError("malformed PFM header in " + path);
  if (scale > 0) throw IoError("big-endian PFM not supported: " + path);
  const std::size_t c = magic == "PF" ? 3 : 1;
  Image im(c, h, w);
  std::vector<float> row(w * c);
  for (std::size_t y = h; y-- > 0;) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!f) throw IoError("truncated PFM " + path);
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) im.at(k, y, x) = row[x * c + k];
  }
  return im;
}

}  // namespace saor::io
