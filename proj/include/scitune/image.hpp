#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace scitune {

// Row-major, channel-interleaved intensities in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c), data(std::size_t(w) * h * c, 0.0f) {}

  float& at(int x, int y, int c = 0) { return data[(std::size_t(y) * width + x) * channels + c]; }
  float at(int x, int y, int c = 0) const { return data[(std::size_t(y) * width + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

// Throws scitune::Error when the size/range invariants do not hold.
void validate(const Image& img);

// `.f32raw`: three little-endian int32 (width, height, channels) followed by
// width*height*channels little-endian float32 values.
void save_f32raw(const Image& img, const std::filesystem::path& path);
Image load_f32raw(const std::filesystem::path& path);

// 8/16-bit PNG, grayscale or RGB (alpha dropped), normalized to [0, 1].
Image load_png(const std::filesystem::path& path);

// Dispatches on the extension (.png or .f32raw).
Image load_image(const std::filesystem::path& path);

}  // namespace scitune
