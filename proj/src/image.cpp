#include "scitune/image.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "scitune/error.hpp"

namespace scitune {

static_assert(std::endian::native == std::endian::little, "f32raw I/O assumes a little-endian host");

void validate(const Image& img) {
  if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3)) {
    throw Error("invalid image geometry " + std::to_string(img.width) + "x" +
                std::to_string(img.height) + "x" + std::to_string(img.channels));
  }
  if (img.data.size() != std::size_t(img.width) * img.height * img.channels) {
    throw Error("image data length does not match its geometry");
  }
  for (float v : img.data) {
    if (!(v >= 0.0f && v <= 1.0f)) throw Error("image intensity outside [0,1]");
  }
}

void save_f32raw(const Image& img, const std::filesystem::path& path) {
  validate(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::int32_t header[3] = {img.width, img.height, img.channels};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!out) throw Error("short write to " + path.string());
}

Image load_f32raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::int32_t header[3];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) {
    throw Error(path.string() + ": truncated f32raw header");
  }
  if (header[0] <= 0 || header[1] <= 0 || (header[2] != 1 && header[2] != 3) ||
      header[0] > 1 << 15 || header[1] > 1 << 15) {
    throw Error(path.string() + ": bad f32raw header");
  }
  Image img(header[0], header[1], header[2]);
  if (!in.read(reinterpret_cast<char*>(img.data.data()),
               static_cast<std::streamsize>(img.data.size() * sizeof(float)))) {
    throw Error(path.string() + ": truncated f32raw payload");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(path.string() + ": trailing bytes after f32raw payload");
  }
  validate(img);
  return img;
}

Image load_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw Error(path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw Error(path.string() + ": " + msg);
  }
  Image img(static_cast<int>(png.width), static_cast<int>(png.height), color ? 3 : 1);
  std::transform(buffer.begin(), buffer.end(), img.data.begin(),
                 [](png_byte b) { return static_cast<float>(b) / 255.0f; });
  return img;
}

Image load_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return load_png(path);
  if (ext == ".f32raw") return load_f32raw(path);
  throw Error("unsupported image format '" + ext + "' for " + path.string());
}

}  // namespace scitune
