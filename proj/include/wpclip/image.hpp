#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace wpclip {

// 8-bit interleaved RGB raster. Decoders normalize every input to this layout:
// grayscale is replicated to three channels and alpha is composited over white.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, width * height * 3

  bool empty() const noexcept { return width == 0 || height == 0; }
  std::uint8_t* pixel(int x, int y) { return rgb.data() + (std::size_t(y) * width + x) * 3; }
  const std::uint8_t* pixel(int x, int y) const {
    return rgb.data() + (std::size_t(y) * width + x) * 3;
  }

  static Image filled(int width, int height, std::array<std::uint8_t, 3> color);

  friend bool operator==(const Image&, const Image&) = default;
};

// Throw InputError (with the path) when the file is missing or undecodable.
Image decode_image(const std::filesystem::path& path);
Image decode_image_bytes(std::span<const std::uint8_t> encoded, const std::string& label);

void write_png(const Image& image, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const Image& image);
std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality = 92);

// Crop/resize helpers used by the judge composer and tests.
Image crop(const Image& image, int x, int y, int width, int height);
Image resize_to_height(const Image& image, int height);

// Shorter side resized to target_size (bicubic), then center-cropped to a
// square, scaled to [0,1] and normalized per channel. Defaults are the
// published ViT-B/32 dual-encoder constants.
struct PreprocessSpec {
  int target_size = 224;
  std::array<float, 3> channel_mean = {0.48145466f, 0.4578275f, 0.40821073f};
  std::array<float, 3> channel_std = {0.26862954f, 0.26130258f, 0.27577711f};

  friend bool operator==(const PreprocessSpec&, const PreprocessSpec&) = default;
};

// Planar CHW float tensor of shape (3, size, size).
struct ImageTensor {
  int size = 0;
  std::vector<float> data;

  float at(int c, int y, int x) const {
    return data[(std::size_t(c) * size + y) * size + x];
  }
  std::array<std::size_t, 3> shape() const {
    return {3, std::size_t(size), std::size_t(size)};
  }
};

ImageTensor preprocess(const Image& image, const PreprocessSpec& spec);

}  // namespace wpclip
