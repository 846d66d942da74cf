#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace mmr {

// Decoded 8-bit image, interleaved HWC.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// PNG or JPEG, detected from the file signature. Alpha is dropped.
Image8 read_image(const std::filesystem::path& path);
// Writes 1- or 3-channel PNG.
void write_png(const std::filesystem::path& path, const Image8& image);

struct Normalization {
  // ImageNet statistics, the pre-training corpus of every supported teacher.
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};

// Normalized planar image (CHW).
struct ImageTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;
  Normalization norm;

  ImageTensor() = default;
  ImageTensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

struct PreprocessOptions {
  int resize_to = 256;
  int crop_to = 224;
  bool augment = false;
  // Random crop side, as a fraction of the source side, applied before resizing.
  double crop_scale_min = 0.8;
  double crop_scale_max = 1.0;
  Normalization norm;
};

// Crop (optional, random) -> bilinear resize -> center crop -> normalize.
// Throws ConfigError when crop_to is not a multiple of 16 or exceeds resize_to.
ImageTensor preprocess_image(const Image8& raw, const PreprocessOptions& opts,
                             std::uint64_t seed = 0);

// Same geometry as preprocess_image with nearest-neighbour sampling; output is
// crop_to x crop_to with values {0, 1}.
std::vector<std::uint8_t> preprocess_mask(const Image8& mask, const PreprocessOptions& opts,
                                          std::uint64_t seed = 0);

// Bilinear resize of a single float plane with half-pixel centres.
std::vector<float> resize_bilinear(const std::vector<float>& src, int sh, int sw, int dh, int dw);

}  // namespace mmr
