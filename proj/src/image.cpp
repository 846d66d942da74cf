#include "mmr/image.hpp"

#include <jpeglib.h>
#include <png.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

#include "mmr/errors.hpp"
#include "mmr/rng.hpp"

namespace mmr {
namespace {

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

Image8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out(static_cast<int>(img.width), static_cast<int>(img.height), gray ? 1 : 3);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Image8 read_jpeg(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw IoError("cannot open " + path.string());
  jpeg_decompress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = &jpeg_error_exit;
  Image8 out;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("cannot decode JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.num_components != 1) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out = Image8(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height),
               cinfo.output_components);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() +
                   static_cast<std::size_t>(cinfo.output_scanline) * out.width * out.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

// Source rectangle in pixel units.
struct Window {
  double x0, y0, w, h;
};

Window crop_window(int width, int height, const PreprocessOptions& opts, std::uint64_t seed) {
  if (!opts.augment) return {0.0, 0.0, double(width), double(height)};
  Rng rng(seed);
  const double s = rng.uniform(opts.crop_scale_min, opts.crop_scale_max);
  const double w = std::max(1.0, std::floor(width * s));
  const double h = std::max(1.0, std::floor(height * s));
  const double x0 = std::floor(rng.uniform() * (width - w + 1));
  const double y0 = std::floor(rng.uniform() * (height - h + 1));
  return {x0, y0, w, h};
}

void validate(const PreprocessOptions& opts) {
  if (opts.crop_to <= 0 || opts.crop_to % 16 != 0)
    throw ConfigError("crop_to must be a positive multiple of 16");
  if (opts.resize_to < opts.crop_to) throw ConfigError("resize_to must be >= crop_to");
  if (!(opts.crop_scale_min > 0.0 && opts.crop_scale_min <= opts.crop_scale_max &&
        opts.crop_scale_max <= 1.0))
    throw ConfigError("crop scale range must satisfy 0 < min <= max <= 1");
}

}  // namespace

Image8 read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("image not found: " + path.string());
  return has_png_signature(path) ? read_png(path) : read_jpeg(path);
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3)
    throw ShapeError("write_png expects 1 or 3 channels");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
}

std::vector<float> resize_bilinear(const std::vector<float>& src, int sh, int sw, int dh, int dw) {
  if (sh == dh && sw == dw) return src;
  std::vector<float> out(static_cast<std::size_t>(dh) * dw);
  const double sy = double(sh) / dh, sx = double(sw) / dw;
  for (int y = 0; y < dh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(sh - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(sw - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double top = src[y0 * sw + x0] * (1 - wx) + src[y0 * sw + x1] * wx;
      const double bot = src[y1 * sw + x0] * (1 - wx) + src[y1 * sw + x1] * wx;
      out[static_cast<std::size_t>(y) * dw + x] = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  }
  return out;
}

ImageTensor preprocess_image(const Image8& raw, const PreprocessOptions& opts,
                             std::uint64_t seed) {
  validate(opts);
  if (raw.channels != 1 && raw.channels != 3) throw ShapeError("expected 1 or 3 channels");
  if (raw.channels == 1) spdlog::warn("grayscale input replicated to 3 channels");

  const Window win = crop_window(raw.width, raw.height, opts, seed);
  const int cw = static_cast<int>(win.w), ch = static_cast<int>(win.h);
  const int off = (opts.resize_to - opts.crop_to) / 2;

  ImageTensor out(3, opts.crop_to, opts.crop_to);
  out.norm = opts.norm;
  std::vector<float> plane(static_cast<std::size_t>(cw) * ch);
  for (int c = 0; c < 3; ++c) {
    const int src_c = raw.channels == 1 ? 0 : c;
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x)
        plane[static_cast<std::size_t>(y) * cw + x] =
            raw.at(static_cast<int>(win.y0) + y, static_cast<int>(win.x0) + x, src_c) / 255.0f;
    const std::vector<float> resized =
        resize_bilinear(plane, ch, cw, opts.resize_to, opts.resize_to);
    const float mean = opts.norm.mean[c], sd = opts.norm.std[c];
    for (int y = 0; y < opts.crop_to; ++y)
      for (int x = 0; x < opts.crop_to; ++x)
        out.at(c, y, x) =
            (resized[static_cast<std::size_t>(y + off) * opts.resize_to + x + off] - mean) / sd;
  }
  return out;
}

std::vector<std::uint8_t> preprocess_mask(const Image8& mask, const PreprocessOptions& opts,
                                          std::uint64_t seed) {
  validate(opts);
  const Window win = crop_window(mask.width, mask.height, opts, seed);
  const int off = (opts.resize_to - opts.crop_to) / 2;
  const double sy = win.h / opts.resize_to, sx = win.w / opts.resize_to;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(opts.crop_to) * opts.crop_to);
  for (int y = 0; y < opts.crop_to; ++y) {
    const int src_y = static_cast<int>(win.y0) +
                      std::min(static_cast<int>((y + off + 0.5) * sy), static_cast<int>(win.h) - 1);
    for (int x = 0; x < opts.crop_to; ++x) {
      const int src_x = static_cast<int>(win.x0) +
                        std::min(static_cast<int>((x + off + 0.5) * sx), static_cast<int>(win.w) - 1);
      out[static_cast<std::size_t>(y) * opts.crop_to + x] = mask.at(src_y, src_x, 0) > 127 ? 1 : 0;
    }
  }
  return out;
}

}  // namespace mmr
