#include "uwm/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace uwm {

namespace {

uint8_t to_u8(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(v * 255.0));
}

bool has_suffix(const std::string& s, const char* suf) {
  const size_t n = std::strlen(suf);
  if (s.size() < n) return false;
  std::string tail = s.substr(s.size() - n);
  for (auto& c : tail) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return tail == suf;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

Image load_png(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open image " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png reader allocation failed");
  }
  std::vector<png_bytep> rows;
  std::vector<uint8_t> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("failed to decode png " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  buf.resize(static_cast<size_t>(w) * h * 3);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img;
  img.h = h;
  img.w = w;
  img.px.resize(static_cast<size_t>(3) * h * w);
  for (int64_t y = 0; y < img.h; ++y)
    for (int64_t x = 0; x < img.w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        img.at(c, y, x) = buf[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

void save_png(const std::string& path, const Image& img) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write image " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("png writer allocation failed");
  }
  std::vector<uint8_t> buf(static_cast<size_t>(img.h) * img.w * 3);
  std::vector<png_bytep> rows(static_cast<size_t>(img.h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed to encode png " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  for (int64_t y = 0; y < img.h; ++y)
    for (int64_t x = 0; x < img.w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        buf[(static_cast<size_t>(y) * img.w + x) * 3 + c] = to_u8(img.at(c, y, x));
  for (int64_t y = 0; y < img.h; ++y)
    rows[static_cast<size_t>(y)] = buf.data() + static_cast<size_t>(y) * img.w * 3;
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw DataError("unsupported ppm magic '" + magic + "' in " + path);
  auto next_int = [&]() {
    int c = f.get();
    while (c == '#' || std::isspace(c)) {
      if (c == '#')
        while (c != '\n' && c != EOF) c = f.get();
      c = f.get();
    }
    int64_t v = 0;
    bool any = false;
    while (std::isdigit(c)) {
      v = v * 10 + (c - '0');
      any = true;
      c = f.get();
    }
    if (!any) throw DataError("malformed ppm header in " + path);
    return v;
  };
  const int64_t w = next_int();
  const int64_t h = next_int();
  const int64_t maxv = next_int();
  if (maxv != 255) throw DataError("ppm must be 8-bit (maxval 255) in " + path);
  std::vector<uint8_t> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("truncated ppm " + path);
  Image img;
  img.h = h;
  img.w = w;
  img.px.resize(static_cast<size_t>(3) * h * w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        img.at(c, y, x) = buf[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

void save_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write image " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<uint8_t> buf(static_cast<size_t>(img.h) * img.w * 3);
  for (int64_t y = 0; y < img.h; ++y)
    for (int64_t x = 0; x < img.w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        buf[(static_cast<size_t>(y) * img.w + x) * 3 + c] = to_u8(img.at(c, y, x));
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("short write to " + path);
}

Image load_image(const std::string& path) {
  if (has_suffix(path, ".png")) return load_png(path);
  if (has_suffix(path, ".ppm")) return load_ppm(path);
  throw DataError("unsupported image extension: " + path);
}

void save_image(const std::string& path, const Image& img) {
  if (has_suffix(path, ".png")) return save_png(path, img);
  if (has_suffix(path, ".ppm")) return save_ppm(path, img);
  throw DataError("unsupported image extension: " + path);
}

Image resize_nearest(const Image& img, int64_t nh, int64_t nw) {
  Image out;
  out.h = nh;
  out.w = nw;
  out.px.resize(static_cast<size_t>(3) * nh * nw);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < nh; ++y) {
      const int64_t sy = std::min(img.h - 1, y * img.h / nh);
      for (int64_t x = 0; x < nw; ++x) {
        const int64_t sx = std::min(img.w - 1, x * img.w / nw);
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  return out;
}

Image pad_reflect_to_multiple(const Image& img, int64_t multiple) {
  const int64_t nh = (img.h + multiple - 1) / multiple * multiple;
  const int64_t nw = (img.w + multiple - 1) / multiple * multiple;
  if (nh == img.h && nw == img.w) return img;
  if (nh - img.h >= img.h || nw - img.w >= img.w)
    throw DataError("image too small to mirror-pad to a multiple of " + std::to_string(multiple));
  Image out;
  out.h = nh;
  out.w = nw;
  out.px.resize(static_cast<size_t>(3) * nh * nw);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < nh; ++y) {
      const int64_t sy = y < img.h ? y : 2 * img.h - 2 - y;
      for (int64_t x = 0; x < nw; ++x) {
        const int64_t sx = x < img.w ? x : 2 * img.w - 2 - x;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  return out;
}

Image crop(const Image& img, int64_t y0, int64_t x0, int64_t nh, int64_t nw) {
  if (y0 < 0 || x0 < 0 || y0 + nh > img.h || x0 + nw > img.w)
    throw DataError("crop window exceeds image extents");
  Image out;
  out.h = nh;
  out.w = nw;
  out.px.resize(static_cast<size_t>(3) * nh * nw);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < nh; ++y)
      for (int64_t x = 0; x < nw; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

}  // namespace uwm
