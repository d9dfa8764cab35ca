// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mcvlm/errors.hpp"

namespace mcvlm {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// 8-bit RGB raster, row-major, interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, Rgb fill = {}) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) set(x, y, fill);
  }

  bool empty() const { return width <= 0 || height <= 0; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  std::size_t offset(int x, int y) const { return (static_cast<std::size_t>(y) * width + x) * 3; }
  Rgb at(int x, int y) const {
    auto o = offset(x, y);
    return {pixels[o], pixels[o + 1], pixels[o + 2]};
  }
  void set(int x, int y, Rgb c) {
    auto o = offset(x, y);
    pixels[o] = c.r;
    pixels[o + 1] = c.g;
    pixels[o + 2] = c.b;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary per-pixel membership; nonzero = member.
struct ConceptMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  ConceptMask() = default;
  ConceptMask(int w, int h, bool value = false)
      : width(w), height(h), bits(static_cast<std::size_t>(w) * h, value ? 1 : 0) {}

  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; })); }

  friend bool operator==(const ConceptMask&, const ConceptMask&) = default;
};

// ---------------------------------------------------------------------------
// Shapes

enum class ShapeKind { Circle, Square, Triangle, Diamond };

inline const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Diamond: return "diamond";
  }
  return "?";
}

inline ShapeKind shape_from_name(const std::string& s) {
  if (s == "circle") return ShapeKind::Circle;
  if (s == "square") return ShapeKind::Square;
  if (s == "triangle") return ShapeKind::Triangle;
  if (s == "diamond") return ShapeKind::Diamond;
  fail(ErrorKind::Input, "unknown shape '" + s + "'");
}

/// Pixel-center membership test for a shape of radius `r` centred at (cx, cy).
inline bool shape_contains(ShapeKind kind, double cx, double cy, double r, int x, int y) {
  const double dx = x + 0.5 - cx;
  const double dy = y + 0.5 - cy;
  switch (kind) {
    case ShapeKind::Circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::Diamond: return std::abs(dx) + std::abs(dy) <= r;
    case ShapeKind::Triangle: return dy <= 0.8 * r && dy >= -r && std::abs(dx) <= (dy + r) * 0.55;
  }
  return false;
}

/// Paints the shape and returns the exact mask of painted pixels.
inline ConceptMask draw_shape(Image& img, ShapeKind kind, Rgb color, double cx, double cy, double r) {
  ConceptMask mask(img.width, img.height);
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + r + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + r + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (shape_contains(kind, cx, cy, r, x, y)) {
        img.set(x, y, color);
        mask.set(x, y, true);
      }
  return mask;
}

// 3x5 digit font, one row per entry, MSB = leftmost column.
inline constexpr std::array<std::array<std::uint8_t, 5>, 10> kDigitFont = {{
    {0b111, 0b101, 0b101, 0b101, 0b111},
    {0b010, 0b110, 0b010, 0b010, 0b111},
    {0b111, 0b001, 0b111, 0b100, 0b111},
    {0b111, 0b001, 0b111, 0b001, 0b111},
    {0b101, 0b101, 0b111, 0b001, 0b001},
    {0b111, 0b100, 0b111, 0b001, 0b111},
    {0b111, 0b100, 0b111, 0b101, 0b111},
    {0b111, 0b001, 0b010, 0b010, 0b010},
    {0b111, 0b101, 0b111, 0b101, 0b111},
    {0b111, 0b101, 0b111, 0b001, 0b111},
}};

struct PixelBox {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive
  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

inline constexpr int kMarkRadius = 4;

/// Bounding box touched by `draw_mark` at (x, y), clipped to the image.
inline PixelBox mark_box(const Image& img, int x, int y, int number) {
  const int digits = number >= 10 ? 2 : 1;
  const int half_text = digits == 2 ? 4 : 2;
  const int reach = std::max(kMarkRadius, half_text);
  return {std::max(0, x - reach), std::max(0, y - kMarkRadius), std::min(img.width - 1, x + reach),
          std::min(img.height - 1, y + kMarkRadius)};
}

/// Filled white disc with a black numeral centred on (x, y).
inline void draw_mark(Image& img, int x, int y, int number) {
  const Rgb fill{255, 255, 255};
  const Rgb ink{0, 0, 0};
  for (int dy = -kMarkRadius; dy <= kMarkRadius; ++dy)
    for (int dx = -kMarkRadius; dx <= kMarkRadius; ++dx)
      if (dx * dx + dy * dy <= kMarkRadius * kMarkRadius && img.contains(x + dx, y + dy)) img.set(x + dx, y + dy, fill);
  const std::string text = std::to_string(number);
  const int total_w = static_cast<int>(text.size()) * 4 - 1;
  int left = x - total_w / 2;
  for (char ch : text) {
    const auto& glyph = kDigitFont[static_cast<std::size_t>(ch - '0')];
    for (int row = 0; row < 5; ++row)
      for (int col = 0; col < 3; ++col)
        if (glyph[static_cast<std::size_t>(row)] & (0b100 >> col)) {
          const int px = left + col, py = y - 2 + row;
          if (img.contains(px, py)) img.set(px, py, ink);
        }
    left += 4;
  }
}

// ---------------------------------------------------------------------------
// I/O

inline bool has_extension(const std::filesystem::path& p, const char* ext) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e == ext;
}

inline Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    fail(ErrorKind::Io, "cannot read PNG '" + path.string() + "': " + png.message);
  png.format = PNG_FORMAT_RGB;
  Image img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    fail(ErrorKind::Io, "cannot decode PNG '" + path.string() + "': " + msg);
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const std::uint8_t* data, int w, int h, bool gray) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, data, 0, nullptr))
    fail(ErrorKind::Io, "cannot write PNG '" + path.string() + "': " + png.message);
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  write_png(path, img.pixels.data(), img.width, img.height, false);
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) fail(ErrorKind::Io, "unsupported PPM '" + path.string() + "'");
  in.get();
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) fail(ErrorKind::Io, "truncated PPM '" + path.string() + "'");
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::Io, "no such image '" + path.string() + "'");
  if (has_extension(path, ".ppm")) return read_ppm(path);
  return read_png(path);
}

inline void write_image(const std::filesystem::path& path, const Image& img) {
  if (has_extension(path, ".ppm"))
    write_ppm(path, img);
  else
    write_png(path, img);
}

inline ConceptMask read_mask(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    fail(ErrorKind::Io, "cannot read mask '" + path.string() + "': " + png.message);
  png.format = PNG_FORMAT_GRAY;
  ConceptMask mask;
  mask.width = static_cast<int>(png.width);
  mask.height = static_cast<int>(png.height);
  std::vector<std::uint8_t> gray(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, gray.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    fail(ErrorKind::Io, "cannot decode mask '" + path.string() + "': " + msg);
  }
  mask.bits.resize(gray.size());
  std::transform(gray.begin(), gray.end(), mask.bits.begin(), [](std::uint8_t v) { return v != 0 ? 1 : 0; });
  return mask;
}

inline void write_mask(const std::filesystem::path& path, const ConceptMask& mask) {
  std::vector<std::uint8_t> gray(mask.bits.size());
  std::transform(mask.bits.begin(), mask.bits.end(), gray.begin(), [](std::uint8_t v) { return v ? 255 : 0; });
  write_png(path, gray.data(), mask.width, mask.height, true);
}

}  // namespace mcvlm
