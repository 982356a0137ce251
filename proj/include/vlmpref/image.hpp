#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vlmpref {

struct Resolution {
  int width = 128;
  int height = 128;

  friend bool operator==(const Resolution&, const Resolution&) = default;
};

using Color = std::array<std::uint8_t, 3>;

// Row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, Color fill = {255, 255, 255});

  [[nodiscard]] Resolution resolution() const { return {width, height}; }
  [[nodiscard]] Color at(int x, int y) const;
  void set(int x, int y, Color c);

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Lossless PNG bytes plus the dimensions and content hash.
struct PngImage {
  int width = 0;
  int height = 0;
  std::string bytes;
  std::string sha256;  // hex digest of bytes

  [[nodiscard]] Resolution resolution() const { return {width, height}; }
  friend bool operator==(const PngImage&, const PngImage&) = default;
};

PngImage encode_png(const RgbImage& image);
RgbImage decode_png(const PngImage& png);
// Reads a PNG file; dimensions come from the IHDR chunk.
PngImage load_png(const std::filesystem::path& path);
void save_png(const PngImage& png, const std::filesystem::path& path);

std::string sha256_hex(std::string_view data);
std::string base64_encode(std::string_view data);

// Minimal software rasterizer. Coordinates are in pixels; pixel (i, j)
// covers [i, i+1) x [j, j+1) and is sampled at its center.
class Canvas {
 public:
  Canvas(int width, int height, Color background);

  void fill_rect(double x0, double y0, double x1, double y1, Color c);
  void fill_disc(double cx, double cy, double radius, Color c);
  // Capsule of half-width `half_width` around the segment (x0,y0)-(x1,y1).
  void draw_line(double x0, double y0, double x1, double y1, double half_width, Color c);

  [[nodiscard]] const RgbImage& image() const { return image_; }
  [[nodiscard]] RgbImage take() && { return std::move(image_); }

 private:
  RgbImage image_;
};

}  // namespace vlmpref
