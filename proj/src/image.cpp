#include "vlmpref/image.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "vlmpref/error.hpp"

namespace vlmpref {

RgbImage::RgbImage(int w, int h, Color fill) : width(w), height(h) {
  if (w <= 0 || h <= 0) throw Error("invalid image size");
  pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < pixels.size(); i += 3) {
    pixels[i] = fill[0];
    pixels[i + 1] = fill[1];
    pixels[i + 2] = fill[2];
  }
}

Color RgbImage::at(int x, int y) const {
  const auto o = (static_cast<std::size_t>(y) * width + x) * 3;
  return {pixels[o], pixels[o + 1], pixels[o + 2]};
}

void RgbImage::set(int x, int y, Color c) {
  const auto o = (static_cast<std::size_t>(y) * width + x) * 3;
  pixels[o] = c[0];
  pixels[o + 1] = c[1];
  pixels[o + 2] = c[2];
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

std::uint32_t get_u32(std::string_view s, std::size_t at) {
  auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])); };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

void put_chunk(std::string& out, const char type[4], const std::string& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

constexpr std::string_view kPngSignature{"\x89PNG\r\n\x1a\n", 8};

}  // namespace

PngImage encode_png(const RgbImage& image) {
  const std::size_t stride = static_cast<std::size_t>(image.width) * 3;
  std::string raw;
  raw.reserve((stride + 1) * image.height);
  for (int y = 0; y < image.height; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(image.pixels.data() + y * stride), stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw Error("png compression failed");
  }
  compressed.resize(bound);

  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(image.width));
  put_u32(ihdr, static_cast<std::uint32_t>(image.height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit RGB, no interlace

  PngImage png;
  png.width = image.width;
  png.height = image.height;
  png.bytes = std::string(kPngSignature);
  put_chunk(png.bytes, "IHDR", ihdr);
  put_chunk(png.bytes, "IDAT", compressed);
  put_chunk(png.bytes, "IEND", "");
  png.sha256 = sha256_hex(png.bytes);
  return png;
}

RgbImage decode_png(const PngImage& png) {
  std::string_view s = png.bytes;
  if (s.substr(0, 8) != kPngSignature) throw Error("not a png");
  std::size_t pos = 8;
  int width = 0, height = 0;
  std::string idat;
  while (pos + 8 <= s.size()) {
    const auto len = get_u32(s, pos);
    const auto type = s.substr(pos + 4, 4);
    const auto data = s.substr(pos + 8, len);
    if (type == "IHDR") {
      width = static_cast<int>(get_u32(data, 0));
      height = static_cast<int>(get_u32(data, 4));
      if (data[8] != 8 || data[9] != 2 || data[12] != 0) throw Error("unsupported png format");
    } else if (type == "IDAT") {
      idat += data;
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  const std::size_t stride = static_cast<std::size_t>(width) * 3;
  std::string raw((stride + 1) * height, '\0');
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(reinterpret_cast<Bytef*>(raw.data()), &raw_len,
                 reinterpret_cast<const Bytef*>(idat.data()), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size()) {
    throw Error("png decompression failed");
  }

  RgbImage out(width, height);
  std::vector<std::uint8_t> prev(stride, 0);
  for (int y = 0; y < height; ++y) {
    const auto filter = static_cast<std::uint8_t>(raw[y * (stride + 1)]);
    auto* row = reinterpret_cast<std::uint8_t*>(raw.data()) + y * (stride + 1) + 1;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= 3 ? row[i - 3] : 0;
      const int b = prev[i];
      const int c = i >= 3 ? prev[i - 3] : 0;
      int pred = 0;
      switch (filter) {
        case 0: pred = 0; break;
        case 1: pred = a; break;
        case 2: pred = b; break;
        case 3: pred = (a + b) / 2; break;
        case 4: {
          const int p = a + b - c;
          const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default: throw Error("invalid png filter");
      }
      row[i] = static_cast<std::uint8_t>(row[i] + pred);
    }
    std::copy(row, row + stride, out.pixels.begin() + static_cast<std::ptrdiff_t>(y * stride));
    std::copy(row, row + stride, prev.begin());
  }
  return out;
}

PngImage load_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  PngImage png;
  png.bytes = ss.str();
  if (png.bytes.size() < 24 || std::string_view(png.bytes).substr(0, 8) != kPngSignature) {
    throw Error("not a png: " + path.string());
  }
  png.width = static_cast<int>(get_u32(png.bytes, 16));
  png.height = static_cast<int>(get_u32(png.bytes, 20));
  png.sha256 = sha256_hex(png.bytes);
  return png;
}

void save_png(const PngImage& png, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write image " + path.string());
  out.write(png.bytes.data(), static_cast<std::streamsize>(png.bytes.size()));
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string base64_encode(std::string_view data) {
  std::string out(4 * ((data.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(data.data()),
                                static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Canvas::Canvas(int width, int height, Color background) : image_(width, height, background) {}

void Canvas::fill_rect(double x0, double y0, double x1, double y1, Color c) {
  const int i0 = std::max(0, static_cast<int>(std::ceil(std::min(x0, x1) - 0.5)));
  const int i1 = std::min(image_.width - 1, static_cast<int>(std::floor(std::max(x0, x1) - 0.5)));
  const int j0 = std::max(0, static_cast<int>(std::ceil(std::min(y0, y1) - 0.5)));
  const int j1 = std::min(image_.height - 1, static_cast<int>(std::floor(std::max(y0, y1) - 0.5)));
  for (int j = j0; j <= j1; ++j)
    for (int i = i0; i <= i1; ++i) image_.set(i, j, c);
}

void Canvas::fill_disc(double cx, double cy, double radius, Color c) {
  const int i0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
  const int i1 = std::min(image_.width - 1, static_cast<int>(std::ceil(cx + radius)));
  const int j0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
  const int j1 = std::min(image_.height - 1, static_cast<int>(std::ceil(cy + radius)));
  const double r2 = radius * radius;
  for (int j = j0; j <= j1; ++j) {
    for (int i = i0; i <= i1; ++i) {
      const double dx = i + 0.5 - cx, dy = j + 0.5 - cy;
      if (dx * dx + dy * dy <= r2) image_.set(i, j, c);
    }
  }
}

void Canvas::draw_line(double x0, double y0, double x1, double y1, double half_width, Color c) {
  const int i0 = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - half_width)));
  const int i1 = std::min(image_.width - 1, static_cast<int>(std::ceil(std::max(x0, x1) + half_width)));
  const int j0 = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - half_width)));
  const int j1 = std::min(image_.height - 1, static_cast<int>(std::ceil(std::max(y0, y1) + half_width)));
  const double dx = x1 - x0, dy = y1 - y0;
  const double len2 = dx * dx + dy * dy;
  const double hw2 = half_width * half_width;
  for (int j = j0; j <= j1; ++j) {
    for (int i = i0; i <= i1; ++i) {
      const double px = i + 0.5 - x0, py = j + 0.5 - y0;
      double t = len2 > 0 ? (px * dx + py * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ex = px - t * dx, ey = py - t * dy;
      if (ex * ex + ey * ey <= hw2) image_.set(i, j, c);
    }
  }
}

}  // namespace vlmpref
