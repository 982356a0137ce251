#pragma once

#include <doctest.h>

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include "vlmpref/core.hpp"
#include "vlmpref/image.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("vlmpref_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::shared_ptr<const vlmpref::PngImage> solid_png(std::uint8_t r, std::uint8_t g, std::uint8_t b,
                                                          int size = 8) {
  return std::make_shared<const vlmpref::PngImage>(vlmpref::encode_png(vlmpref::RgbImage(size, size, {r, g, b})));
}

inline vlmpref::Segment segment(vlmpref::Vector state, double progress, std::int64_t step = 0) {
  vlmpref::Segment s;
  s.states = {std::move(state)};
  s.progress = progress;
  s.source_step = step;
  s.image = solid_png(static_cast<std::uint8_t>(step % 251), 10, 20);
  return s;
}

}  // namespace testing
