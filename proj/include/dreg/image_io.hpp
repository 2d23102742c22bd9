#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace dreg {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel, row 0 at the top

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), rgb(3u * static_cast<std::size_t>(w) * h, 0) {}
  void put(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

void write_png(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_png(const std::filesystem::path& path);

}  // namespace dreg
