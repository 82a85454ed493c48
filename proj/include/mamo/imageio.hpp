#pragma once

// Binary netpbm (P5 / P6) writers and readers.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace mamo {

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 for PGM, 3 for PPM
  std::vector<std::uint8_t> pixels;
};

std::uint8_t quantize(float v);

// rgb: [height, width, 3] floats in [0, 1].
void write_ppm(const std::filesystem::path& path, const std::vector<float>& rgb, std::size_t width,
               std::size_t height);
void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& gray, std::size_t width,
               std::size_t height);
void write_ppm8(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, std::size_t width,
                std::size_t height);

// Reads P5 or P6 with maxval 255.
Image8 read_netpbm(const std::filesystem::path& path);

}  // namespace mamo
