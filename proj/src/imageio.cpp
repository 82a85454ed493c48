#include "mamo/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace mamo {

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, const std::uint8_t* data, std::size_t bytes,
                  std::size_t width, std::size_t height) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const std::vector<float>& rgb, std::size_t width,
               std::size_t height) {
  if (rgb.size() != width * height * 3) throw std::invalid_argument("write_ppm: buffer size mismatch");
  std::vector<std::uint8_t> bytes(rgb.size());
  std::transform(rgb.begin(), rgb.end(), bytes.begin(), quantize);
  write_netpbm(path, "P6", bytes.data(), bytes.size(), width, height);
}

void write_ppm8(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, std::size_t width,
                std::size_t height) {
  if (rgb.size() != width * height * 3) throw std::invalid_argument("write_ppm8: buffer size mismatch");
  write_netpbm(path, "P6", rgb.data(), rgb.size(), width, height);
}

void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& gray, std::size_t width,
               std::size_t height) {
  if (gray.size() != width * height) throw std::invalid_argument("write_pgm: buffer size mismatch");
  write_netpbm(path, "P5", gray.data(), gray.size(), width, height);
}

Image8 read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Image8 img;
  const std::string magic = next_token(in);
  if (magic == "P5") img.channels = 1;
  else if (magic == "P6") img.channels = 3;
  else throw std::runtime_error(path.string() + ": unsupported netpbm magic '" + magic + "'");
  img.width = std::stoul(next_token(in));
  img.height = std::stoul(next_token(in));
  if (std::stoul(next_token(in)) != 255) throw std::runtime_error(path.string() + ": maxval must be 255");
  in.get();  // single whitespace before the raster
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw std::runtime_error(path.string() + ": truncated raster");
  return img;
}

}  // namespace mamo
