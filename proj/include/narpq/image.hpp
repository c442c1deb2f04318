#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "narpq/errors.hpp"
#include "narpq/numerics.hpp"

namespace narpq {

// RGB image, pixels in [0, 1], stored row-major as H x W x 3.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Scalar> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, Scalar fill = Scalar(0)) : height(h), width(w), pixels(h * w * 3, fill) {}

  Scalar& at(std::size_t r, std::size_t c, std::size_t ch) { return pixels[(r * width + c) * 3 + ch]; }
  Scalar at(std::size_t r, std::size_t c, std::size_t ch) const { return pixels[(r * width + c) * 3 + ch]; }

  void set(std::size_t r, std::size_t c, const std::array<Scalar, 3>& rgb) {
    for (std::size_t ch = 0; ch < 3; ++ch) at(r, c, ch) = rgb[ch];
  }

  bool in_range() const {
    for (auto v : pixels) {
      if (!(v >= Scalar(0) && v <= Scalar(1))) return false;
    }
    return true;
  }

  bool operator==(const Image&) const = default;
};

inline double mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) throw ArgumentError("mse: image sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(a.pixels.size());
}

// Binary PPM (P6, maxval 255). Each entry of `comments` becomes a "# ..." line
// in the header.
inline void write_ppm(const std::filesystem::path& path, const Image& img,
                      const std::vector<std::string>& comments = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "P6\n";
  for (const auto& c : comments) out << "# " << c << "\n";
  out << img.width << " " << img.height << "\n255\n";
  std::string bytes(img.pixels.size(), '\0');
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img.pixels[i]), 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P6") throw IoError("not a binary PPM: " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError("malformed PPM header: " + path.string());
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw IoError("unsupported PPM: " + path.string());
  Image img(h, w);
  std::string bytes(img.pixels.size(), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated PPM: " + path.string());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.pixels[i] = static_cast<Scalar>(static_cast<unsigned char>(bytes[i]) / static_cast<double>(maxval));
  }
  return img;
}

}  // namespace narpq
