#ifndef CHAMTOY_IMAGE_HPP_
#define CHAMTOY_IMAGE_HPP_

#include <filesystem>
#include <vector>

#include "chamtoy/common.hpp"

namespace chamtoy {

// Row-major, channel-interleaved pixels in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, double fill = 0.0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  double& at(std::size_t x, std::size_t y, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  double at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

// Portable graymap/pixmap: P5 for one channel, P6 for three; maxval 255.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& img);
std::vector<unsigned char> encode_pnm(const Image& img);
Image decode_pnm(const std::vector<unsigned char>& bytes);

// Nearest-neighbour resample.
Image resize_nearest(const Image& img, std::size_t width, std::size_t height);
// Crop the centred square, then resample to side x side.
Image center_crop_square(const Image& img, std::size_t side);
// Pad to a square with black borders, then resample to side x side.
Image letterbox_square(const Image& img, std::size_t side);

double image_mse(const Image& a, const Image& b);

}  // namespace chamtoy

#endif  // CHAMTOY_IMAGE_HPP_
