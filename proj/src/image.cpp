#include "chamtoy/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace chamtoy {

std::vector<unsigned char> encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw DataError("PNM supports 1 or 3 channels, got " +
                    std::to_string(img.channels));
  }
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") +
                             "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels.size());
  for (double v : img.pixels) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<unsigned char>(std::lround(c * 255.0)));
  }
  return out;
}

Image decode_pnm(const std::vector<unsigned char>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw DataError("malformed PNM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw DataError("only binary PNM (P5/P6) is supported");
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  const std::size_t w = read_int();
  const std::size_t h = read_int();
  const std::size_t maxval = read_int();
  if (maxval == 0 || maxval > 255) throw DataError("PNM maxval must be 1..255");
  ++pos;  // single whitespace before the raster
  if (bytes.size() < pos + w * h * channels) throw DataError("PNM raster truncated");
  Image img(w, h, channels);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<double>(bytes[pos + i]) /
                    static_cast<double>(maxval);
  }
  return img;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read image " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  try {
    return decode_pnm(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_pnm(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

Image resize_nearest(const Image& img, std::size_t width, std::size_t height) {
  if (img.width == 0 || img.height == 0) throw DataError("resize of empty image");
  Image out(width, height, img.channels);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * img.height / height;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = x * img.width / width;
      for (std::size_t c = 0; c < img.channels; ++c) {
        out.at(x, y, c) = img.at(sx, sy, c);
      }
    }
  }
  return out;
}

Image center_crop_square(const Image& img, std::size_t side) {
  const std::size_t s = std::min(img.width, img.height);
  const std::size_t x0 = (img.width - s) / 2, y0 = (img.height - s) / 2;
  Image crop(s, s, img.channels);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        crop.at(x, y, c) = img.at(x0 + x, y0 + y, c);
      }
    }
  }
  return resize_nearest(crop, side, side);
}

Image letterbox_square(const Image& img, std::size_t side) {
  const std::size_t s = std::max(img.width, img.height);
  const std::size_t x0 = (s - img.width) / 2, y0 = (s - img.height) / 2;
  Image padded(s, s, img.channels, 0.0);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        padded.at(x0 + x, y0 + y, c) = img.at(x, y, c);
      }
    }
  }
  return resize_nearest(padded, side, side);
}

double image_mse(const Image& a, const Image& b) {
  if (a.pixels.size() != b.pixels.size()) throw ShapeError("image size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    s += d * d;
  }
  return a.pixels.empty() ? 0.0 : s / static_cast<double>(a.pixels.size());
}

}  // namespace chamtoy
