#include "chamtoy/codebook.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace chamtoy {

void ImageGeometry::validate() const {
  if (patch == 0 || side == 0 || side % patch != 0) {
    throw ConfigError("image side " + std::to_string(side) +
                      " must be a positive multiple of patch " +
                      std::to_string(patch));
  }
  if (channels != 1 && channels != 3) {
    throw ConfigError("images must have 1 or 3 channels");
  }
}

Codebook::Codebook(std::size_t size, std::size_t patch, std::size_t channels,
                   std::vector<double> vectors)
    : size_(size), patch_(patch), channels_(channels),
      vectors_(std::move(vectors)) {
  if (size == 0 || patch == 0 || channels == 0) {
    throw ConfigError("codebook dimensions must be positive");
  }
  if (vectors_.size() != size * patch_dim()) {
    throw ShapeError("codebook buffer has wrong length");
  }
  for (double v : vectors_) {
    if (std::isnan(v)) throw DataError("codebook contains NaN");
  }
}

std::size_t Codebook::nearest(std::span<const double> v) const {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const std::size_t dim = patch_dim();
  for (std::size_t c = 0; c < size_; ++c) {
    const double* e = vectors_.data() + c * dim;
    double d = 0;
    for (std::size_t t = 0; t < dim; ++t) {
      const double diff = v[t] - e[t];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i]))
         << (8 * i);
  }
  return v;
}

constexpr std::uint32_t kCodebookVersion = 1;

}  // namespace

void Codebook::save(const std::filesystem::path& path) const {
  std::string out = "CHCB";
  put_u32(out, kCodebookVersion);
  put_u32(out, static_cast<std::uint32_t>(size_));
  put_u32(out, static_cast<std::uint32_t>(patch_));
  put_u32(out, static_cast<std::uint32_t>(channels_));
  for (double v : vectors_) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Codebook Codebook::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  if (in.size() < 20 || in.compare(0, 4, "CHCB") != 0) {
    throw DataError(path.string() + ": not a codebook file");
  }
  if (get_u32(in, 4) != kCodebookVersion) {
    throw DataError(path.string() + ": codebook version mismatch");
  }
  const std::size_t size = get_u32(in, 8), patch = get_u32(in, 12),
                    channels = get_u32(in, 16);
  const std::size_t n = size * patch * patch * channels;
  if (in.size() != 20 + 8 * n) {
    throw DataError(path.string() + ": codebook length mismatch");
  }
  std::vector<double> vec(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(
                  static_cast<unsigned char>(in[20 + 8 * i + b]))
              << (8 * b);
    }
    std::memcpy(&vec[i], &bits, sizeof bits);
  }
  return Codebook(size, patch, channels, std::move(vec));
}

std::vector<std::vector<double>> extract_patches(const Image& img,
                                                 std::size_t patch) {
  if (patch == 0 || img.width % patch != 0 || img.height % patch != 0) {
    throw ShapeError("image " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) +
                     " is not divisible into patches of " +
                     std::to_string(patch));
  }
  std::vector<std::vector<double>> out;
  out.reserve((img.width / patch) * (img.height / patch));
  for (std::size_t gy = 0; gy < img.height / patch; ++gy) {
    for (std::size_t gx = 0; gx < img.width / patch; ++gx) {
      std::vector<double> v;
      v.reserve(patch * patch * img.channels);
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          for (std::size_t c = 0; c < img.channels; ++c) {
            v.push_back(img.at(gx * patch + x, gy * patch + y, c));
          }
        }
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

Codebook train_codebook(std::span<const Image> images, std::size_t size,
                        std::size_t patch, std::size_t iterations, Rng& rng,
                        CodebookReport* report) {
  if (images.empty()) throw DataError("codebook training corpus is empty");
  if (size == 0) throw ConfigError("codebook size must be positive");
  const std::size_t channels = images.front().channels;
  std::vector<std::vector<double>> patches;
  for (const auto& img : images) {
    if (img.channels != channels) {
      throw DataError("codebook corpus mixes channel counts");
    }
    auto p = extract_patches(img, patch);
    std::move(p.begin(), p.end(), std::back_inserter(patches));
  }
  const std::size_t dim = patch * patch * channels;

  auto distinct = patches;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  for (std::size_t i = distinct.size(); i > 1; --i) {
    std::swap(distinct[i - 1], distinct[rng.below(i)]);
  }
  CodebookReport local;
  local.distinct_patches = distinct.size();
  std::vector<double> centroids(size * dim);
  for (std::size_t c = 0; c < size; ++c) {
    const auto& src = distinct[c % distinct.size()];
    for (std::size_t t = 0; t < dim; ++t) {
      double v = src[t];
      if (c >= distinct.size()) {
        v = std::clamp(v + rng.uniform(-1e-3, 1e-3), 0.0, 1.0);
      }
      centroids[c * dim + t] = v;
    }
  }
  local.padded = size > distinct.size();

  std::vector<std::size_t> assign(patches.size());
  std::vector<double> sums(size * dim);  // per-cluster running means
  std::vector<std::size_t> counts(size);
  const double denom = static_cast<double>(patches.size() * dim);
  for (std::size_t it = 0; it < iterations; ++it) {
    Codebook cb(size, patch, channels, centroids);
    double err = 0;
    for (std::size_t i = 0; i < patches.size(); ++i) {
      assign[i] = cb.nearest(patches[i]);
      const auto e = cb.entry(assign[i]);
      for (std::size_t t = 0; t < dim; ++t) {
        const double d = patches[i][t] - e[t];
        err += d * d;
      }
    }
    local.mse_per_iteration.push_back(err / denom);
    // Running mean: exact when every member of a cluster is the same patch.
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < patches.size(); ++i) {
      const std::size_t c = assign[i];
      const double k = static_cast<double>(++counts[c]);
      for (std::size_t t = 0; t < dim; ++t) {
        sums[c * dim + t] += (patches[i][t] - sums[c * dim + t]) / k;
      }
    }
    for (std::size_t c = 0; c < size; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      std::copy_n(sums.begin() + c * dim, dim, centroids.begin() + c * dim);
    }
  }
  Codebook result(size, patch, channels, std::move(centroids));
  local.final_mse = quantization_mse(images, result);
  if (report) *report = std::move(local);
  return result;
}

double quantization_mse(std::span<const Image> images, const Codebook& cb) {
  double err = 0;
  std::size_t n = 0;
  for (const auto& img : images) {
    for (const auto& p : extract_patches(img, cb.patch())) {
      const auto e = cb.entry(cb.nearest(p));
      for (std::size_t t = 0; t < p.size(); ++t) {
        const double d = p[t] - e[t];
        err += d * d;
      }
      n += p.size();
    }
  }
  return n == 0 ? 0.0 : err / static_cast<double>(n);
}

std::vector<std::size_t> encode_image_codes(const Image& img,
                                            const Codebook& cb) {
  if (img.channels != cb.channels()) {
    throw ShapeError("image has " + std::to_string(img.channels) +
                     " channels, codebook expects " +
                     std::to_string(cb.channels()));
  }
  std::vector<std::size_t> codes;
  for (const auto& p : extract_patches(img, cb.patch())) {
    codes.push_back(cb.nearest(p));
  }
  return codes;
}

TokenIds encode_image(const Image& img, const Codebook& cb,
                      const MixedVocab& vocab) {
  if (vocab.image_size() != cb.size()) {
    throw ConfigError("vocabulary image range does not match codebook size");
  }
  TokenIds ids;
  for (std::size_t c : encode_image_codes(img, cb)) {
    ids.push_back(vocab.image_token(c));
  }
  return ids;
}

Image decode_image(std::span<const TokenId> tokens, const Codebook& cb,
                   const MixedVocab& vocab, std::size_t width,
                   std::size_t height) {
  const std::size_t p = cb.patch();
  if (width % p != 0 || height % p != 0) {
    throw ShapeError("output size not divisible by patch size");
  }
  const std::size_t gw = width / p, gh = height / p;
  if (tokens.size() != gw * gh) {
    throw DataError("image block has " + std::to_string(tokens.size()) +
                    " tokens, expected " + std::to_string(gw * gh));
  }
  Image img(width, height, cb.channels());
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (!vocab.is_image(tokens[k]) || vocab.image_code(tokens[k]) >= cb.size()) {
      throw DataError("token " + std::to_string(tokens[k]) + " at block offset " +
                      std::to_string(k) + " is not a codebook id");
    }
    const auto e = cb.entry(vocab.image_code(tokens[k]));
    const std::size_t gx = k % gw, gy = k / gw;
    std::size_t t = 0;
    for (std::size_t y = 0; y < p; ++y) {
      for (std::size_t x = 0; x < p; ++x) {
        for (std::size_t c = 0; c < cb.channels(); ++c) {
          img.at(gx * p + x, gy * p + y, c) = std::clamp(e[t++], 0.0, 1.0);
        }
      }
    }
  }
  return img;
}

}  // namespace chamtoy
