#ifndef CHAMTOY_CODEBOOK_HPP_
#define CHAMTOY_CODEBOOK_HPP_

#include <filesystem>
#include <span>
#include <vector>

#include "chamtoy/image.hpp"
#include "chamtoy/random.hpp"
#include "chamtoy/vocab.hpp"

namespace chamtoy {

// Square image geometry shared by the tokenizer and the decoder.
struct ImageGeometry {
  std::size_t side = 32;
  std::size_t patch = 4;
  std::size_t channels = 1;

  std::size_t grid() const { return side / patch; }
  std::size_t tokens_per_image() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  void validate() const;
};

// Patch-wise vector quantizer: C vectors of p*p*channels values.
class Codebook {
 public:
  Codebook() = default;
  Codebook(std::size_t size, std::size_t patch, std::size_t channels,
           std::vector<double> vectors);

  std::size_t size() const { return size_; }
  std::size_t patch() const { return patch_; }
  std::size_t channels() const { return channels_; }
  std::size_t patch_dim() const { return patch_ * patch_ * channels_; }
  std::span<const double> entry(std::size_t i) const {
    return {vectors_.data() + i * patch_dim(), patch_dim()};
  }
  const std::vector<double>& vectors() const { return vectors_; }

  // Nearest entry by squared Euclidean distance; ties go to the lower index.
  std::size_t nearest(std::span<const double> v) const;

  // Binary: "CHCB", u32 version, u32 C, u32 p, u32 channels, then C*dim
  // little-endian f64 values, row-major.
  void save(const std::filesystem::path& path) const;
  static Codebook load(const std::filesystem::path& path);

 private:
  std::size_t size_ = 0;
  std::size_t patch_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> vectors_;
};

// Patches in row-major grid order, each flattened row-major within the patch.
std::vector<std::vector<double>> extract_patches(const Image& img,
                                                 std::size_t patch);

struct CodebookReport {
  std::vector<double> mse_per_iteration;  // after each assignment step
  double final_mse = 0;
  std::size_t distinct_patches = 0;
  bool padded = false;  // C exceeded the distinct patch count
};

// Lloyd's k-means over every p x p patch of the corpus. Initial centroids are
// C distinct patches chosen by rng; when fewer distinct patches exist the
// remainder are jittered copies and report->padded is set.
Codebook train_codebook(std::span<const Image> images, std::size_t size,
                        std::size_t patch, std::size_t iterations, Rng& rng,
                        CodebookReport* report = nullptr);

double quantization_mse(std::span<const Image> images, const Codebook& cb);

std::vector<std::size_t> encode_image_codes(const Image& img,
                                            const Codebook& cb);
// K = (H/p)*(W/p) ids in the image range of `vocab`.
TokenIds encode_image(const Image& img, const Codebook& cb,
                      const MixedVocab& vocab);
// Pastes codebook patches back in row-major order, clamped to [0, 1].
Image decode_image(std::span<const TokenId> tokens, const Codebook& cb,
                   const MixedVocab& vocab, std::size_t width,
                   std::size_t height);

}  // namespace chamtoy

#endif  // CHAMTOY_CODEBOOK_HPP_
