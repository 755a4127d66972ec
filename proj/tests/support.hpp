#ifndef CHAMTOY_TESTS_SUPPORT_HPP_
#define CHAMTOY_TESTS_SUPPORT_HPP_

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "chamtoy/model.hpp"
#include "chamtoy/tensor.hpp"

namespace chamtoy::testing {

// Worst per-leaf relative error between backward() and central differences:
// ||analytic - numeric|| / max(||analytic||, ||numeric||). A leaf whose
// gradient is below `zero_floor` in both forms counts as zero error when the
// absolute difference is below the floor too.
struct GradCheck {
  double max_rel_error = 0;
  std::size_t entries = 0;
};

GradCheck grad_check(const std::vector<Tensor>& leaves,
                     const std::function<Tensor()>& loss, double step = 1e-5,
                     double zero_floor = 1e-9);

// Random tensor with entries uniform in [lo, hi).
Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool rg = true);

// Straight-line evaluation of the whole model with plain loops and no shared
// code: embeddings, blocks, final norm, output head. Returns [seq, vocab].
std::vector<double> reference_logits(const Transformer& model,
                                     const std::vector<TokenId>& tokens);

// A scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Where the checked-in fixtures live (set by the build).
std::filesystem::path fixture(const std::string& name);

// Small random UTF-8 string of up to max_chars code points, surrogates
// excluded, all planes represented.
std::string random_utf8(Rng& rng, std::size_t max_chars);

}  // namespace chamtoy::testing

#endif  // CHAMTOY_TESTS_SUPPORT_HPP_
