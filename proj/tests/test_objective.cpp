#include <cmath>

#include "chamtoy/objective.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace chamtoy;
using chamtoy::testing::grad_check;
using chamtoy::testing::uniform;

TEST_CASE("uniform logits give ln V") {
  const auto logits = Tensor::zeros({3, 4});
  const std::vector<TokenId> t{0, 1, 3};
  CHECK(cross_entropy_masked(logits, t).item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(cross_entropy_masked(logits, t).item() == doctest::Approx(1.386294).epsilon(1e-6));
}

TEST_CASE("saturated target logit drives the loss to zero") {
  const auto logits = Tensor::from_data({1, 3}, {30, 0, 0});
  CHECK(cross_entropy_masked(logits, std::vector<TokenId>{0}).item() < 1e-12);
}

TEST_CASE("z-loss values") {
  const auto z = z_loss(Tensor::zeros({1, 4}), 1e-5);
  CHECK(std::abs(z.item() - 1.92181e-5) < 1e-10);
  // Oracle: (ln 4)^2 / 1e5 computed independently of the log-sum-exp path.
  const double l4 = std::log(4.0);
  CHECK(z.item() == doctest::Approx(1e-5 * l4 * l4).epsilon(1e-14));
  const Scalar half = -std::log(2.0);
  CHECK(std::abs(z_loss(Tensor::from_data({1, 2}, {half, half}), 1e-5).item()) < 1e-20);
  Rng rng(1);
  CHECK(z_loss(uniform({3, 5}, rng, -4, 4, false), 0).item() == 0);
  CHECK_THROWS_AS(z_loss(Tensor::zeros({1, 2}), -1), DomainError);
}

TEST_CASE("log-sum-exp is stable") {
  const std::vector<Scalar> big{1000, 1000};
  CHECK(log_sum_exp(big) == doctest::Approx(1000 + std::log(2.0)).epsilon(1e-15));
  const std::vector<Scalar> small{-1000, -1000};
  CHECK(log_sum_exp(small) == doctest::Approx(-1000 + std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("total is the sum of its parts") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto logits = uniform({4, 6}, rng, -3, 3, false);
    std::vector<TokenId> t(4);
    for (auto& id : t) id = static_cast<TokenId>(rng.below(6));
    const LossMask mask{1, 0, 1, 1};
    const auto b = total_loss(logits, t, mask, 1e-3);
    CHECK(std::abs(b.total - (b.cross_entropy + b.z_loss)) < 1e-12);
    CHECK(b.loss.item() == doctest::Approx(b.total).epsilon(1e-14));
    CHECK(b.unmasked_token_count == 3);
    const auto plain = total_loss(logits, t, mask, 0);
    CHECK(plain.total == cross_entropy_masked(logits, t, mask).item());
  }
}

TEST_CASE("cross-entropy ignores per-position shifts while z-loss does not") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto logits = uniform({3, 5}, rng, -3, 3, false);
    auto shifted = Tensor::from_data({3, 5}, {logits.data().begin(), logits.data().end()});
    for (std::size_t r = 0; r < 3; ++r) {
      const double c = rng.uniform(-20, 20);
      for (std::size_t k = 0; k < 5; ++k) shifted.mutable_data()[r * 5 + k] += static_cast<Scalar>(c);
    }
    const std::vector<TokenId> t{1, 4, 0};
    CHECK(std::abs(cross_entropy_masked(logits, t).item() - cross_entropy_masked(shifted, t).item()) < 1e-10);
    // One row, one shift: z-loss moves strictly with |log Z|.
    const auto row = uniform({1, 5}, rng, -3, 3, false);
    const double lz = log_sum_exp(row.data());
    const double c = rng.uniform(0.1, 5) * (lz >= 0 ? 1 : -1);  // away from zero
    auto moved = Tensor::from_data({1, 5}, {row.data().begin(), row.data().end()});
    for (auto& v : moved.mutable_data()) v += static_cast<Scalar>(c);
    CHECK(z_loss(moved, 1e-5).item() > z_loss(row, 1e-5).item());
  }
}

TEST_CASE("masked positions get exactly zero gradient") {
  Rng rng(4);
  auto logits = uniform({5, 7}, rng, -2, 2);
  const std::vector<TokenId> t{1, 2, 3, 4, 5};
  const LossMask mask{0, 1, 0, 1, 1};
  total_loss(logits, t, mask, 1e-4).loss.backward();
  for (std::size_t r : {0, 2})
    for (std::size_t k = 0; k < 7; ++k) CHECK(logits.grad()[r * 7 + k] == 0.0);
  CHECK(logits.grad()[7] != 0.0);
  CHECK_THROWS_AS(cross_entropy_masked(logits, t, LossMask(5, 0)), DataError);
  CHECK_THROWS_AS(cross_entropy_masked(logits, t, LossMask(4, 1)), ShapeError);
  CHECK_THROWS_AS(cross_entropy_masked(logits, std::vector<TokenId>{1, 2, 3, 4, 7}), DataError);
}

TEST_CASE("loss gradients match finite differences") {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto logits = uniform({4, 6}, rng, -3, 3);
    std::vector<TokenId> t(4);
    for (auto& id : t) id = static_cast<TokenId>(rng.below(6));
    LossMask mask(4);
    for (auto& m : mask) m = rng.below(2);
    mask[seed % 4] = 1;
    worst = std::max(worst, grad_check({logits}, [&] { return total_loss(logits, t, mask, 1e-2).loss; }).max_rel_error);
    worst = std::max(worst, grad_check({logits}, [&] { return z_loss(logits, 0.5, mask); }).max_rel_error);
  }
  CHECK(worst < 1e-4);
}
