#ifndef CHAMTOY_OBJECTIVE_HPP_
#define CHAMTOY_OBJECTIVE_HPP_

#include <cstdint>
#include <span>

#include "chamtoy/tensor.hpp"

namespace chamtoy {

// One byte per position: 1 = contributes to the loss, 0 = masked out.
using LossMask = std::vector<std::uint8_t>;

// log(sum_i exp(x_i)) computed as m + log(sum_i exp(x_i - m)).
Scalar log_sum_exp(std::span<const Scalar> x);

// Mean negative log-likelihood (nats/token) over unmasked positions of
// logits:[seq, vocab]. An empty mask means every position counts.
Tensor cross_entropy_masked(const Tensor& logits,
                            std::span<const TokenId> targets,
                            std::span<const std::uint8_t> loss_mask = {});

// coeff * mean over unmasked positions of (log Z)^2.
Tensor z_loss(const Tensor& logits, Scalar coeff,
              std::span<const std::uint8_t> loss_mask = {});

struct LossBreakdown {
  double cross_entropy = 0;
  double z_loss = 0;
  double total = 0;
  std::size_t unmasked_token_count = 0;
  Tensor loss;  // differentiable total
};

LossBreakdown total_loss(const Tensor& logits, std::span<const TokenId> targets,
                         std::span<const std::uint8_t> loss_mask,
                         Scalar z_loss_coeff);

}  // namespace chamtoy

#endif  // CHAMTOY_OBJECTIVE_HPP_
