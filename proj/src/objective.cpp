#include "chamtoy/objective.hpp"

#include <algorithm>
#include <cmath>

namespace chamtoy {

Scalar log_sum_exp(std::span<const Scalar> x) {
  const Scalar m = *std::max_element(x.begin(), x.end());
  Scalar s = 0;
  for (Scalar v : x) s += std::exp(v - m);
  return m + std::log(s);
}

namespace {

struct Rows {
  std::size_t seq = 0, vocab = 0, count = 0;
  std::vector<std::uint8_t> active;
};

Rows check_rows(const Tensor& logits, std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2) {
    throw ShapeError("logits must be [seq, vocab], got " +
                     shape_str(logits.shape()));
  }
  Rows r;
  r.seq = logits.shape()[0];
  r.vocab = logits.shape()[1];
  if (r.vocab == 0) throw ShapeError("empty vocabulary axis");
  if (!mask.empty() && mask.size() != r.seq) {
    throw ShapeError("loss mask length " + std::to_string(mask.size()) +
                     " does not match sequence length " +
                     std::to_string(r.seq));
  }
  r.active.assign(r.seq, 1);
  if (!mask.empty()) {
    for (std::size_t s = 0; s < r.seq; ++s) r.active[s] = mask[s] ? 1 : 0;
  }
  r.count = static_cast<std::size_t>(
      std::count(r.active.begin(), r.active.end(), std::uint8_t{1}));
  if (r.count == 0) throw DataError("every position of the sequence is masked");
  return r;
}

}  // namespace

Tensor cross_entropy_masked(const Tensor& logits,
                            std::span<const TokenId> targets,
                            std::span<const std::uint8_t> loss_mask) {
  Rows r = check_rows(logits, loss_mask);
  if (targets.size() != r.seq) throw ShapeError("targets length mismatch");
  const auto x = logits.data();
  std::vector<Scalar> lse(r.seq, 0);
  Scalar total = 0;
  for (std::size_t s = 0; s < r.seq; ++s) {
    if (!r.active[s]) continue;
    if (targets[s] >= r.vocab) {
      throw DataError("target id " + std::to_string(targets[s]) +
                      " outside vocabulary");
    }
    lse[s] = log_sum_exp(x.subspan(s * r.vocab, r.vocab));
    total += lse[s] - x[s * r.vocab + targets[s]];
  }
  const Scalar inv_count = Scalar{1} / static_cast<Scalar>(r.count);
  std::vector<TokenId> tg(targets.begin(), targets.end());
  return detail::make_result(
      {}, {total * inv_count}, {logits.node()}, "cross_entropy",
      [r = std::move(r), lse = std::move(lse), tg = std::move(tg),
       inv_count](Node& self) {
        Node& p = *self.parents[0];
        auto& g = p.ensure_grad();
        const Scalar scale = self.grad[0] * inv_count;
        for (std::size_t s = 0; s < r.seq; ++s) {
          if (!r.active[s]) continue;
          const Scalar* xr = p.data.data() + s * r.vocab;
          Scalar* gr = g.data() + s * r.vocab;
          for (std::size_t v = 0; v < r.vocab; ++v) {
            gr[v] += scale * std::exp(xr[v] - lse[s]);
          }
          gr[tg[s]] -= scale;
        }
      });
}

Tensor z_loss(const Tensor& logits, Scalar coeff,
              std::span<const std::uint8_t> loss_mask) {
  if (!(coeff >= 0)) throw DomainError("z-loss coefficient must be >= 0");
  Rows r = check_rows(logits, loss_mask);
  const auto x = logits.data();
  std::vector<Scalar> lse(r.seq, 0);
  Scalar total = 0;
  for (std::size_t s = 0; s < r.seq; ++s) {
    if (!r.active[s]) continue;
    lse[s] = log_sum_exp(x.subspan(s * r.vocab, r.vocab));
    total += lse[s] * lse[s];
  }
  const Scalar scale0 = coeff / static_cast<Scalar>(r.count);
  return detail::make_result(
      {}, {total * scale0}, {logits.node()}, "z_loss",
      [r = std::move(r), lse = std::move(lse), scale0](Node& self) {
        Node& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t s = 0; s < r.seq; ++s) {
          if (!r.active[s]) continue;
          const Scalar c = self.grad[0] * scale0 * 2 * lse[s];
          const Scalar* xr = p.data.data() + s * r.vocab;
          Scalar* gr = g.data() + s * r.vocab;
          for (std::size_t v = 0; v < r.vocab; ++v) {
            gr[v] += c * std::exp(xr[v] - lse[s]);
          }
        }
      });
}

LossBreakdown total_loss(const Tensor& logits, std::span<const TokenId> targets,
                         std::span<const std::uint8_t> loss_mask,
                         Scalar z_loss_coeff) {
  Tensor ce = cross_entropy_masked(logits, targets, loss_mask);
  Tensor zl = z_loss(logits, z_loss_coeff, loss_mask);
  LossBreakdown b;
  b.loss = add(ce, zl);
  b.cross_entropy = ce.item();
  b.z_loss = zl.item();
  b.total = b.loss.item();
  b.unmasked_token_count =
      loss_mask.empty()
          ? targets.size()
          : static_cast<std::size_t>(std::count_if(
                loss_mask.begin(), loss_mask.end(),
                [](std::uint8_t m) { return m != 0; }));
  return b;
}

}  // namespace chamtoy
