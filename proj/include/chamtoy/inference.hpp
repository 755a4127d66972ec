#ifndef CHAMTOY_INFERENCE_HPP_
#define CHAMTOY_INFERENCE_HPP_

#include <span>
#include <vector>

#include "chamtoy/model.hpp"

namespace chamtoy {

// Anything that turns a token history into next-token logits, one token at
// a time. The decoder only talks to this interface.
class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  // Consumes `token` at the next position and returns logits for the one after.
  virtual std::vector<Scalar> feed(TokenId token) = 0;
  virtual void reset() = 0;
};

// Incremental evaluation-mode forward pass with a per-layer key/value cache.
// Produces the same logits as model_forward on the full prefix.
class InferenceSession : public TokenScorer {
 public:
  explicit InferenceSession(const Transformer& model);

  std::size_t vocab_size() const override { return model_.config().vocab_size(); }
  std::vector<Scalar> feed(TokenId token) override;
  void reset() override;

  std::size_t position() const { return pos_; }
  // Feeds every token; returns the logits after the last one.
  std::vector<Scalar> prefill(std::span<const TokenId> tokens);

 private:
  std::vector<Scalar> block(std::size_t layer, std::span<const Scalar> x);
  std::vector<Scalar> attention(std::size_t layer, std::span<const Scalar> x);

  const Transformer& model_;
  std::size_t pos_ = 0;
  std::vector<std::vector<Scalar>> k_cache_;  // per layer: [pos, kv*hd]
  std::vector<std::vector<Scalar>> v_cache_;
};

// Pseudo-random logits determined by the token history, for exercising the
// decoder without a model.
class RandomLogitsScorer : public TokenScorer {
 public:
  RandomLogitsScorer(std::size_t vocab_size, std::uint64_t seed, double scale = 3.0);
  std::size_t vocab_size() const override { return vocab_; }
  std::vector<Scalar> feed(TokenId token) override;
  void reset() override;

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
  double scale_;
  std::uint64_t history_ = 0;
};

}  // namespace chamtoy

#endif  // CHAMTOY_INFERENCE_HPP_
