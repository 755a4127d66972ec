#ifndef CHAMTOY_MODEL_HPP_
#define CHAMTOY_MODEL_HPP_

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "chamtoy/kv_config.hpp"
#include "chamtoy/layers.hpp"

namespace chamtoy {

enum class NormStrategy {
  // h = x + attn(attn_norm(x)); out = h + ffn(ffn_norm(h))
  PreNorm,
  // h = x + attn_norm(attn(x)); out = h + ffn_norm(ffn(h))
  PostNormReorder,
};

std::string to_string(NormStrategy s);
NormStrategy parse_norm_strategy(std::string_view s);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 4;
  std::size_t d_ff = 176;
  std::size_t context_length = 64;
  std::size_t text_vocab = 256;
  std::size_t image_vocab = 256;
  std::size_t n_special = 6;
  NormStrategy norm_strategy = NormStrategy::PreNorm;
  bool use_qk_norm = false;
  bool qk_norm_after_rope = false;
  bool tie_embeddings = false;
  Scalar dropout_p = 0;
  Scalar z_loss_coeff = 0;
  Scalar rope_base = 10000;
  Scalar eps = 1e-5;
  Scalar init_std = 0.02;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t vocab_size() const { return text_vocab + image_vocab + n_special; }
  AttentionConfig attention() const;
  // Throws ConfigError on any broken invariant.
  void validate() const;

  // `model.*` keys.
  void to_kv(KvMap& kv) const;
  // Returns false when the key is not a model key.
  bool set(std::string_view key, std::string_view value);
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

// Reference values of the full-size recipe a preset mirrors. Documentation
// only; nothing trains at these sizes.
struct PresetReference {
  std::string params;
  std::size_t context_tokens = 0;
  bool grouped_query = false;
  double batch_tokens = 0;
  double peak_lr = 0;
  double dropout = 0;
  double z_loss = 0;
  bool qk_norm = false;
};

// "toy", "7b-recipe", "34b-recipe", "llama2-recipe".
ModelConfig preset(std::string_view name);
PresetReference preset_reference(std::string_view name);
std::vector<std::string> preset_names();
// Shrinks the dimensions to the smallest supported toy size, keeping switches.
ModelConfig with_toy_dims(ModelConfig cfg);

struct BlockHooks {
  // Replace every norm in the block with the identity (structural tests).
  bool identity_norms = false;
  // When set, receives the two residual increments (attention, then FFN).
  std::vector<Tensor>* increments = nullptr;
};

class Transformer {
 public:
  Transformer(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  // Changes non-structural switches (dropout, z-loss, qk-norm flags...).
  // Dimensions must be unchanged.
  void set_config(const ModelConfig& cfg);

  Tensor tok_embeddings;  // [vocab, d]
  std::vector<LayerParams> layers;
  Tensor final_norm;  // [d]
  Tensor output;      // [d, vocab]; unused when embeddings are tied

  // Stable order; names are the checkpoint manifest names.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  void zero_grad();
  std::size_t parameter_count() const;

 private:
  ModelConfig cfg_;
};

Tensor block_forward(const Tensor& x, const LayerParams& params,
                     const ModelConfig& cfg, bool train, Rng* rng,
                     const BlockHooks& hooks = {});

struct ForwardResult {
  Tensor logits;             // [seq, vocab]
  Tensor last_layer_output;  // [seq, d_model], before the final norm
};

ForwardResult model_forward(const Transformer& model,
                            std::span<const TokenId> tokens, bool train,
                            Rng* rng, const BlockHooks& hooks = {});

}  // namespace chamtoy

#endif  // CHAMTOY_MODEL_HPP_
