#include "chamtoy/model.hpp"

#include <cmath>

namespace chamtoy {

std::string to_string(NormStrategy s) {
  return s == NormStrategy::PreNorm ? "pre_norm" : "post_norm_reorder";
}

NormStrategy parse_norm_strategy(std::string_view s) {
  if (s == "pre_norm" || s == "prenorm" || s == "pre") {
    return NormStrategy::PreNorm;
  }
  if (s == "post_norm_reorder" || s == "postnorm" || s == "post" ||
      s == "swin") {
    return NormStrategy::PostNormReorder;
  }
  throw ConfigError("unknown norm strategy '" + std::string(s) + "'");
}

AttentionConfig ModelConfig::attention() const {
  AttentionConfig a;
  a.n_heads = n_heads;
  a.n_kv_heads = n_kv_heads;
  a.head_dim = head_dim();
  a.context_length = context_length;
  a.use_qk_norm = use_qk_norm;
  a.qk_norm_after_rope = qk_norm_after_rope;
  a.eps = eps;
  a.rope_base = rope_base;
  a.dropout_p = dropout_p;
  return a;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || n_kv_heads == 0 ||
      d_ff == 0 || context_length == 0) {
    fail("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head_dim must be even for rotary embeddings");
  if (n_heads % n_kv_heads != 0) fail("n_kv_heads must divide n_heads");
  if (text_vocab == 0 || image_vocab == 0) fail("vocabulary ranges must be non-empty");
  if (!(z_loss_coeff >= 0)) fail("z_loss_coeff must be >= 0");
  if (!(dropout_p >= 0 && dropout_p < 1)) fail("dropout_p must be in [0, 1)");
  // eps = 0 is allowed (exact unit-rms norms); an all-zero row then throws.
  if (!(eps >= 0)) fail("eps must be non-negative");
  if (!(rope_base > 0)) fail("rope_base must be positive");
}

void ModelConfig::to_kv(KvMap& kv) const {
  kv["model.d_model"] = std::to_string(d_model);
  kv["model.n_layers"] = std::to_string(n_layers);
  kv["model.n_heads"] = std::to_string(n_heads);
  kv["model.n_kv_heads"] = std::to_string(n_kv_heads);
  kv["model.d_ff"] = std::to_string(d_ff);
  kv["model.context_length"] = std::to_string(context_length);
  kv["model.text_vocab"] = std::to_string(text_vocab);
  kv["model.image_vocab"] = std::to_string(image_vocab);
  kv["model.n_special"] = std::to_string(n_special);
  kv["model.norm_strategy"] = to_string(norm_strategy);
  kv["model.use_qk_norm"] = use_qk_norm ? "true" : "false";
  kv["model.qk_norm_after_rope"] = qk_norm_after_rope ? "true" : "false";
  kv["model.tie_embeddings"] = tie_embeddings ? "true" : "false";
  kv["model.dropout_p"] = format_scalar(dropout_p);
  kv["model.z_loss_coeff"] = format_scalar(z_loss_coeff);
  kv["model.rope_base"] = format_scalar(rope_base);
  kv["model.eps"] = format_scalar(eps);
  kv["model.init_std"] = format_scalar(init_std);
}

bool ModelConfig::set(std::string_view key, std::string_view v) {
  if (key == "model.d_model") d_model = parse_size(key, v);
  else if (key == "model.n_layers") n_layers = parse_size(key, v);
  else if (key == "model.n_heads") n_heads = parse_size(key, v);
  else if (key == "model.n_kv_heads") n_kv_heads = parse_size(key, v);
  else if (key == "model.d_ff") d_ff = parse_size(key, v);
  else if (key == "model.context_length") context_length = parse_size(key, v);
  else if (key == "model.text_vocab") text_vocab = parse_size(key, v);
  else if (key == "model.image_vocab") image_vocab = parse_size(key, v);
  else if (key == "model.n_special") n_special = parse_size(key, v);
  else if (key == "model.norm_strategy") norm_strategy = parse_norm_strategy(v);
  else if (key == "model.use_qk_norm") use_qk_norm = parse_bool(key, v);
  else if (key == "model.qk_norm_after_rope") qk_norm_after_rope = parse_bool(key, v);
  else if (key == "model.tie_embeddings") tie_embeddings = parse_bool(key, v);
  else if (key == "model.dropout_p") dropout_p = static_cast<Scalar>(parse_scalar(key, v));
  else if (key == "model.z_loss_coeff") z_loss_coeff = static_cast<Scalar>(parse_scalar(key, v));
  else if (key == "model.rope_base") rope_base = static_cast<Scalar>(parse_scalar(key, v));
  else if (key == "model.eps") eps = static_cast<Scalar>(parse_scalar(key, v));
  else if (key == "model.init_std") init_std = static_cast<Scalar>(parse_scalar(key, v));
  else return false;
  return true;
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  KvMap ka, kb;
  a.to_kv(ka);
  b.to_kv(kb);
  return ka == kb;
}

namespace {

ModelConfig recipe_dims() {
  ModelConfig c;
  c.d_model = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.d_ff = 176;
  c.context_length = 64;
  return c;
}

}  // namespace

ModelConfig preset(std::string_view name) {
  ModelConfig c = recipe_dims();
  if (name == "7b-recipe") {
    c.use_qk_norm = true;
    c.dropout_p = 0.1;
    c.z_loss_coeff = 1e-5;
    c.norm_strategy = NormStrategy::PreNorm;
  } else if (name == "34b-recipe") {
    c.use_qk_norm = true;
    c.dropout_p = 0.0;
    c.z_loss_coeff = 1e-5;
    c.norm_strategy = NormStrategy::PostNormReorder;
    c.n_kv_heads = 2;
  } else if (name == "llama2-recipe") {
    c.use_qk_norm = false;
    c.dropout_p = 0.0;
    c.z_loss_coeff = 0.0;
    c.norm_strategy = NormStrategy::PreNorm;
  } else if (name == "toy") {
    c = with_toy_dims(c);
    c.use_qk_norm = true;
    c.z_loss_coeff = 1e-5;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

PresetReference preset_reference(std::string_view name) {
  PresetReference r;
  r.context_tokens = 4096;
  if (name == "7b-recipe") {
    r = {"7B", 4096, false, 8388608.0, 1e-4, 0.1, 1e-5, true};
  } else if (name == "34b-recipe") {
    r = {"34B", 4096, true, 12582912.0, 1e-4, 0.0, 1e-5, true};
  } else if (name == "llama2-recipe") {
    r = {"7B", 4096, false, 0.0, 3e-4, 0.0, 0.0, false};
  } else if (name == "toy") {
    r = {"toy", 64, true, 0.0, 0.0, 0.0, 1e-5, true};
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return r;
}

std::vector<std::string> preset_names() {
  return {"toy", "7b-recipe", "34b-recipe", "llama2-recipe"};
}

ModelConfig with_toy_dims(ModelConfig cfg) {
  const bool grouped = cfg.n_kv_heads < cfg.n_heads;
  cfg.d_model = 64;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.n_kv_heads = grouped ? 2 : 4;
  cfg.d_ff = 176;
  cfg.context_length = 64;
  return cfg;
}

// ---------------------------------------------------------------------------

Transformer::Transformer(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0x696e6974 /* "init" */));
  const std::size_t d = cfg_.d_model, hd = cfg_.head_dim();
  const std::size_t vocab = cfg_.vocab_size();
  const Scalar std0 = cfg_.init_std;
  const Scalar std_out =
      std0 / std::sqrt(static_cast<Scalar>(2 * cfg_.n_layers));
  tok_embeddings = Tensor::randn({vocab, d}, rng, std0, true);
  layers.resize(cfg_.n_layers);
  for (auto& l : layers) {
    l.attn_norm = Tensor::full({d}, 1, true);
    l.ffn_norm = Tensor::full({d}, 1, true);
    l.wq = Tensor::randn({d, cfg_.n_heads * hd}, rng, std0, true);
    l.wk = Tensor::randn({d, cfg_.n_kv_heads * hd}, rng, std0, true);
    l.wv = Tensor::randn({d, cfg_.n_kv_heads * hd}, rng, std0, true);
    l.wo = Tensor::randn({cfg_.n_heads * hd, d}, rng, std_out, true);
    l.w1 = Tensor::randn({d, cfg_.d_ff}, rng, std0, true);
    l.w3 = Tensor::randn({d, cfg_.d_ff}, rng, std0, true);
    l.w2 = Tensor::randn({cfg_.d_ff, d}, rng, std_out, true);
    l.q_norm = Tensor::full({cfg_.n_heads, hd}, 1, true);
    l.k_norm = Tensor::full({cfg_.n_kv_heads, hd}, 1, true);
  }
  final_norm = Tensor::full({d}, 1, true);
  output = cfg_.tie_embeddings ? Tensor::zeros({0, 0})
                               : Tensor::randn({d, vocab}, rng, std0, true);
}

void Transformer::set_config(const ModelConfig& cfg) {
  cfg.validate();
  if (cfg.d_model != cfg_.d_model || cfg.n_layers != cfg_.n_layers ||
      cfg.n_heads != cfg_.n_heads || cfg.n_kv_heads != cfg_.n_kv_heads ||
      cfg.d_ff != cfg_.d_ff || cfg.vocab_size() != cfg_.vocab_size() ||
      cfg.tie_embeddings != cfg_.tie_embeddings) {
    throw ConfigError("set_config cannot change model structure");
  }
  cfg_ = cfg;
}

std::vector<std::pair<std::string, Tensor>> Transformer::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_embeddings", tok_embeddings);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    const auto& l = layers[i];
    out.emplace_back(p + "attn_norm", l.attn_norm);
    out.emplace_back(p + "wq", l.wq);
    out.emplace_back(p + "wk", l.wk);
    out.emplace_back(p + "wv", l.wv);
    out.emplace_back(p + "wo", l.wo);
    out.emplace_back(p + "q_norm", l.q_norm);
    out.emplace_back(p + "k_norm", l.k_norm);
    out.emplace_back(p + "ffn_norm", l.ffn_norm);
    out.emplace_back(p + "w1", l.w1);
    out.emplace_back(p + "w3", l.w3);
    out.emplace_back(p + "w2", l.w2);
  }
  out.emplace_back("final_norm", final_norm);
  if (!cfg_.tie_embeddings) out.emplace_back("output", output);
  return out;
}

void Transformer::zero_grad() {
  for (auto& [name, t] : named_parameters()) t.zero_grad();
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------

Tensor block_forward(const Tensor& x, const LayerParams& p,
                     const ModelConfig& cfg, bool train, Rng* rng,
                     const BlockHooks& hooks) {
  if (x.rank() != 2 || x.shape()[1] != cfg.d_model) {
    throw ShapeError("block input must be [seq, " +
                     std::to_string(cfg.d_model) + "], got " +
                     shape_str(x.shape()));
  }
  auto norm = [&](const Tensor& t, const Tensor& gain) {
    return hooks.identity_norms ? t : rms_norm(t, gain, cfg.eps);
  };
  auto ffn = [&](const Tensor& t) {
    Tensor f = swiglu_ffn(t, p.w1, p.w2, p.w3);
    if (train && cfg.dropout_p > 0) {
      if (!rng) throw ConfigError("training-mode dropout needs an rng");
      f = dropout(f, cfg.dropout_p, train, *rng);
    }
    return f;
  };
  const AttentionConfig acfg = cfg.attention();
  const bool pre = cfg.norm_strategy == NormStrategy::PreNorm;
  const Tensor inc_attn =
      pre ? causal_gqa_attention(norm(x, p.attn_norm), p, acfg, train, rng)
          : norm(causal_gqa_attention(x, p, acfg, train, rng), p.attn_norm);
  const Tensor h = add(x, inc_attn);
  const Tensor inc_ffn = pre ? ffn(norm(h, p.ffn_norm)) : norm(ffn(h), p.ffn_norm);
  if (hooks.increments) *hooks.increments = {inc_attn, inc_ffn};
  return add(h, inc_ffn);
}

ForwardResult model_forward(const Transformer& model,
                            std::span<const TokenId> tokens, bool train,
                            Rng* rng, const BlockHooks& hooks) {
  const ModelConfig& cfg = model.config();
  if (tokens.empty()) throw ShapeError("model_forward on an empty sequence");
  if (tokens.size() > cfg.context_length) {
    throw ShapeError("sequence length " + std::to_string(tokens.size()) +
                     " exceeds context length " +
                     std::to_string(cfg.context_length));
  }
  Tensor x = embedding(model.tok_embeddings, tokens);
  for (const auto& layer : model.layers) {
    x = block_forward(x, layer, cfg, train, rng, hooks);
  }
  Tensor normed = rms_norm(x, model.final_norm, cfg.eps);
  Tensor head =
      cfg.tie_embeddings ? transpose(model.tok_embeddings) : model.output;
  return {matmul(normed, head), x};
}

}  // namespace chamtoy
