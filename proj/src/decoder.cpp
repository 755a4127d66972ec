#include "chamtoy/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace chamtoy {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::Unconstrained: return "any";
    case Modality::TextOnly: return "text";
    case Modality::ImageOnly: return "image";
  }
  return "?";
}

Modality parse_modality(std::string_view s) {
  if (s == "any") return Modality::Unconstrained;
  if (s == "text") return Modality::TextOnly;
  if (s == "image") return Modality::ImageOnly;
  throw ConfigError("unknown modality '" + std::string(s) +
                    "' (expected any, text or image)");
}

std::string to_string(SamplingKind s) {
  switch (s) {
    case SamplingKind::Greedy: return "greedy";
    case SamplingKind::Temperature: return "temperature";
    case SamplingKind::TopP: return "top_p";
  }
  return "?";
}

SamplingKind parse_sampling(std::string_view s) {
  if (s == "greedy") return SamplingKind::Greedy;
  if (s == "temperature") return SamplingKind::Temperature;
  if (s == "top_p") return SamplingKind::TopP;
  throw ConfigError("unknown sampling '" + std::string(s) +
                    "' (expected greedy, temperature or top_p)");
}

void Sampling::validate() const {
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be positive");
  }
  if (!(top_p > 0 && top_p <= 1)) throw ConfigError("top_p must lie in (0, 1]");
}

void DecodePolicy::validate() const {
  sampling.validate();
  if (image_sampling) image_sampling->validate();
}

void DecodePolicy::to_kv(KvMap& kv) const {
  kv["decode.modality"] = to_string(modality);
  kv["decode.sampling"] = to_string(sampling.kind);
  kv["decode.temperature"] = format_scalar(sampling.temperature);
  kv["decode.top_p"] = format_scalar(sampling.top_p);
  kv["decode.max_tokens"] = std::to_string(max_tokens);
  kv["decode.seed"] = std::to_string(seed);
  kv["decode.image_sampling"] =
      image_sampling ? to_string(image_sampling->kind) : "none";
  if (image_sampling) {
    kv["decode.image_temperature"] = format_scalar(image_sampling->temperature);
    kv["decode.image_top_p"] = format_scalar(image_sampling->top_p);
  }
}

bool DecodePolicy::set(std::string_view key, std::string_view value) {
  auto image = [&]() -> Sampling& {
    if (!image_sampling) image_sampling = Sampling{};
    return *image_sampling;
  };
  if (key == "decode.modality") modality = parse_modality(value);
  else if (key == "decode.sampling") sampling.kind = parse_sampling(value);
  else if (key == "decode.temperature") sampling.temperature = parse_scalar(key, value);
  else if (key == "decode.top_p") sampling.top_p = parse_scalar(key, value);
  else if (key == "decode.max_tokens") max_tokens = parse_size(key, value);
  else if (key == "decode.seed") seed = parse_u64(key, value);
  else if (key == "decode.image_sampling") {
    if (value == "none") image_sampling.reset();
    else image().kind = parse_sampling(value);
  } else if (key == "decode.image_temperature") {
    image().temperature = parse_scalar(key, value);
  } else if (key == "decode.image_top_p") {
    image().top_p = parse_scalar(key, value);
  } else {
    return false;
  }
  return true;
}

LegalMask legal_mask(const DecodeState& state, const DecodePolicy& policy,
                     const MixedVocab& vocab) {
  LegalMask mask(vocab.total_size(), 0);
  if (state.in_image) return image_only_mask(vocab);
  if (policy.modality == Modality::ImageOnly) {
    mask[vocab.boi()] = 1;
    return mask;
  }
  std::fill(mask.begin(), mask.begin() + vocab.text_size(), 1);
  mask[vocab.eos()] = 1;
  if (policy.modality == Modality::Unconstrained) mask[vocab.boi()] = 1;
  return mask;
}

LegalMask image_only_mask(const MixedVocab& vocab) {
  LegalMask mask(vocab.total_size(), 0);
  std::fill(mask.begin() + vocab.image_begin(), mask.begin() + vocab.image_end(), 1);
  return mask;
}

TokenId sample_token(std::span<const Scalar> logits, const LegalMask& mask,
                     const Sampling& sampling, Rng& rng) {
  if (logits.size() != mask.size()) {
    throw ShapeError("logits length " + std::to_string(logits.size()) +
                     " does not match vocabulary size " +
                     std::to_string(mask.size()));
  }
  const double u = rng.uniform();
  std::vector<std::size_t> legal;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    if (std::isnan(logits[i])) throw DomainError("NaN logit at id " + std::to_string(i));
    legal.push_back(i);
  }
  if (legal.empty()) throw DomainError("every token is masked; nothing to sample");
  std::size_t best = legal.front();
  for (std::size_t i : legal) {
    if (logits[i] > logits[best]) best = i;
  }
  if (sampling.kind == SamplingKind::Greedy) return static_cast<TokenId>(best);

  const double mx = logits[best];
  std::vector<double> w(legal.size());
  for (std::size_t j = 0; j < legal.size(); ++j) {
    w[j] = std::exp((static_cast<double>(logits[legal[j]]) - mx) / sampling.temperature);
  }
  std::vector<std::size_t> order(legal.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (sampling.kind == SamplingKind::TopP) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    double acc = 0;
    std::size_t keep = 0;
    while (keep < order.size()) {
      acc += w[order[keep++]];
      if (acc >= sampling.top_p * total) break;
    }
    order.resize(keep);
  }
  double total = 0;
  for (std::size_t j : order) total += w[j];
  const double target = u * total;
  double acc = 0;
  for (std::size_t j : order) {
    acc += w[j];
    if (target < acc) return static_cast<TokenId>(legal[j]);
  }
  return static_cast<TokenId>(legal[order.back()]);
}

StepOutput step(DecodeState& state, std::span<const Scalar> logits,
                const DecodePolicy& policy, const DecodeSpace& space, Rng& rng) {
  if (space.block_tokens == 0) throw ConfigError("image block length must be positive");
  if (state.finished) throw DomainError("step on a finished decode");
  const LegalMask mask = legal_mask(state, policy, space.vocab);
  const Sampling& s = state.in_image && policy.image_sampling
                          ? *policy.image_sampling
                          : policy.sampling;
  StepOutput out;
  out.token = sample_token(logits, mask, s, rng);
  ++state.steps;
  state.emitted.push_back(out.token);
  if (state.in_image) {
    if (--state.remaining == 0) {
      out.forced = space.vocab.eoi();
      state.emitted.push_back(*out.forced);
      state.in_image = false;
      if (policy.modality == Modality::ImageOnly) state.finished = true;
    }
  } else if (out.token == space.vocab.boi()) {
    state.in_image = true;
    state.remaining = space.block_tokens;
  } else if (out.token == space.vocab.eos()) {
    state.finished = true;
  }
  return out;
}

DecodeState state_after_prompt(std::span<const TokenId> prompt,
                               const DecodeSpace& space) {
  const MixedVocab& v = space.vocab;
  const std::size_t k = space.block_tokens;
  if (k == 0) throw ConfigError("image block length must be positive");
  DecodeState st;
  std::size_t count = 0, start = 0;
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    const TokenId t = prompt[i];
    const auto at = " at prompt offset " + std::to_string(i);
    if (t >= v.total_size()) throw DataError("token " + std::to_string(t) + " out of range" + at);
    if (st.in_image) {
      if (t == v.eoi()) {
        if (count != k) {
          throw DataError("image block opened at prompt offset " +
                          std::to_string(start) + " has " + std::to_string(count) +
                          " tokens, expected " + std::to_string(k));
        }
        st.in_image = false;
      } else if (!v.is_image(t)) {
        throw DataError("non-image token" + at + " inside an image block");
      } else if (++count > k) {
        throw DataError("image block opened at prompt offset " +
                        std::to_string(start) + " exceeds " + std::to_string(k) +
                        " tokens");
      }
    } else if (t == v.boi()) {
      st.in_image = true;
      count = 0;
      start = i;
    } else if (t == v.eoi()) {
      throw DataError("EOI without BOI" + at);
    } else if (v.is_image(t)) {
      throw DataError("image token outside an image block" + at);
    }
  }
  if (st.in_image) {
    if (count == k) {
      throw DataError("prompt ends with a full image block missing its EOI");
    }
    st.remaining = k - count;
  }
  return st;
}

namespace {

struct Setup {
  DecodeState state;
  Rng rng;
  std::vector<Scalar> logits;
  TokenIds open_block;  // prompt's partial block
};

Setup start(TokenScorer& scorer, std::span<const TokenId> prompt,
            const DecodePolicy& policy, const DecodeSpace& space) {
  policy.validate();
  if (scorer.vocab_size() != space.vocab.total_size()) {
    throw ConfigError("scorer vocabulary does not match the decode vocabulary");
  }
  Setup s{state_after_prompt(prompt, space), Rng(policy.seed), {}, {}};
  if (s.state.in_image && policy.modality == Modality::TextOnly) {
    throw ConfigError("text-only decoding cannot continue an open image block");
  }
  if (s.state.in_image) {
    const std::size_t have = space.block_tokens - s.state.remaining;
    s.open_block.assign(prompt.end() - static_cast<std::ptrdiff_t>(have), prompt.end());
  }
  scorer.reset();
  s.logits = scorer.feed(space.vocab.bos());
  for (TokenId t : prompt) s.logits = scorer.feed(t);
  return s;
}

bool keep_going(const DecodeState& st, const DecodePolicy& policy) {
  return !st.finished && (st.in_image || st.emitted.size() < policy.max_tokens);
}

}  // namespace

TokenIds generate_stream(TokenScorer& scorer, std::span<const TokenId> prompt,
                         const DecodePolicy& policy, const DecodeSpace& space,
                         const std::function<void(const StreamEvent&)>& on_event,
                         const ImageDecoder& images) {
  Setup s = start(scorer, prompt, policy, space);
  auto emit = [&](StreamEvent e) {
    if (on_event) on_event(e);
  };
  TokenIds block = s.open_block;
  TokenIds pending;
  while (keep_going(s.state, policy)) {
    for (TokenId t : pending) s.logits = scorer.feed(t);
    pending.clear();
    const bool was_image = s.state.in_image;
    const StepOutput out = step(s.state, s.logits, policy, space, s.rng);
    emit({EventKind::Token, out.token, false, {}, {}});
    pending.push_back(out.token);
    if (was_image) block.push_back(out.token);
    if (!was_image && out.token == space.vocab.boi()) {
      block.clear();
      emit({EventKind::ImageBlockStart, out.token, false, {}, {}});
    }
    if (out.forced) {
      emit({EventKind::Token, *out.forced, true, {}, {}});
      StreamEvent end{EventKind::ImageBlockEnd, *out.forced, true, block, {}};
      if (images.codebook) {
        end.image = decode_image(block, *images.codebook, space.vocab,
                                 images.side, images.side);
      }
      emit(end);
      pending.push_back(*out.forced);
      block.clear();
    }
  }
  return s.state.emitted;
}

TokenIds generate_fused(TokenScorer& scorer, std::span<const TokenId> prompt,
                        const DecodePolicy& policy, const DecodeSpace& space) {
  Setup s = start(scorer, prompt, policy, space);
  const MixedVocab& v = space.vocab;
  const LegalMask image_mask = image_only_mask(v);
  const LegalMask text_mask = legal_mask(DecodeState{}, policy, v);
  const Sampling& image_sampling =
      policy.image_sampling ? *policy.image_sampling : policy.sampling;
  TokenIds out;
  bool in_image = s.state.in_image;
  std::size_t remaining = s.state.remaining;
  bool have_pending = false;
  TokenId pending = 0;
  auto advance = [&] {
    if (have_pending) s.logits = scorer.feed(pending);
  };
  for (;;) {
    if (in_image) {
      for (; remaining > 0; --remaining) {
        advance();
        pending = sample_token(s.logits, image_mask, image_sampling, s.rng);
        have_pending = true;
        out.push_back(pending);
      }
      advance();  // the block's last image token
      out.push_back(v.eoi());
      pending = v.eoi();
      in_image = false;
      if (policy.modality == Modality::ImageOnly) break;
      continue;
    }
    if (out.size() >= policy.max_tokens) break;
    advance();
    pending = sample_token(s.logits, text_mask, policy.sampling, s.rng);
    have_pending = true;
    out.push_back(pending);
    if (pending == v.eos()) break;
    if (pending == v.boi()) {
      in_image = true;
      remaining = space.block_tokens;
    }
  }
  return out;
}

void check_block_discipline(std::span<const TokenId> tokens,
                            const DecodeSpace& space) {
  validate_image_blocks(tokens, space.vocab, space.block_tokens);
}

std::vector<Segment> detokenize_mixed(std::span<const TokenId> tokens,
                                      const MixedTokenizer& tok) {
  const MixedVocab& v = tok.vocab;
  const std::size_t k = tok.geometry.tokens_per_image();
  std::vector<Segment> doc;
  TokenIds text, block;
  bool in_block = false;
  std::size_t start = 0;
  auto flush_text = [&] {
    if (text.empty()) return;
    Segment s;
    s.text = tok.bpe.decode(text);
    doc.push_back(std::move(s));
    text.clear();
  };
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    const TokenKind kind = v.classify(t);
    const auto at = " at offset " + std::to_string(i);
    if (in_block) {
      if (t == v.eoi()) {
        if (block.size() != k) {
          throw DataError("image block opened at offset " + std::to_string(start) +
                          " has " + std::to_string(block.size()) +
                          " tokens, expected " + std::to_string(k));
        }
        Segment s;
        s.kind = Segment::Kind::Image;
        s.image = decode_image(block, tok.codebook, v, tok.geometry.side,
                               tok.geometry.side);
        doc.push_back(std::move(s));
        in_block = false;
      } else if (kind.cls != TokenClass::Image) {
        throw DataError("image block opened at offset " + std::to_string(start) +
                        " is interrupted" + at);
      } else {
        block.push_back(t);
      }
      continue;
    }
    if (t == v.boi()) {
      flush_text();
      in_block = true;
      block.clear();
      start = i;
    } else if (t == v.eoi()) {
      throw DataError("EOI without BOI" + at);
    } else if (kind.cls == TokenClass::Image) {
      throw DataError("image token outside an image block" + at);
    } else if (kind.cls == TokenClass::Text) {
      text.push_back(t);
    }
  }
  if (in_block) {
    throw DataError("image block opened at offset " + std::to_string(start) +
                    " is never closed");
  }
  flush_text();
  return doc;
}

TokenIds tokenize_document(std::span<const Segment> doc, const MixedTokenizer& tok) {
  TokenIds out;
  for (const auto& s : doc) {
    const TokenIds part = s.kind == Segment::Kind::Text
                              ? tok.encode_text(s.text)
                              : image_block(tok.encode_picture(s.image), tok.vocab);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

void write_document(const std::filesystem::path& dir,
                    std::span<const Segment> doc) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["segments"] = nlohmann::json::array();
  for (std::size_t i = 0; i < doc.size(); ++i) {
    char name[32];
    const bool text = doc[i].kind == Segment::Kind::Text;
    std::snprintf(name, sizeof name, "segment-%03zu.%s", i,
                  text ? "txt" : (doc[i].image.channels == 1 ? "pgm" : "ppm"));
    if (text) {
      std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot write " + (dir / name).string());
      out << doc[i].text;
    } else {
      write_pnm(dir / name, doc[i].image);
    }
    manifest["segments"].push_back(
        {{"index", i}, {"kind", text ? "text" : "image"}, {"file", name}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write manifest under " + dir.string());
  out << manifest.dump(2) << "\n";
}

}  // namespace chamtoy
