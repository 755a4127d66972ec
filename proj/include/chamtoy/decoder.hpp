#ifndef CHAMTOY_DECODER_HPP_
#define CHAMTOY_DECODER_HPP_

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chamtoy/bpe.hpp"
#include "chamtoy/codebook.hpp"
#include "chamtoy/data.hpp"
#include "chamtoy/inference.hpp"
#include "chamtoy/kv_config.hpp"
#include "chamtoy/random.hpp"
#include "chamtoy/vocab.hpp"

namespace chamtoy {

enum class Modality { Unconstrained, TextOnly, ImageOnly };
enum class SamplingKind { Greedy, Temperature, TopP };

std::string to_string(Modality m);
Modality parse_modality(std::string_view s);  // any | text | image
std::string to_string(SamplingKind s);
SamplingKind parse_sampling(std::string_view s);  // greedy | temperature | top_p

struct Sampling {
  SamplingKind kind = SamplingKind::Greedy;
  double temperature = 1.0;
  double top_p = 1.0;

  void validate() const;
};

struct DecodePolicy {
  Modality modality = Modality::Unconstrained;
  Sampling sampling;
  // Sampling used inside image blocks when set; the default is `sampling`.
  std::optional<Sampling> image_sampling;
  std::size_t max_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const;
  void to_kv(KvMap& kv) const;  // `decode.*`
  bool set(std::string_view key, std::string_view value);
};

struct DecodeState {
  bool in_image = false;
  std::size_t remaining = 0;  // in [1, K] while in_image
  TokenIds emitted;
  std::size_t steps = 0;  // sampling calls
  bool finished = false;
};

// Vocabulary plus the fixed image block length.
struct DecodeSpace {
  MixedVocab vocab;
  std::size_t block_tokens = 0;  // K
};

// One byte per vocabulary id, 1 = may be sampled.
using LegalMask = std::vector<std::uint8_t>;

LegalMask legal_mask(const DecodeState& state, const DecodePolicy& policy,
                     const MixedVocab& vocab);
LegalMask image_only_mask(const MixedVocab& vocab);

// Samples from logits restricted to `mask`, consuming exactly one uniform
// draw. Throws DomainError when nothing is legal.
TokenId sample_token(std::span<const Scalar> logits, const LegalMask& mask,
                     const Sampling& sampling, Rng& rng);

struct StepOutput {
  TokenId token = 0;
  std::optional<TokenId> forced;  // EOI appended by the engine
};

// Masks, samples and advances the state machine.
StepOutput step(DecodeState& state, std::span<const Scalar> logits,
                const DecodePolicy& policy, const DecodeSpace& space, Rng& rng);

// Validates a prompt and returns the state it leaves the decoder in. A
// trailing open image block is allowed; anything else malformed throws.
DecodeState state_after_prompt(std::span<const TokenId> prompt,
                               const DecodeSpace& space);

enum class EventKind { Token, ImageBlockStart, ImageBlockEnd };

struct StreamEvent {
  EventKind kind = EventKind::Token;
  TokenId token = 0;
  bool forced = false;
  TokenIds block;                // ImageBlockEnd: the K codebook tokens
  std::optional<Image> image;    // ImageBlockEnd, when a codebook is given
};

struct ImageDecoder {
  const Codebook* codebook = nullptr;
  std::size_t side = 0;
};

// Feeds BOS and the prompt, then samples one token per step. Stops at EOS,
// after the first image in ImageOnly mode, or at max_tokens outside an image
// block. Returns the emitted tokens.
TokenIds generate_stream(TokenScorer& scorer, std::span<const TokenId> prompt,
                         const DecodePolicy& policy, const DecodeSpace& space,
                         const std::function<void(const StreamEvent&)>& on_event,
                         const ImageDecoder& images = {});

// Same contract; image blocks run in an inner loop with a precomputed mask.
TokenIds generate_fused(TokenScorer& scorer, std::span<const TokenId> prompt,
                        const DecodePolicy& policy, const DecodeSpace& space);

// Checks that BOI and EOI alternate and every block holds exactly K image
// tokens; an unterminated trailing block is an error.
void check_block_discipline(std::span<const TokenId> tokens,
                            const DecodeSpace& space);

struct Segment {
  enum class Kind { Text, Image } kind = Kind::Text;
  std::string text;
  Image image;
};

// Splits on BOI/EOI; BOS, EOS, PAD and SEP are dropped.
std::vector<Segment> detokenize_mixed(std::span<const TokenId> tokens,
                                      const MixedTokenizer& tok);
TokenIds tokenize_document(std::span<const Segment> doc, const MixedTokenizer& tok);

// segment-NNN.txt / segment-NNN.pgm|ppm plus manifest.json in segment order.
void write_document(const std::filesystem::path& dir,
                    std::span<const Segment> doc);

}  // namespace chamtoy

#endif  // CHAMTOY_DECODER_HPP_
