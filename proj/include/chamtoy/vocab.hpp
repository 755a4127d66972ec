#ifndef CHAMTOY_VOCAB_HPP_
#define CHAMTOY_VOCAB_HPP_

#include <array>
#include <cstdint>
#include <string_view>

#include "chamtoy/common.hpp"

namespace chamtoy {

enum class SpecialToken : std::uint8_t { BOS, EOS, PAD, SEP, BOI, EOI };
inline constexpr std::size_t kSpecialCount = 6;

std::string_view to_string(SpecialToken t);

enum class TokenClass : std::uint8_t { Text, Image, Special };

struct TokenKind {
  TokenClass cls = TokenClass::Text;
  SpecialToken special = SpecialToken::BOS;  // meaningful for Special only

  bool operator==(const TokenKind&) const = default;
};

// Token-id layout: [0, T) text, [T, T+C) image codebook, then the six
// special tokens in SpecialToken order.
class MixedVocab {
 public:
  MixedVocab(std::size_t text_size, std::size_t image_size);

  std::size_t text_size() const { return text_size_; }
  std::size_t image_size() const { return image_size_; }
  std::size_t total_size() const {
    return text_size_ + image_size_ + kSpecialCount;
  }

  TokenId image_begin() const { return static_cast<TokenId>(text_size_); }
  TokenId image_end() const {
    return static_cast<TokenId>(text_size_ + image_size_);
  }
  TokenId special(SpecialToken t) const {
    return image_end() + static_cast<TokenId>(t);
  }
  TokenId bos() const { return special(SpecialToken::BOS); }
  TokenId eos() const { return special(SpecialToken::EOS); }
  TokenId pad() const { return special(SpecialToken::PAD); }
  TokenId sep() const { return special(SpecialToken::SEP); }
  TokenId boi() const { return special(SpecialToken::BOI); }
  TokenId eoi() const { return special(SpecialToken::EOI); }

  // Throws DataError for ids >= total_size().
  TokenKind classify(TokenId id) const;
  bool is_text(TokenId id) const { return id < image_begin(); }
  bool is_image(TokenId id) const {
    return id >= image_begin() && id < image_end();
  }

  TokenId image_token(std::size_t code) const;
  std::size_t image_code(TokenId id) const;

 private:
  std::size_t text_size_;
  std::size_t image_size_;
};

}  // namespace chamtoy

#endif  // CHAMTOY_VOCAB_HPP_
