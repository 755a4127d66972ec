#include "chamtoy/vocab.hpp"

namespace chamtoy {

std::string_view to_string(SpecialToken t) {
  switch (t) {
    case SpecialToken::BOS: return "BOS";
    case SpecialToken::EOS: return "EOS";
    case SpecialToken::PAD: return "PAD";
    case SpecialToken::SEP: return "SEP";
    case SpecialToken::BOI: return "BOI";
    case SpecialToken::EOI: return "EOI";
  }
  return "?";
}

MixedVocab::MixedVocab(std::size_t text_size, std::size_t image_size)
    : text_size_(text_size), image_size_(image_size) {
  if (text_size == 0 || image_size == 0) {
    throw ConfigError("text and image vocabularies must be non-empty");
  }
}

TokenKind MixedVocab::classify(TokenId id) const {
  if (id >= total_size()) {
    throw DataError("token id " + std::to_string(id) +
                    " outside vocabulary of " + std::to_string(total_size()));
  }
  if (id < image_begin()) return {TokenClass::Text, SpecialToken::BOS};
  if (id < image_end()) return {TokenClass::Image, SpecialToken::BOS};
  return {TokenClass::Special, static_cast<SpecialToken>(id - image_end())};
}

TokenId MixedVocab::image_token(std::size_t code) const {
  if (code >= image_size_) {
    throw DataError("codebook index " + std::to_string(code) + " out of range");
  }
  return image_begin() + static_cast<TokenId>(code);
}

std::size_t MixedVocab::image_code(TokenId id) const {
  if (!is_image(id)) {
    throw DataError("token " + std::to_string(id) + " is not an image token");
  }
  return id - image_begin();
}

}  // namespace chamtoy
