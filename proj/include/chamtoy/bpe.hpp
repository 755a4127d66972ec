#ifndef CHAMTOY_BPE_HPP_
#define CHAMTOY_BPE_HPP_

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "chamtoy/common.hpp"

namespace chamtoy {

// Byte-level BPE. Ids 0..255 are raw bytes; merge r creates id 256 + r.
// Every byte string is encodable, so decode(encode(s)) == s.
class BpeModel {
 public:
  static constexpr std::size_t kByteAlphabet = 256;

  BpeModel() { rebuild(); }

  // Learns merges until the vocabulary reaches vocab_size or no adjacent
  // pair is left. The most frequent pair wins; ties go to the smaller
  // (left, right) id pair.
  static BpeModel train(std::span<const std::string> corpus,
                        std::size_t vocab_size);

  TokenIds encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t vocab_size() const { return kByteAlphabet + merges_.size(); }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const {
    return merges_;
  }
  const std::string& token_bytes(TokenId id) const;

  // One `rank left right` line per merge, ids in decimal.
  std::string serialize() const;
  static BpeModel parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path);

 private:
  void rebuild();

  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::map<std::pair<TokenId, TokenId>, std::size_t> rank_;
  std::vector<std::string> bytes_;
};

}  // namespace chamtoy

#endif  // CHAMTOY_BPE_HPP_
