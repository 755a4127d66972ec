#include "chamtoy/bpe.hpp"

#include <fstream>
#include <sstream>

#include "chamtoy/kv_config.hpp"

namespace chamtoy {

namespace {

void merge_pair(TokenIds& seq, std::pair<TokenId, TokenId> pair,
                TokenId new_id) {
  std::size_t w = 0;
  for (std::size_t r = 0; r < seq.size();) {
    if (r + 1 < seq.size() && seq[r] == pair.first &&
        seq[r + 1] == pair.second) {
      seq[w++] = new_id;
      r += 2;
    } else {
      seq[w++] = seq[r++];
    }
  }
  seq.resize(w);
}

}  // namespace

BpeModel BpeModel::train(std::span<const std::string> corpus,
                         std::size_t vocab_size) {
  if (vocab_size < kByteAlphabet) {
    throw ConfigError("BPE vocabulary size " + std::to_string(vocab_size) +
                      " is below the byte alphabet (256)");
  }
  std::vector<TokenIds> docs;
  docs.reserve(corpus.size());
  for (const auto& s : corpus) {
    TokenIds d(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      d[i] = static_cast<unsigned char>(s[i]);
    }
    docs.push_back(std::move(d));
  }
  BpeModel model;
  while (model.vocab_size() < vocab_size) {
    std::map<std::pair<TokenId, TokenId>, std::size_t> counts;
    for (const auto& d : docs) {
      for (std::size_t i = 0; i + 1 < d.size(); ++i) ++counts[{d[i], d[i + 1]}];
    }
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      if (it->second > best->second) best = it;  // map order breaks ties
    }
    const TokenId id = static_cast<TokenId>(model.vocab_size());
    model.merges_.push_back(best->first);
    for (auto& d : docs) merge_pair(d, best->first, id);
  }
  model.rebuild();
  return model;
}

void BpeModel::rebuild() {
  rank_.clear();
  bytes_.assign(kByteAlphabet, std::string());
  for (std::size_t b = 0; b < kByteAlphabet; ++b) {
    bytes_[b] = std::string(1, static_cast<char>(b));
  }
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto [l, rt] = merges_[r];
    if (l >= bytes_.size() || rt >= bytes_.size()) {
      throw DataError("BPE merge " + std::to_string(r) +
                      " references an undefined symbol");
    }
    rank_.emplace(merges_[r], r);
    bytes_.push_back(bytes_[l] + bytes_[rt]);
  }
}

TokenIds BpeModel::encode(std::string_view text) const {
  TokenIds seq(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    seq[i] = static_cast<unsigned char>(text[i]);
  }
  while (seq.size() >= 2) {
    std::size_t best_rank = merges_.size();
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      auto it = rank_.find({seq[i], seq[i + 1]});
      if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == merges_.size()) break;
    merge_pair(seq, merges_[best_rank],
               static_cast<TokenId>(kByteAlphabet + best_rank));
  }
  return seq;
}

std::string BpeModel::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

const std::string& BpeModel::token_bytes(TokenId id) const {
  if (id >= bytes_.size()) {
    throw DataError("BPE token " + std::to_string(id) + " out of range");
  }
  return bytes_[id];
}

std::string BpeModel::serialize() const {
  std::string out;
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    out += std::to_string(r) + " " + std::to_string(merges_[r].first) + " " +
           std::to_string(merges_[r].second) + "\n";
  }
  return out;
}

BpeModel BpeModel::parse(std::string_view text) {
  BpeModel model;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t rank = 0;
    TokenId l = 0, r = 0;
    std::string rest;
    if (!(ls >> rank >> l >> r) || (ls >> rest)) {
      throw DataError("BPE file line " + std::to_string(line_no) +
                      ": expected `rank left right`");
    }
    if (rank != model.merges_.size()) {
      throw DataError("BPE file line " + std::to_string(line_no) +
                      ": ranks must be consecutive from 0");
    }
    model.merges_.emplace_back(l, r);
  }
  model.rebuild();
  return model;
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << serialize();
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse(os.str());
}

}  // namespace chamtoy
