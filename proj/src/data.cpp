#include "chamtoy/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace chamtoy {

MixtureSpec MixtureSpec::defaults() {
  MixtureSpec s;
  s.stage1 = {{"text", 0.604}, {"text_image", 0.3125}, {"interleaved", 0.0833}};
  s.stage2_extra = {{"instruct", 0.5}};
  return s;
}

void MixtureSpec::validate() const {
  if (stage1.empty()) throw ConfigError("mixture has no stage-1 sources");
  if (!(stage_boundary >= 0.0 && stage_boundary <= 1.0)) {
    throw ConfigError("mixture.stage_boundary must lie in [0, 1]");
  }
  std::vector<std::string> seen;
  for (const auto* list : {&stage1, &stage2_extra}) {
    for (const auto& s : *list) {
      if (!(s.weight > 0.0) || !std::isfinite(s.weight)) {
        throw ConfigError("mixture weight for '" + s.name + "' must be positive");
      }
      if (std::find(seen.begin(), seen.end(), s.name) != seen.end()) {
        throw ConfigError("mixture source '" + s.name + "' listed twice");
      }
      seen.push_back(s.name);
    }
  }
}

std::uint64_t MixtureSpec::switch_step(std::uint64_t total_steps) const {
  return static_cast<std::uint64_t>(
      std::floor(stage_boundary * static_cast<double>(total_steps)));
}

int MixtureSpec::stage_at(std::uint64_t step, std::uint64_t total_steps) const {
  return step < switch_step(total_steps) ? 1 : 2;
}

std::vector<SourceWeight> MixtureSpec::probabilities(int stage) const {
  std::vector<SourceWeight> out = stage1;
  if (stage == 2) {
    for (auto& s : out) s.weight *= 0.5;
    out.insert(out.end(), stage2_extra.begin(), stage2_extra.end());
  }
  double total = 0;
  for (const auto& s : out) total += s.weight;
  for (auto& s : out) s.weight /= total;
  return out;
}

void MixtureSpec::to_kv(KvMap& kv) const {
  kv["mixture.stage_boundary"] = format_scalar(stage_boundary);
  for (const auto& s : stage1) kv["mixture.stage1." + s.name] = format_scalar(s.weight);
  for (const auto& s : stage2_extra) {
    kv["mixture.stage2." + s.name] = format_scalar(s.weight);
  }
}

bool MixtureSpec::set(std::string_view key, std::string_view value) {
  if (key == "mixture.stage_boundary") {
    stage_boundary = parse_scalar(key, value);
    return true;
  }
  auto assign = [&](std::vector<SourceWeight>& list, std::string_view name) {
    if (name.empty()) throw ConfigError("'" + std::string(key) + "': empty source name");
    const double w = parse_scalar(key, value);
    for (auto& s : list) {
      if (s.name == name) {
        s.weight = w;
        return true;
      }
    }
    list.push_back({std::string(name), w});
    return true;
  };
  constexpr std::string_view s1 = "mixture.stage1.", s2 = "mixture.stage2.";
  if (key.starts_with(s1)) return assign(stage1, key.substr(s1.size()));
  if (key.starts_with(s2)) return assign(stage2_extra, key.substr(s2.size()));
  return false;
}

std::string sample_source(std::uint64_t step, std::uint64_t total_steps,
                          const MixtureSpec& spec, Rng& rng) {
  if (step >= total_steps) {
    throw DomainError("step " + std::to_string(step) + " is past total_steps " +
                      std::to_string(total_steps));
  }
  const auto probs = spec.probabilities(spec.stage_at(step, total_steps));
  const double u = rng.uniform();
  double acc = 0;
  for (const auto& s : probs) {
    acc += s.weight;
    if (u < acc) return s.name;
  }
  return probs.back().name;
}

void validate_image_blocks(std::span<const TokenId> tokens,
                           const MixedVocab& vocab, std::size_t k) {
  bool open = false;
  std::size_t count = 0, start = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    if (t >= vocab.total_size()) {
      throw DataError("token " + std::to_string(t) + " at offset " +
                      std::to_string(i) + " is outside the vocabulary");
    }
    if (t == vocab.boi()) {
      if (open) {
        throw DataError("nested BOI at offset " + std::to_string(i) +
                        " (block opened at " + std::to_string(start) + ")");
      }
      open = true;
      count = 0;
      start = i;
    } else if (t == vocab.eoi()) {
      if (!open) throw DataError("EOI without BOI at offset " + std::to_string(i));
      if (count == 0 || (k != 0 && count != k)) {
        throw DataError("image block at offset " + std::to_string(start) +
                        " has " + std::to_string(count) + " tokens, expected " +
                        std::to_string(k));
      }
      open = false;
    } else if (open) {
      if (!vocab.is_image(t)) {
        throw DataError("non-image token at offset " + std::to_string(i) +
                        " inside image block");
      }
      ++count;
    } else if (vocab.is_image(t)) {
      throw DataError("image token at offset " + std::to_string(i) +
                      " outside an image block");
    }
  }
  if (open) {
    throw DataError("image block opened at offset " + std::to_string(start) +
                    " is never closed");
  }
}

TokenIds image_block(std::span<const TokenId> image_tokens,
                     const MixedVocab& vocab) {
  if (image_tokens.empty()) throw DataError("empty image block");
  TokenIds out;
  out.reserve(image_tokens.size() + 2);
  out.push_back(vocab.boi());
  for (std::size_t i = 0; i < image_tokens.size(); ++i) {
    if (!vocab.is_image(image_tokens[i])) {
      throw DataError("image block entry " + std::to_string(i) +
                      " is not a codebook token");
    }
    out.push_back(image_tokens[i]);
  }
  out.push_back(vocab.eoi());
  return out;
}

TokenIds rotate_caption_pair(std::span<const TokenId> image_tokens,
                             std::span<const TokenId> text_tokens,
                             const MixedVocab& vocab, Rng& rng,
                             bool* image_first) {
  const TokenIds block = image_block(image_tokens, vocab);
  const bool first = rng.uniform() < 0.5;
  if (image_first) *image_first = first;
  TokenIds out;
  out.reserve(block.size() + text_tokens.size());
  if (first) {
    out.insert(out.end(), block.begin(), block.end());
    out.insert(out.end(), text_tokens.begin(), text_tokens.end());
  } else {
    out.insert(out.end(), text_tokens.begin(), text_tokens.end());
    out.insert(out.end(), block.begin(), block.end());
  }
  return out;
}

PackResult pack_sft(std::span<const PairedExample> examples, std::size_t max_len,
                    const MixedVocab& vocab) {
  if (max_len == 0) throw ConfigError("packing length must be positive");
  PackResult result;
  for (const auto& ex : examples) {
    const std::size_t need = ex.prompt.size() + 1 + ex.answer.size();
    if (need > max_len) {
      result.rejections.push_back({ex.id, need});
      continue;
    }
    if (result.sequences.empty() ||
        result.sequences.back().tokens.size() + need > max_len) {
      result.sequences.emplace_back();
    }
    auto& seq = result.sequences.back();
    seq.boundaries.push_back(seq.tokens.size());
    seq.example_ids.push_back(ex.id);
    seq.tokens.insert(seq.tokens.end(), ex.prompt.begin(), ex.prompt.end());
    seq.tokens.push_back(vocab.sep());
    seq.tokens.insert(seq.tokens.end(), ex.answer.begin(), ex.answer.end());
    seq.loss_mask.insert(seq.loss_mask.end(), ex.prompt.size() + 1, 0);
    seq.loss_mask.insert(seq.loss_mask.end(), ex.answer.size(), 1);
  }
  return result;
}

// ---- corpus files ----------------------------------------------------------

std::string to_string(RecordKind k) {
  switch (k) {
    case RecordKind::Text: return "text";
    case RecordKind::Pair: return "pair";
    case RecordKind::Interleaved: return "interleaved";
    case RecordKind::Sft: return "sft";
  }
  return "?";
}

namespace {

RecordKind parse_kind(const std::string& s, const std::string& origin) {
  if (s == "text") return RecordKind::Text;
  if (s == "pair") return RecordKind::Pair;
  if (s == "interleaved") return RecordKind::Interleaved;
  if (s == "sft") return RecordKind::Sft;
  throw DataError(origin + ": unknown record kind '" + s + "'");
}

std::string string_field(const nlohmann::json& j, const char* key,
                         const std::string& origin, bool required) {
  if (!j.contains(key)) {
    if (required) throw DataError(origin + ": missing field '" + key + "'");
    return {};
  }
  if (!j[key].is_string()) {
    throw DataError(origin + ": field '" + key + "' must be a string");
  }
  return j[key].get<std::string>();
}

std::size_t count_markers(std::string_view text) {
  std::size_t n = 0;
  for (auto pos = text.find(kImageMarker); pos != std::string_view::npos;
       pos = text.find(kImageMarker, pos + kImageMarker.size())) {
    ++n;
  }
  return n;
}

}  // namespace

std::vector<CorpusRecord> parse_corpus(std::string_view text,
                                       const std::filesystem::path& base_dir,
                                       std::string_view origin) {
  std::vector<CorpusRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = std::string(origin) + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw DataError(where + ": record must be an object");
    CorpusRecord r;
    r.origin = where;
    r.kind = parse_kind(string_field(j, "kind", where, true), where);
    auto add_image = [&](const nlohmann::json& v) {
      if (!v.is_string()) throw DataError(where + ": image paths must be strings");
      r.images.push_back(base_dir / v.get<std::string>());
    };
    if (j.contains("image")) {
      if (j["image"].is_array()) {
        for (const auto& v : j["image"]) add_image(v);
      } else {
        add_image(j["image"]);
      }
    }
    switch (r.kind) {
      case RecordKind::Text:
        r.text = string_field(j, "text", where, true);
        break;
      case RecordKind::Pair:
        r.text = string_field(j, "text", where, true);
        if (r.images.size() != 1) {
          throw DataError(where + ": pair records need exactly one image");
        }
        break;
      case RecordKind::Interleaved:
        r.text = string_field(j, "text", where, true);
        if (count_markers(r.text) != r.images.size()) {
          throw DataError(where + ": " + std::to_string(count_markers(r.text)) +
                          " image markers but " +
                          std::to_string(r.images.size()) + " images");
        }
        break;
      case RecordKind::Sft: {
        r.prompt = string_field(j, "prompt", where, true);
        r.answer = string_field(j, "answer", where, false);
        const std::string ai = string_field(j, "answer_image", where, false);
        if (!ai.empty()) r.answer_image = base_dir / ai;
        if (r.images.size() > 1) {
          throw DataError(where + ": sft records take at most one prompt image");
        }
        if (r.answer.empty() && !r.answer_image) {
          throw DataError(where + ": sft record has an empty answer");
        }
        break;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".jsonl") {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end());
  } else if (std::filesystem::is_regular_file(path)) {
    files.push_back(path);
  } else {
    throw DataError("corpus path " + path.string() + " does not exist");
  }
  std::vector<CorpusRecord> out;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw DataError("cannot read " + f.string());
    std::ostringstream os;
    os << in.rdbuf();
    auto recs = parse_corpus(os.str(), f.parent_path(), f.string());
    std::move(recs.begin(), recs.end(), std::back_inserter(out));
  }
  if (out.empty()) throw DataError("corpus " + path.string() + " is empty");
  return out;
}

TokenIds MixedTokenizer::encode_text(std::string_view text) const {
  TokenIds ids = bpe.encode(text);
  for (TokenId id : ids) {
    if (id >= vocab.text_size()) {
      throw ConfigError("BPE vocabulary exceeds the text range of the vocabulary");
    }
  }
  return ids;
}

TokenIds MixedTokenizer::encode_picture(const Image& img, bool letterbox) const {
  Image square = letterbox ? letterbox_square(img, geometry.side)
                           : center_crop_square(img, geometry.side);
  if (square.channels != codebook.channels()) {
    throw DataError("image has " + std::to_string(square.channels) +
                    " channels, codebook expects " +
                    std::to_string(codebook.channels()));
  }
  return encode_image(square, codebook, vocab);
}

std::string source_for(RecordKind kind) {
  switch (kind) {
    case RecordKind::Text: return "text";
    case RecordKind::Pair: return "text_image";
    case RecordKind::Interleaved: return "interleaved";
    case RecordKind::Sft: return "instruct";
  }
  return "?";
}

const std::vector<Document>* EncodedCorpus::find(std::string_view source) const {
  for (const auto& [name, docs] : sources) {
    if (name == source) return &docs;
  }
  return nullptr;
}

EncodedCorpus encode_corpus(
    std::span<const CorpusRecord> records, const MixedTokenizer& tok,
    const std::function<Image(const std::filesystem::path&)>& load_image) {
  auto load = [&](const std::filesystem::path& p) {
    return load_image ? load_image(p) : read_pnm(p);
  };
  EncodedCorpus out;
  auto bucket = [&](const std::string& name) -> std::vector<Document>& {
    for (auto& [n, docs] : out.sources) {
      if (n == name) return docs;
    }
    out.sources.emplace_back(name, std::vector<Document>{});
    return out.sources.back().second;
  };
  const MixedVocab& v = tok.vocab;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const CorpusRecord& r = records[i];
    try {
      Document doc;
      doc.kind = r.kind;
      switch (r.kind) {
        case RecordKind::Text:
          doc.tokens = tok.encode_text(r.text);
          break;
        case RecordKind::Pair:
          doc.image_tokens = tok.encode_picture(load(r.images.front()));
          doc.text_tokens = tok.encode_text(r.text);
          break;
        case RecordKind::Interleaved: {
          std::string_view rest = r.text;
          for (const auto& path : r.images) {
            const auto pos = rest.find(kImageMarker);
            const TokenIds t = tok.encode_text(rest.substr(0, pos));
            doc.tokens.insert(doc.tokens.end(), t.begin(), t.end());
            const TokenIds b = image_block(tok.encode_picture(load(path)), v);
            doc.tokens.insert(doc.tokens.end(), b.begin(), b.end());
            rest = rest.substr(pos + kImageMarker.size());
          }
          const TokenIds t = tok.encode_text(rest);
          doc.tokens.insert(doc.tokens.end(), t.begin(), t.end());
          break;
        }
        case RecordKind::Sft: {
          PairedExample ex;
          ex.id = r.origin;
          if (!r.images.empty()) {
            ex.prompt = image_block(tok.encode_picture(load(r.images.front()), true), v);
          }
          const TokenIds p = tok.encode_text(r.prompt);
          ex.prompt.insert(ex.prompt.end(), p.begin(), p.end());
          ex.answer = tok.encode_text(r.answer);
          if (r.answer_image) {
            const TokenIds b = image_block(tok.encode_picture(load(*r.answer_image)), v);
            ex.answer.insert(ex.answer.end(), b.begin(), b.end());
          }
          ex.answer.push_back(v.eos());
          // The same pair also serves as a stage-2 instruction document.
          doc.tokens = ex.prompt;
          doc.tokens.push_back(v.sep());
          doc.tokens.insert(doc.tokens.end(), ex.answer.begin(), ex.answer.end());
          out.sft.push_back(std::move(ex));
          break;
        }
      }
      bucket(source_for(r.kind)).push_back(std::move(doc));
    } catch (const DataError& e) {
      throw DataError(r.origin + ": " + e.what());
    }
  }
  return out;
}

TokenIds realize_document(const Document& doc, const MixedVocab& vocab,
                          Rng& rng) {
  TokenIds out{vocab.bos()};
  if (doc.kind == RecordKind::Pair) {
    const TokenIds body =
        rotate_caption_pair(doc.image_tokens, doc.text_tokens, vocab, rng);
    out.insert(out.end(), body.begin(), body.end());
  } else {
    out.insert(out.end(), doc.tokens.begin(), doc.tokens.end());
  }
  if (out.back() != vocab.eos()) out.push_back(vocab.eos());
  return out;
}

// ---- synthetic corpus --------------------------------------------------------

namespace {

struct Tone {
  const char* name;
  double level;
};

constexpr Tone kTones[] = {
    {"black", 0.0}, {"dark", 1.0 / 3.0}, {"light", 2.0 / 3.0}, {"white", 1.0}};
constexpr const char* kNouns[] = {"cat", "dog", "bird", "fish", "tree", "house"};
constexpr const char* kVerbs[] = {"sees", "likes", "finds", "draws"};

Image two_tone(std::size_t side, std::size_t channels, double top,
               double bottom) {
  Image img(side, side, channels);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        img.at(x, y, c) = y < side / 2 ? top : bottom;
      }
    }
  }
  return img;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(const SyntheticOptions& opts,
                                      std::uint64_t seed) {
  if (opts.side < 2 || opts.side % 2 != 0) {
    throw ConfigError("synthetic image side must be even");
  }
  SyntheticCorpus c;
  Rng rng(seed);
  const std::size_t n_tones = std::size(kTones);
  // Every tone pair gets one image file.
  std::vector<std::string> captions;
  for (std::size_t a = 0; a < n_tones; ++a) {
    for (std::size_t b = 0; b < n_tones; ++b) {
      const std::string name = "images/" + std::string(kTones[a].name) + "_" +
                               kTones[b].name + (opts.channels == 1 ? ".pgm" : ".ppm");
      c.images.emplace_back(name, two_tone(opts.side, opts.channels,
                                           kTones[a].level, kTones[b].level));
      captions.push_back(std::string("top ") + kTones[a].name + " bottom " +
                         kTones[b].name);
    }
  }
  auto pick_image = [&] { return rng.below(c.images.size()); };
  auto sentence = [&] {
    const std::string subj = kNouns[rng.below(std::size(kNouns))];
    const std::string verb = kVerbs[rng.below(std::size(kVerbs))];
    const std::string tone = kTones[rng.below(n_tones)].name;
    const std::string obj = kNouns[rng.below(std::size(kNouns))];
    return "the " + subj + " " + verb + " the " + tone + " " + obj + ".";
  };
  for (std::size_t i = 0; i < opts.text_records; ++i) {
    CorpusRecord r;
    r.kind = RecordKind::Text;
    r.text = sentence();
    c.records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < opts.pair_records; ++i) {
    const auto k = pick_image();
    CorpusRecord r;
    r.kind = RecordKind::Pair;
    r.text = captions[k] + ".";
    r.images = {c.images[k].first};
    c.records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < opts.interleaved_records; ++i) {
    const auto k1 = pick_image(), k2 = pick_image();
    CorpusRecord r;
    r.kind = RecordKind::Interleaved;
    r.text = captions[k1] + ": " + std::string(kImageMarker) + " then " +
             captions[k2] + ": " + std::string(kImageMarker);
    r.images = {c.images[k1].first, c.images[k2].first};
    c.records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < opts.sft_records; ++i) {
    const auto k = pick_image();
    CorpusRecord r;
    r.kind = RecordKind::Sft;
    if (i % 2 == 0) {
      r.prompt = "draw " + captions[k] + ".";
      r.answer_image = c.images[k].first;
    } else {
      r.prompt = "describe.";
      r.images = {c.images[k].first};
      r.answer = captions[k] + ".";
    }
    c.records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    c.records[i].origin = "synthetic:" + std::to_string(i + 1);
  }
  return c;
}

void write_corpus(const std::filesystem::path& dir, const SyntheticCorpus& c) {
  std::filesystem::create_directories(dir / "images");
  for (const auto& [rel, img] : c.images) write_pnm(dir / rel, img);
  std::ofstream out(dir / "corpus.jsonl", std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / "corpus.jsonl").string());
  for (const auto& r : c.records) {
    nlohmann::json j;
    j["kind"] = to_string(r.kind);
    auto rel = [](const std::filesystem::path& p) { return p.generic_string(); };
    switch (r.kind) {
      case RecordKind::Text:
        j["text"] = r.text;
        break;
      case RecordKind::Pair:
        j["text"] = r.text;
        j["image"] = rel(r.images.front());
        break;
      case RecordKind::Interleaved: {
        j["text"] = r.text;
        auto arr = nlohmann::json::array();
        for (const auto& p : r.images) arr.push_back(rel(p));
        j["image"] = arr;
        break;
      }
      case RecordKind::Sft:
        j["prompt"] = r.prompt;
        if (!r.answer.empty()) j["answer"] = r.answer;
        if (!r.images.empty()) j["image"] = rel(r.images.front());
        if (r.answer_image) j["answer_image"] = rel(*r.answer_image);
        break;
    }
    out << j.dump() << "\n";
  }
}

}  // namespace chamtoy
