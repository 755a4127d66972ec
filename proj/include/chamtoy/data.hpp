#ifndef CHAMTOY_DATA_HPP_
#define CHAMTOY_DATA_HPP_

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chamtoy/bpe.hpp"
#include "chamtoy/codebook.hpp"
#include "chamtoy/image.hpp"
#include "chamtoy/kv_config.hpp"
#include "chamtoy/random.hpp"
#include "chamtoy/vocab.hpp"

namespace chamtoy {

struct SourceWeight {
  std::string name;
  double weight = 0;
};

// Two-stage pre-training mixture. Stage 2 keeps the stage-1 sources at half
// weight and adds its own sources on top.
struct MixtureSpec {
  std::vector<SourceWeight> stage1;
  std::vector<SourceWeight> stage2_extra;
  double stage_boundary = 0.8;

  static MixtureSpec defaults();
  void validate() const;

  // First step of stage 2: floor(stage_boundary * total_steps).
  std::uint64_t switch_step(std::uint64_t total_steps) const;
  int stage_at(std::uint64_t step, std::uint64_t total_steps) const;
  // Normalised probabilities; stage 1 lists stage1 sources, stage 2 lists the
  // stage1 sources followed by stage2_extra.
  std::vector<SourceWeight> probabilities(int stage) const;

  // `mixture.stage_boundary`, `mixture.stage1.<name>`, `mixture.stage2.<name>`.
  void to_kv(KvMap& kv) const;
  bool set(std::string_view key, std::string_view value);
};

// One uniform draw per call.
std::string sample_source(std::uint64_t step, std::uint64_t total_steps,
                          const MixtureSpec& spec, Rng& rng);

// Checks BOI/EOI balance and that every block holds exactly `k` codebook
// tokens (any positive length when k == 0). Image tokens outside a block
// are rejected. Errors name the offending offset.
void validate_image_blocks(std::span<const TokenId> tokens,
                           const MixedVocab& vocab, std::size_t k = 0);

TokenIds image_block(std::span<const TokenId> image_tokens,
                     const MixedVocab& vocab);

// [BOI image EOI text] or [text BOI image EOI], one uniform draw deciding.
TokenIds rotate_caption_pair(std::span<const TokenId> image_tokens,
                             std::span<const TokenId> text_tokens,
                             const MixedVocab& vocab, Rng& rng,
                             bool* image_first = nullptr);

struct PairedExample {
  std::string id;
  TokenIds prompt;
  TokenIds answer;
};

struct PackedSequence {
  TokenIds tokens;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> boundaries;  // start offset of each example
  std::vector<std::string> example_ids;
};

struct PackRejection {
  std::string id;
  std::size_t required_length = 0;
};

struct PackResult {
  std::vector<PackedSequence> sequences;
  std::vector<PackRejection> rejections;
};

// Layout per example: prompt, SEP, answer. Examples are appended to the open
// sequence while they fit, otherwise a new sequence is started; so reading
// the sequences in order replays the accepted examples in input order.
PackResult pack_sft(std::span<const PairedExample> examples, std::size_t max_len,
                    const MixedVocab& vocab);

// ---- corpus files ----------------------------------------------------------

enum class RecordKind { Text, Pair, Interleaved, Sft };

std::string to_string(RecordKind k);

// One JSON object per line. `image` is a path (or list of paths for
// interleaved records, referenced in order by `<img>` markers in `text`).
// SFT records use `prompt`, `answer`, and optionally `image` (prompt image,
// letterboxed) and `answer_image` (center-cropped).
struct CorpusRecord {
  RecordKind kind = RecordKind::Text;
  std::string text;
  std::vector<std::filesystem::path> images;
  std::string prompt;
  std::string answer;
  std::optional<std::filesystem::path> answer_image;
  std::string origin;  // file:line
};

inline constexpr std::string_view kImageMarker = "<img>";

std::vector<CorpusRecord> parse_corpus(std::string_view text,
                                       const std::filesystem::path& base_dir,
                                       std::string_view origin);
// A .jsonl file, or every *.jsonl file in a directory in name order.
std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path);

// Everything needed to turn records into token ids.
struct MixedTokenizer {
  MixedVocab vocab;
  BpeModel bpe;
  Codebook codebook;
  ImageGeometry geometry;

  TokenIds encode_text(std::string_view text) const;
  // Bare codebook ids; the image is center-cropped to the native square.
  TokenIds encode_picture(const Image& img, bool letterbox = false) const;
};

// A pre-training document. Pairs keep the two segments apart so the
// caption rotation can happen at sampling time.
struct Document {
  RecordKind kind = RecordKind::Text;
  TokenIds tokens;        // text, interleaved: full token stream
  TokenIds image_tokens;  // pair: bare codebook ids
  TokenIds text_tokens;   // pair: caption ids
};

// Maps a record kind to its mixture source name.
std::string source_for(RecordKind kind);

struct EncodedCorpus {
  std::vector<std::pair<std::string, std::vector<Document>>> sources;
  std::vector<PairedExample> sft;

  const std::vector<Document>* find(std::string_view source) const;
};

// `load_image` defaults to read_pnm.
EncodedCorpus encode_corpus(
    std::span<const CorpusRecord> records, const MixedTokenizer& tok,
    const std::function<Image(const std::filesystem::path&)>& load_image = {});

// BOS, document, EOS. Pairs draw their caption order from rng.
TokenIds realize_document(const Document& doc, const MixedVocab& vocab,
                          Rng& rng);

// ---- synthetic corpus --------------------------------------------------------

// Two-tone images (top and bottom halves drawn from a small palette of grey
// levels) with captions naming the tones, plus filler text, interleaved
// documents and SFT pairs. Deterministic given the seed.
struct SyntheticCorpus {
  std::vector<CorpusRecord> records;
  std::vector<std::pair<std::filesystem::path, Image>> images;  // relative paths
};

struct SyntheticOptions {
  std::size_t side = 16;
  std::size_t channels = 1;
  std::size_t text_records = 64;
  std::size_t pair_records = 64;
  std::size_t interleaved_records = 16;
  std::size_t sft_records = 32;
};

SyntheticCorpus make_synthetic_corpus(const SyntheticOptions& opts,
                                      std::uint64_t seed);
// Writes corpus.jsonl plus images/*.pgm under dir.
void write_corpus(const std::filesystem::path& dir, const SyntheticCorpus& c);

}  // namespace chamtoy

#endif  // CHAMTOY_DATA_HPP_
