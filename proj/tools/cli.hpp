#ifndef CHAMTOY_TOOLS_CLI_HPP_
#define CHAMTOY_TOOLS_CLI_HPP_

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "chamtoy/codebook.hpp"
#include "chamtoy/data.hpp"
#include "chamtoy/kv_config.hpp"

namespace chamtoy::cli {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kDiverged = 3 };

// Runs one command line (args excludes the program name). Never throws;
// errors are printed to `err` and mapped onto exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Tokenizer artifacts directory: bpe.txt, codebook.bin, tokenizer.cfg.
struct TokenizerConfig {
  std::size_t bpe_vocab = 320;
  std::size_t codebook_size = 256;
  ImageGeometry geometry{16, 4, 1};  // matches the synthetic corpus
  std::size_t kmeans_iters = 20;
  std::uint64_t seed = 0;

  void validate() const;
  void to_kv(KvMap& kv) const;  // `tokenizer.*`
  bool set(std::string_view key, std::string_view value);
};

MixedTokenizer load_tokenizer(const std::filesystem::path& dir);

// CHAMTOY_SEED when set and numeric, else `fallback`.
std::uint64_t env_seed(std::uint64_t fallback = 0);

}  // namespace chamtoy::cli

#endif  // CHAMTOY_TOOLS_CLI_HPP_
