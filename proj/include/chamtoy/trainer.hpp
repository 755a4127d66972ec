#ifndef CHAMTOY_TRAINER_HPP_
#define CHAMTOY_TRAINER_HPP_

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "chamtoy/checkpoint.hpp"
#include "chamtoy/data.hpp"
#include "chamtoy/model.hpp"
#include "chamtoy/monitor.hpp"
#include "chamtoy/objective.hpp"
#include "chamtoy/optim.hpp"

namespace chamtoy {

struct TrainConfig {
  ModelConfig model;
  OptimConfig optim;
  MixtureSpec mixture = MixtureSpec::defaults();
  // The toy init transient lasts a few hundred steps; see MonitorConfig.
  MonitorConfig monitor{.grace_steps = 500};
  std::size_t batch_size = 4;
  // Input tokens per row; rows are cut to seq_len + 1 tokens.
  std::size_t seq_len = 48;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  bool halt_on_divergence = true;

  void validate() const;
  // `train.*` plus the model, optim, mixture and monitor keys.
  void to_kv(KvMap& kv) const;
  bool set(std::string_view key, std::string_view value);
};

// Next-token row: inputs are tokens[0, n-1), targets tokens[1, n).
// target_mask has n-1 entries; empty means every target counts.
struct TrainingRow {
  TokenIds tokens;
  LossMask target_mask;
};

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::vector<TrainingRow> batch(std::uint64_t step,
                                         std::uint64_t total_steps,
                                         std::size_t batch_size,
                                         Rng& rng) const = 0;
};

// Mixture-sampled documents, one per row, caption order rotated per draw.
class PretrainBatches : public BatchSource {
 public:
  // Throws ConfigError when a mixture source has no documents.
  PretrainBatches(EncodedCorpus corpus, MixtureSpec mixture, MixedVocab vocab,
                  std::size_t seq_len);
  std::vector<TrainingRow> batch(std::uint64_t step, std::uint64_t total_steps,
                                 std::size_t batch_size, Rng& rng) const override;

 private:
  EncodedCorpus corpus_;
  MixtureSpec mixture_;
  MixedVocab vocab_;
  std::size_t seq_len_;
};

// Packed SFT sequences with prompt and SEP positions masked out.
class SftBatches : public BatchSource {
 public:
  explicit SftBatches(std::vector<PackedSequence> sequences);
  std::vector<TrainingRow> batch(std::uint64_t step, std::uint64_t total_steps,
                                 std::size_t batch_size, Rng& rng) const override;

 private:
  std::vector<PackedSequence> sequences_;
};

TrainingRow row_from_packed(const PackedSequence& seq);

struct StepLog {
  std::uint64_t step = 0;  // 1-based optimizer step
  double ce = 0;
  double zloss = 0;
  double lr = 0;
  double grad_norm = 0;
  double output_rms = 0;
  bool diverged = false;

  double total() const { return ce + zloss; }
};

std::string loss_csv_header();
std::string loss_csv_row(const StepLog& s);
// Parses a loss.csv written by train_loop.
std::vector<StepLog> read_loss_csv(const std::filesystem::path& path);

struct StepResult {
  LossBreakdown loss;  // batch mean; loss.loss is differentiable
  double output_rms = 0;
};

// Forward and loss over one batch. Batch loss is the mean of per-row totals.
StepResult batch_loss(const Transformer& model, std::span<const TrainingRow> rows,
                      bool train, Rng* rng);

struct TrainOptions {
  // Empty: nothing is written to disk.
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> resume_from;
  // Stop after this step (0: run to optim.total_steps) and checkpoint.
  std::uint64_t stop_after = 0;
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::vector<StepLog> log;  // steps run in this call
  std::vector<NormRecord> trace;
  bool halted = false;
  std::uint64_t final_step = 0;
  std::filesystem::path final_checkpoint;
};

// Checkpoint directory name for a step: `step-00000042`.
std::string checkpoint_name(std::uint64_t step);

TrainResult train_loop(Transformer& model, const BatchSource& data,
                       const TrainConfig& cfg, const TrainOptions& opts = {});

}  // namespace chamtoy

#endif  // CHAMTOY_TRAINER_HPP_
