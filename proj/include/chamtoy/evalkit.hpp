#ifndef CHAMTOY_EVALKIT_HPP_
#define CHAMTOY_EVALKIT_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chamtoy/common.hpp"

namespace chamtoy {

// Most frequent answer; among tied answers the one seen first wins.
std::string maj_at_n(std::span<const std::string> answers);

enum class Outcome { Win, Tie, Loss };

std::string to_string(Outcome o);
Outcome parse_outcome(std::string_view s);

struct PairwiseOutcome {
  std::string item_id;
  Outcome result = Outcome::Tie;
  std::string category;
  std::string modality;  // "mixed", "text" or empty
};

struct WinCounts {
  std::size_t wins = 0;
  std::size_t ties = 0;
  std::size_t losses = 0;

  std::size_t total() const { return wins + ties + losses; }
  // (wins + ties / 2) / total; throws DataError when empty.
  double win_rate() const;
};

WinCounts tally(std::span<const PairwiseOutcome> outcomes);
double win_rate(std::span<const PairwiseOutcome> outcomes);
// Swaps wins and losses.
std::vector<PairwiseOutcome> reversed(std::span<const PairwiseOutcome> outcomes);

enum class GroupBy { Category, Modality };

struct BreakdownRow {
  std::string group;
  WinCounts counts;
  double win_rate = 0;
};

struct Breakdown {
  std::vector<BreakdownRow> rows;  // groups in name order
  std::vector<std::string> notes;  // one per expected group with no items
};

// Outcomes with an empty tag for the chosen key are left out. Groups listed in
// `expected` that have no items are reported in notes instead of rows.
Breakdown breakdown(std::span<const PairwiseOutcome> outcomes, GroupBy by,
                    std::span<const std::string> expected = {});

// Overall, per-category and per-modality rows in one aligned text table.
std::string format_win_table(std::span<const PairwiseOutcome> outcomes,
                             std::string_view title);
// Same rows as CSV: group,wins,ties,losses,win_rate.
std::string win_table_csv(std::span<const PairwiseOutcome> outcomes);

struct JudgmentRecord {
  std::string item_id;
  std::string annotator_id;
  std::string label;
};

// Nominal Krippendorff alpha from the coincidence matrix, using pairable
// values only (items with at least two labels). Throws DataError when nothing
// is pairable or an (item, annotator) pair repeats. Returns 1 when every
// pairable label is identical.
double krippendorff_alpha(std::span<const JudgmentRecord> records);

struct BootstrapResult {
  double point = 0;
  double low = 0;
  double high = 0;
  std::size_t iterations = 0;
  std::size_t skipped = 0;  // resamples with no pairable values
};

inline constexpr std::size_t kDefaultBootstrapIterations = 1000;

// Percentile interval of alpha over item-level resamples with replacement.
// Iteration i draws from derive_seed(seed, stream, i), so results do not
// depend on the thread count.
BootstrapResult bootstrap_ci(std::span<const JudgmentRecord> records,
                             std::size_t iterations = kDefaultBootstrapIterations,
                             double level = 0.95, std::uint64_t seed = 0);

// CSV with a header row; errors carry origin:line.
std::vector<JudgmentRecord> parse_judgments_csv(std::string_view text,
                                                std::string_view origin);
std::vector<PairwiseOutcome> parse_outcomes_csv(std::string_view text,
                                                std::string_view origin);
std::vector<JudgmentRecord> read_judgments_csv(const std::filesystem::path& path);
std::vector<PairwiseOutcome> read_outcomes_csv(const std::filesystem::path& path);

}  // namespace chamtoy

#endif  // CHAMTOY_EVALKIT_HPP_
