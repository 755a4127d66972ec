#include "chamtoy/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "chamtoy/random.hpp"

namespace chamtoy {

std::string maj_at_n(std::span<const std::string> answers) {
  if (answers.empty()) throw DataError("maj@N needs at least one answer");
  std::map<std::string, std::size_t> counts;
  std::size_t best = 0;
  for (const auto& a : answers) best = std::max(best, ++counts[a]);
  for (const auto& a : answers) {
    if (counts[a] == best) return a;
  }
  return answers.front();
}

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::Win: return "win";
    case Outcome::Tie: return "tie";
    case Outcome::Loss: return "loss";
  }
  return "?";
}

Outcome parse_outcome(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (lower == "win") return Outcome::Win;
  if (lower == "tie") return Outcome::Tie;
  if (lower == "loss" || lower == "lose") return Outcome::Loss;
  throw DataError("unknown result '" + std::string(s) + "' (expected win, tie or loss)");
}

double WinCounts::win_rate() const {
  if (total() == 0) throw DataError("win rate of an empty set");
  return (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) /
         static_cast<double>(total());
}

WinCounts tally(std::span<const PairwiseOutcome> outcomes) {
  WinCounts c;
  for (const auto& o : outcomes) {
    switch (o.result) {
      case Outcome::Win: ++c.wins; break;
      case Outcome::Tie: ++c.ties; break;
      case Outcome::Loss: ++c.losses; break;
    }
  }
  return c;
}

double win_rate(std::span<const PairwiseOutcome> outcomes) {
  return tally(outcomes).win_rate();
}

std::vector<PairwiseOutcome> reversed(std::span<const PairwiseOutcome> outcomes) {
  std::vector<PairwiseOutcome> out(outcomes.begin(), outcomes.end());
  for (auto& o : out) {
    if (o.result == Outcome::Win) o.result = Outcome::Loss;
    else if (o.result == Outcome::Loss) o.result = Outcome::Win;
  }
  return out;
}

Breakdown breakdown(std::span<const PairwiseOutcome> outcomes, GroupBy by,
                    std::span<const std::string> expected) {
  std::map<std::string, std::vector<PairwiseOutcome>> groups;
  for (const auto& o : outcomes) {
    const std::string& key = by == GroupBy::Category ? o.category : o.modality;
    if (!key.empty()) groups[key].push_back(o);
  }
  Breakdown b;
  for (const auto& [name, items] : groups) {
    const WinCounts c = tally(items);
    b.rows.push_back({name, c, c.win_rate()});
  }
  for (const auto& e : expected) {
    if (!groups.contains(e)) b.notes.push_back("group '" + e + "' has no items; omitted");
  }
  return b;
}

namespace {

std::string modality_label(const std::string& m) {
  if (m == "mixed") return "Mixed-modal Prompts";
  if (m == "text") return "Text-only Prompts";
  return m;
}

std::vector<BreakdownRow> table_rows(std::span<const PairwiseOutcome> outcomes) {
  std::vector<BreakdownRow> rows;
  const WinCounts all = tally(outcomes);
  rows.push_back({"Overall", all, all.win_rate()});
  for (auto& r : breakdown(outcomes, GroupBy::Category).rows) rows.push_back(r);
  for (auto& r : breakdown(outcomes, GroupBy::Modality).rows) {
    r.group = modality_label(r.group);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

std::string format_win_table(std::span<const PairwiseOutcome> outcomes,
                             std::string_view title) {
  std::string out(title);
  out += "\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-22s %6s %6s %6s %9s\n", "", "Wins", "Ties",
                "Losses", "Win rate");
  out += buf;
  for (const auto& r : table_rows(outcomes)) {
    std::snprintf(buf, sizeof buf, "%-22s %6zu %6zu %6zu %8.1f%%\n",
                  r.group.c_str(), r.counts.wins, r.counts.ties, r.counts.losses,
                  100.0 * r.win_rate);
    out += buf;
  }
  return out;
}

std::string win_table_csv(std::span<const PairwiseOutcome> outcomes) {
  std::string out = "group,wins,ties,losses,win_rate\n";
  char buf[64];
  for (const auto& r : table_rows(outcomes)) {
    std::snprintf(buf, sizeof buf, "%.6f", r.win_rate);
    out += r.group + "," + std::to_string(r.counts.wins) + "," +
           std::to_string(r.counts.ties) + "," + std::to_string(r.counts.losses) +
           "," + buf + "\n";
  }
  return out;
}

namespace {

// Label counts per pairable item, over a dense label index.
struct Units {
  std::vector<std::vector<std::size_t>> counts;
  std::size_t n_labels = 0;
};

Units build_units(std::span<const JudgmentRecord> records) {
  std::map<std::string, std::size_t> label_index;
  for (const auto& r : records) label_index.emplace(r.label, 0);
  std::size_t next = 0;
  for (auto& [label, idx] : label_index) idx = next++;
  std::map<std::string, std::vector<std::size_t>> by_item;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : records) {
    if (!seen.emplace(r.item_id, r.annotator_id).second) {
      throw DataError("item '" + r.item_id + "' has two labels from annotator '" +
                      r.annotator_id + "'");
    }
    auto& c = by_item[r.item_id];
    c.resize(next, 0);
    ++c[label_index.at(r.label)];
  }
  Units u;
  u.n_labels = next;
  for (auto& [item, c] : by_item) {
    std::size_t m = 0;
    for (std::size_t v : c) m += v;
    if (m >= 2) u.counts.push_back(std::move(c));
  }
  return u;
}

// Throws DataError when nothing is pairable.
double alpha_from_units(const std::vector<const std::vector<std::size_t>*>& units,
                        std::size_t n_labels) {
  std::vector<double> o_diag(n_labels, 0.0), n_c(n_labels, 0.0);
  double n = 0;
  for (const auto* c : units) {
    double m = 0;
    for (std::size_t v : *c) m += static_cast<double>(v);
    for (std::size_t a = 0; a < n_labels; ++a) {
      const double ca = static_cast<double>((*c)[a]);
      if (ca == 0) continue;
      o_diag[a] += ca * (ca - 1) / (m - 1);
      n_c[a] += ca;
    }
    n += m;
  }
  if (n == 0) throw DataError("no pairable values");
  double observed_off = n;  // sum of off-diagonal coincidences
  for (double d : o_diag) observed_off -= d;
  double expected_off = n * n;  // sum over c != k of n_c n_k
  for (double v : n_c) expected_off -= v * v;
  if (expected_off == 0) return 1.0;
  return 1.0 - (n - 1) * observed_off / expected_off;
}

}  // namespace

double krippendorff_alpha(std::span<const JudgmentRecord> records) {
  const Units u = build_units(records);
  std::vector<const std::vector<std::size_t>*> ptrs;
  for (const auto& c : u.counts) ptrs.push_back(&c);
  return alpha_from_units(ptrs, u.n_labels);
}

BootstrapResult bootstrap_ci(std::span<const JudgmentRecord> records,
                             std::size_t iterations, double level,
                             std::uint64_t seed) {
  if (iterations == 0) throw ConfigError("bootstrap needs at least one iteration");
  if (!(level > 0 && level < 1)) throw ConfigError("confidence level must lie in (0, 1)");
  const Units u = build_units(records);
  BootstrapResult res;
  res.iterations = iterations;
  {
    std::vector<const std::vector<std::size_t>*> all;
    for (const auto& c : u.counts) all.push_back(&c);
    res.point = alpha_from_units(all, u.n_labels);
  }
  const std::size_t n_items = u.counts.size();
  constexpr std::uint64_t kBootstrapStream = 0xb0075;
  std::vector<double> values(iterations, 0.0);
  std::vector<std::uint8_t> ok(iterations, 0);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < iterations; ++i) {
    Rng rng(derive_seed(seed, kBootstrapStream, i));
    std::vector<const std::vector<std::size_t>*> sample(n_items);
    for (auto& s : sample) s = &u.counts[rng.below(n_items)];
    try {
      values[i] = alpha_from_units(sample, u.n_labels);
      ok[i] = 1;
    } catch (const DataError&) {
    }
  }
  std::vector<double> kept;
  for (std::size_t i = 0; i < iterations; ++i) {
    if (ok[i]) kept.push_back(values[i]);
  }
  res.skipped = iterations - kept.size();
  if (kept.empty()) throw DataError("every bootstrap resample was degenerate");
  std::sort(kept.begin(), kept.end());
  auto quantile = [&](double p) {
    const double h = p * static_cast<double>(kept.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, kept.size() - 1);
    return kept[lo] + (h - static_cast<double>(lo)) * (kept[hi] - kept[lo]);
  };
  res.low = quantile((1 - level) / 2);
  res.high = quantile(1 - (1 - level) / 2);
  return res;
}

namespace {

std::vector<std::vector<std::string>> parse_csv_rows(
    std::string_view text, std::string_view origin,
    const std::vector<std::string>& header, std::size_t min_fields,
    std::vector<std::size_t>* line_numbers) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::vector<std::string>> rows;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    for (;;) {
      const auto comma = line.find(',', pos);
      f.push_back(line.substr(pos, comma == std::string::npos ? std::string::npos
                                                              : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    const std::string where = std::string(origin) + ":" + std::to_string(line_no);
    if (!saw_header) {
      if (f.size() < min_fields ||
          !std::equal(header.begin(), header.begin() + static_cast<std::ptrdiff_t>(min_fields), f.begin())) {
        std::string want;
        for (const auto& h : header) want += (want.empty() ? "" : ",") + h;
        throw DataError(where + ": expected header '" + want + "'");
      }
      saw_header = true;
      continue;
    }
    if (f.size() < min_fields || f.size() > header.size()) {
      throw DataError(where + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(f.size()));
    }
    f.resize(header.size());
    rows.push_back(std::move(f));
    line_numbers->push_back(line_no);
  }
  return rows;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

std::vector<JudgmentRecord> parse_judgments_csv(std::string_view text,
                                                std::string_view origin) {
  std::vector<std::size_t> lines;
  const auto rows = parse_csv_rows(text, origin, {"item_id", "annotator_id", "label"},
                                   3, &lines);
  std::vector<JudgmentRecord> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f[0].empty() || f[1].empty() || f[2].empty()) {
      throw DataError(std::string(origin) + ":" + std::to_string(lines[i]) +
                      ": empty field");
    }
    out.push_back({f[0], f[1], f[2]});
  }
  return out;
}

std::vector<PairwiseOutcome> parse_outcomes_csv(std::string_view text,
                                                std::string_view origin) {
  std::vector<std::size_t> lines;
  const auto rows = parse_csv_rows(
      text, origin, {"item_id", "result", "category", "modality"}, 2, &lines);
  std::vector<PairwiseOutcome> out;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& f = rows[i];
    const std::string where = std::string(origin) + ":" + std::to_string(lines[i]);
    if (f[0].empty()) throw DataError(where + ": empty item_id");
    if (!ids.insert(f[0]).second) {
      throw DataError(where + ": item '" + f[0] + "' has a second result");
    }
    PairwiseOutcome o;
    o.item_id = f[0];
    try {
      o.result = parse_outcome(f[1]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    o.category = f[2];
    o.modality = f[3];
    if (!o.modality.empty() && o.modality != "mixed" && o.modality != "text") {
      throw DataError(where + ": modality must be mixed or text");
    }
    out.push_back(std::move(o));
  }
  return out;
}

std::vector<JudgmentRecord> read_judgments_csv(const std::filesystem::path& path) {
  return parse_judgments_csv(slurp(path), path.string());
}

std::vector<PairwiseOutcome> read_outcomes_csv(const std::filesystem::path& path) {
  return parse_outcomes_csv(slurp(path), path.string());
}

}  // namespace chamtoy
