#include <algorithm>
#include <map>
#include <set>

#include "chamtoy/evalkit.hpp"
#include "chamtoy/random.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace chamtoy;
using chamtoy::testing::fixture;

namespace {

struct Golden {
  const char* group;
  std::size_t w, t, l;
  double pct;
};

// Appendix tables, one block per comparison file.
const std::map<std::string, std::vector<Golden>> kTables{
    {"appendix_gemini_plus.csv",
     {{"Overall", 435, 362, 251, 58.8}, {"Advice", 48, 35, 24, 61.2}, {"Article", 14, 14, 4, 65.6},
      {"Brainstorming", 101, 60, 34, 67.2}, {"Comparison", 41, 38, 22, 59.4}, {"Explanation", 65, 46, 40, 58.3},
      {"How-to", 53, 51, 27, 59.9}, {"Hypothetical", 17, 24, 18, 49.2}, {"Identification", 39, 33, 25, 57.2},
      {"Other", 24, 17, 14, 59.1}, {"Reasoning", 7, 8, 7, 50.0}, {"Report", 16, 22, 19, 47.4},
      {"Story", 10, 14, 17, 41.5}, {"mixed", 194, 145, 102, 60.4}, {"text", 241, 217, 149, 57.6}}},
    {"appendix_gpt4v_plus.csv",
     {{"Overall", 375, 331, 342, 51.6}, {"Advice", 54, 27, 26, 63.1}, {"Article", 9, 11, 12, 45.3},
      {"Brainstorming", 78, 57, 60, 54.6}, {"Comparison", 35, 35, 31, 52.0}, {"Explanation", 53, 56, 42, 53.6},
      {"How-to", 49, 46, 36, 55.0}, {"Hypothetical", 23, 19, 17, 55.1}, {"Identification", 31, 26, 40, 45.4},
      {"Other", 16, 13, 26, 40.9}, {"Reasoning", 11, 5, 6, 61.4}, {"Report", 16, 21, 20, 46.5},
      {"Story", 0, 15, 26, 18.3}, {"mixed", 149, 119, 173, 47.3}, {"text", 226, 212, 169, 54.7}}},
    {"appendix_gemini.csv",
     {{"Overall", 561, 327, 160, 69.1}, {"Advice", 59, 25, 23, 66.8}, {"Article", 18, 11, 3, 73.4},
      {"Brainstorming", 133, 42, 20, 79.0}, {"Comparison", 54, 29, 18, 67.8}, {"Explanation", 78, 51, 22, 68.5},
      {"How-to", 65, 42, 24, 65.6}, {"Hypothetical", 27, 26, 6, 67.8}, {"Identification", 45, 30, 22, 61.9},
      {"Other", 27, 23, 5, 70.0}, {"Reasoning", 11, 6, 5, 63.6}, {"Report", 30, 21, 6, 71.1},
      {"Story", 14, 21, 6, 59.8}, {"mixed", 240, 123, 78, 68.4}, {"text", 321, 204, 82, 69.7}}},
    {"appendix_gpt4v.csv",
     {{"Overall", 482, 329, 237, 61.7}, {"Advice", 53, 30, 24, 63.6}, {"Article", 18, 9, 5, 70.3},
      {"Brainstorming", 107, 53, 35, 68.5}, {"Comparison", 44, 35, 22, 60.9}, {"Explanation", 75, 36, 40, 61.6},
      {"How-to", 51, 49, 31, 57.6}, {"Hypothetical", 20, 25, 14, 55.1}, {"Identification", 40, 29, 28, 56.2},
      {"Other", 20, 22, 13, 56.4}, {"Reasoning", 10, 6, 6, 59.1}, {"Report", 25, 18, 14, 59.6},
      {"Story", 19, 17, 5, 67.1}, {"mixed", 191, 125, 125, 57.5}, {"text", 291, 204, 112, 64.7}}},
};

// Brute-force alpha: every ordered pair of labels from different annotators
// on the same item, weighted 1/(m_u - 1).
double alpha_oracle(const std::vector<JudgmentRecord>& recs) {
  std::map<std::string, std::vector<std::string>> by_item;
  for (const auto& r : recs) by_item[r.item_id].push_back(r.label);
  std::map<std::pair<std::string, std::string>, double> o;
  for (const auto& [item, labels] : by_item) {
    const double m = static_cast<double>(labels.size());
    if (m < 2) continue;
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t j = 0; j < labels.size(); ++j)
        if (i != j) o[{labels[i], labels[j]}] += 1 / (m - 1);
  }
  std::map<std::string, double> nc;
  double n = 0;
  for (const auto& [k, v] : o) {
    nc[k.first] += v;
    n += v;
  }
  double dis_o = 0, dis_e = 0;
  for (const auto& [k, v] : o)
    if (k.first != k.second) dis_o += v;
  for (const auto& [a, na] : nc)
    for (const auto& [b, nb] : nc)
      if (a != b) dis_e += na * nb;
  dis_o /= n;
  dis_e /= n * (n - 1);
  return 1 - dis_o / dis_e;
}

std::vector<JudgmentRecord> random_judgments(Rng& rng, std::size_t items, std::size_t raters, std::size_t labels,
                                             double agree) {
  std::vector<JudgmentRecord> out;
  for (std::size_t i = 0; i < items; ++i) {
    const auto truth = rng.below(labels);
    for (std::size_t a = 0; a < raters; ++a) {
      if (rng.uniform() < 0.15) continue;
      const auto lab = rng.uniform() < agree ? truth : rng.below(labels);
      out.push_back({"i" + std::to_string(i), "r" + std::to_string(a), "L" + std::to_string(lab)});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("majority vote with earliest tie-break") {
  using V = std::vector<std::string>;
  CHECK(maj_at_n(V{"4", "5", "4"}) == "4");
  CHECK(maj_at_n(V{"7"}) == "7");
  CHECK(maj_at_n(V{"a", "b"}) == "a");
  CHECK(maj_at_n(V{"b", "a", "a", "b", "c"}) == "b");
  CHECK(maj_at_n(V{"x", "y", "y"}) == "y");
  CHECK_THROWS(maj_at_n(V{}));
}

TEST_CASE("win rate arithmetic") {
  WinCounts c{435, 362, 251};
  CHECK(c.win_rate() == doctest::Approx(616.0 / 1048).epsilon(1e-15));
  CHECK(std::round(c.win_rate() * 1000) == 588);
  CHECK(WinCounts{0, 15, 26}.win_rate() == doctest::Approx(7.5 / 41).epsilon(1e-15));
  CHECK(std::round(WinCounts{0, 15, 26}.win_rate() * 1000) == 183);
  CHECK_THROWS_AS(WinCounts{}.win_rate(), DataError);
  CHECK(parse_outcome("tie") == Outcome::Tie);
  CHECK_THROWS_AS(parse_outcome("draw"), DataError);
}

TEST_CASE("appendix tables reproduce from the fixtures") {
  for (const auto& [file, rows] : kTables) {
    CAPTURE(file);
    const auto outcomes = read_outcomes_csv(fixture(file));
    CHECK(outcomes.size() == 1048);
    std::map<std::string, BreakdownRow> got;
    for (auto by : {GroupBy::Category, GroupBy::Modality})
      for (const auto& r : breakdown(outcomes, by).rows) got[r.group] = r;
    got["Overall"] = {"Overall", tally(outcomes), win_rate(outcomes)};
    for (const auto& g : rows) {
      CAPTURE(g.group);
      REQUIRE(got.count(g.group));
      const auto& r = got[g.group];
      CHECK(r.counts.wins == g.w);
      CHECK(r.counts.ties == g.t);
      CHECK(r.counts.losses == g.l);
      CHECK(std::abs(100 * r.win_rate - g.pct) <= 0.05 + 1e-9);
    }
    CHECK(got.size() == rows.size());
  }
}

TEST_CASE("reversing outcomes complements the win rate") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<PairwiseOutcome> o;
    for (std::size_t i = 0, n = 1 + rng.below(50); i < n; ++i)
      o.push_back({"x" + std::to_string(i), static_cast<Outcome>(rng.below(3)), "c", ""});
    CHECK(win_rate(reversed(o)) == doctest::Approx(1 - win_rate(o)).epsilon(1e-14));
    const auto b = breakdown(o, GroupBy::Category);
    REQUIRE(b.rows.size() == 1);
    CHECK(b.rows[0].win_rate == win_rate(o));
  }
}

TEST_CASE("breakdown notes empty expected groups and skips untagged items") {
  const std::vector<PairwiseOutcome> o{{"1", Outcome::Win, "Story", ""}, {"2", Outcome::Loss, "Advice", "text"}};
  const std::vector<std::string> expected{"Advice", "Report", "Story"};
  const auto b = breakdown(o, GroupBy::Category, expected);
  CHECK(b.rows.size() == 2);
  REQUIRE(b.notes.size() == 1);
  CHECK(b.notes[0].find("Report") != std::string::npos);
  const auto m = breakdown(o, GroupBy::Modality);
  REQUIRE(m.rows.size() == 1);
  CHECK(m.rows[0].group == "text");
  const auto table = format_win_table(o, "t");
  CHECK(table.find("Story") != std::string::npos);
  CHECK(win_table_csv(o).rfind("group,wins,ties,losses,win_rate", 0) == 0);
}

TEST_CASE("alpha on hand-enumerated cases") {
  // {(A,A),(A,B)}: o_AA = 2, o_AB = o_BA = 1, n_A = 3, n_B = 1, n = 4.
  // D_o = 2/4, D_e = 2*3*1/(4*3) = 1/2, alpha = 0.
  const std::vector<JudgmentRecord> hand{{"1", "a", "A"}, {"1", "b", "A"}, {"2", "a", "A"}, {"2", "b", "B"}};
  CHECK(std::abs(krippendorff_alpha(hand)) < 1e-15);
  // Binary maximal disagreement: D_o = 1, D_e = 2/3, alpha = -1/2.
  const std::vector<JudgmentRecord> split{{"1", "a", "A"}, {"1", "b", "B"}, {"2", "a", "B"}, {"2", "b", "A"}};
  CHECK(krippendorff_alpha(split) == doctest::Approx(-0.5).epsilon(1e-15));
  const auto perfect = read_judgments_csv(fixture("judgments_perfect.csv"));
  CHECK(krippendorff_alpha(perfect) == 1.0);
  const std::vector<JudgmentRecord> same{{"1", "a", "A"}, {"1", "b", "A"}};
  CHECK(krippendorff_alpha(same) == 1.0);
  CHECK_THROWS_AS(krippendorff_alpha(std::vector<JudgmentRecord>{{"1", "a", "A"}, {"2", "a", "B"}}), DataError);
  CHECK_THROWS_AS(krippendorff_alpha(std::vector<JudgmentRecord>{{"1", "a", "A"}, {"1", "a", "B"}}), DataError);
}

TEST_CASE("alpha matches the brute-force oracle and its invariances") {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    auto recs = random_judgments(rng, 5 + rng.below(30), 2 + rng.below(4), 2 + rng.below(4), rng.uniform());
    double a;
    try {
      a = krippendorff_alpha(recs);
    } catch (const DataError&) {
      continue;
    }
    CHECK(a == doctest::Approx(alpha_oracle(recs)).epsilon(1e-12));
    // Item order and annotator names do not matter.
    auto shuffled = recs;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    for (auto& r : shuffled) r.annotator_id = "z" + r.annotator_id;
    CHECK(krippendorff_alpha(shuffled) == doctest::Approx(a).epsilon(1e-12));
    // Duplicating every item keeps D_o and rescales D_e by 2(n-1)/(2n-1),
    // so 1 - alpha_dup = (2n-1)/(2n-2) * (1 - alpha).
    auto dup = recs;
    for (auto r : recs) {
      r.item_id += "-copy";
      dup.push_back(r);
    }
    std::map<std::string, int> m;
    for (const auto& r : recs) ++m[r.item_id];
    double n = 0;
    for (const auto& [k, c] : m) if (c >= 2) n += c;
    CHECK(1 - krippendorff_alpha(dup) == doctest::Approx((2 * n - 1) / (2 * n - 2) * (1 - a)).epsilon(1e-12));
  }
}

TEST_CASE("bootstrap interval") {
  const auto sample = read_judgments_csv(fixture("judgments_sample.csv"));
  const auto r = bootstrap_ci(sample);
  CHECK(r.iterations == 1000);
  CHECK(kDefaultBootstrapIterations == 1000);
  CHECK(r.point == krippendorff_alpha(sample));
  CHECK(r.low <= r.point);
  CHECK(r.point <= r.high);
  CHECK(r.low < r.high);
  const auto again = bootstrap_ci(sample);
  CHECK(again.low == r.low);
  CHECK(again.high == r.high);
  const auto other = bootstrap_ci(sample, 1000, 0.95, 9);
  CHECK((other.low != r.low || other.high != r.high));
  const auto narrow = bootstrap_ci(sample, 1000, 0.5);
  CHECK(narrow.low >= r.low);
  CHECK(narrow.high <= r.high);
  const auto perfect = bootstrap_ci(read_judgments_csv(fixture("judgments_perfect.csv")), 200);
  CHECK(perfect.low == 1.0);
  CHECK(perfect.high == 1.0);
  CHECK_THROWS(bootstrap_ci(sample, 0));
  CHECK_THROWS(bootstrap_ci(sample, 10, 1.5));
}

TEST_CASE("csv errors carry line numbers") {
  auto expect = [](auto fn, const std::string& needle) {
    try {
      fn();
      FAIL("expected a data error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  expect([] { parse_outcomes_csv("item_id,result,category,modality\n1,win,a,mixed\n2,draw,a,text\n", "o.csv"); },
         "o.csv:3");
  expect([] { parse_outcomes_csv("item_id,result,category,modality\n1,win,a,mixed\n1,tie,a,mixed\n", "o.csv"); },
         "o.csv:3");
  expect([] { parse_outcomes_csv("item_id,result,category,modality\n1,win,a,video\n", "o.csv"); }, "o.csv:2");
  expect([] { parse_outcomes_csv("wrong,header\n", "o.csv"); }, "o.csv:1");
  expect([] { parse_judgments_csv("item_id,annotator_id,label\n1,a,A\n1,b\n", "j.csv"); }, "j.csv:3");
  expect([] { parse_judgments_csv("item_id,annotator_id,label\n1,a,\n", "j.csv"); }, "j.csv:2");
  CHECK_THROWS_AS(read_outcomes_csv(fixture("missing.csv")), DataError);
}
