// Acceptance runner: the unit suites grouped into numbered criteria, plus the
// end-to-end trend experiments and a determinism check. Prints one PASS/FAIL
// line per criterion and exits nonzero if any criterion fails.

#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "pinmt/decode.hpp"
#include "pinmt/experiment.hpp"

namespace pinmt {
namespace {

struct Criterion {
  Criterion(int i, std::string t, std::vector<std::string> p) : id(i), title(std::move(t)), patterns(std::move(p)) {}
  int id;
  std::string title;
  std::vector<std::string> patterns;  // gtest-style globs over "Suite.Name"
  std::size_t passed = 0, failed = 0;
  double seconds = 0;
  std::vector<std::string> notes;
};

std::vector<Criterion>& criteria() {
  static std::vector<Criterion> c = {
      {1,
       "gradient checks",
       {"Seeds/PrimitiveGradients.*", "GradCheck.*", "Backward.LayerNormReluSumMatchesFiniteDifferences",
        "Seeds/CompositeGradient.*", "AllLearnable/ConverterGradient.*", "AllKinds/FusionGradient.*",
        "FusionGradient.*", "Cosine.MatchesFiniteDifferences", "Mse.MatchesFiniteDifferences"}},
      {2,
       "degenerate equivalences",
       {"DegenerateEquivalence.*", "FusionEndpoints.*", "Converter.Vanilla", "Converter.ScalarMixHalves",
        "Converter.ConcatLinearBlockSelection", "Encoder.CollapsesToLayerNormWhenSublayersAreZero",
        "Decoder.CollapsesWhenCrossValueAndFfnAreZero", "Beam.WidthOneEqualsGreedyOnRandomModels"}},
      {3, "loss oracles", {"SmoothedCrossEntropy.HandValues", "Cosine.Examples", "TotalLoss.Examples"}},
      {4,
       "optimization identities",
       {"Schedule.*", "AdamStep.*", "Train.ZeroRhoFreezesPlmOverHundredSteps", "Train.RhoScalesPlmUpdates"}},
      {5,
       "decoding and BLEU oracles",
       {"Beam.MatchesExhaustiveSearchOnToyTable", "Bleu.DerivedExample", "Bleu.MatchesOracleOnRandomCorpora",
        "Bleu.IdentityAndDisjoint", "BleuTarget.*"}},
      {6,
       "checkpoint round trip",
       {"Checkpoint.RoundTripIsByteIdentical", "Checkpoint.EvaluationIsUnchangedAfterLoad",
        "Checkpoint.FloatValuesRoundTrip", "Checkpoint.CorruptionIsDetected"}},
      {7, "end-to-end trends", {"Trend.*"}},
      {8,
       "determinism",
       {"Determinism.*", "Cli.EchoedConfigReproducesRowExactly", "Cli.GenDataIsByteIdentical",
        "Train.SameSeedSameParameters", "Checkpoint.ResumedTrainingFollowsTheSameTrajectory",
        "Synthetic.SameSeedSameCorpora", "Beam.DecodingIsDeterministic"}},
  };
  return c;
}

void note(int id, const std::string& text) {
  criteria().at(static_cast<std::size_t>(id - 1)).notes.push_back(text);
  std::cout << "  [" << id << "] " << text << "\n" << std::flush;
}

bool glob(const char* p, const char* s) {
  if (*p == '\0') return *s == '\0';
  if (*p == '*') return glob(p + 1, s) || (*s && glob(p, s + 1));
  return *s && *p == *s && glob(p + 1, s + 1);
}

class CriterionListener : public testing::EmptyTestEventListener {
  void OnTestEnd(const testing::TestInfo& info) override {
    const std::string name = std::string(info.test_suite_name()) + "." + info.name();
    for (auto& c : criteria())
      for (const auto& p : c.patterns)
        if (glob(p.c_str(), name.c_str())) {
          (info.result()->Passed() ? c.passed : c.failed) += 1;
          c.seconds += static_cast<double>(info.result()->elapsed_time()) / 1000.0;
          break;
        }
  }
};

// ---------------------------------------------------------------------------
// Criterion 5: the literal target for the derived BLEU example.

TEST(BleuTarget, DerivedCorpusHitsQuotedValue) {
  const std::vector<std::string> h{"a", "b", "c", "d", "e", "f", "g"}, r{"a", "b", "c", "d", "e", "f", "h"};
  const double score = bleu<std::string>({h}, {r});
  const double product = 100 * std::pow(6.0 / 7 * 5.0 / 6 * 4.0 / 5 * 3.0 / 4, 0.25);
  char buf[160];
  std::snprintf(buf, sizeof buf, "derived example scores %.4f, closed form of its precisions %.4f, target 77.45", score,
                product);
  note(5, buf);
  EXPECT_NEAR(score, 77.45, 0.05);
}

// ---------------------------------------------------------------------------
// Criterion 7: seeded end-to-end runs on the synthetic rare-word task.

const fs::path kOut = "acceptance_out";
const std::vector<std::string> kSeeds = {"1", "2", "3"};

struct TrendRuns {
  std::map<std::string, std::vector<double>> bleu;  // config label -> per-seed test BLEU
  std::string error;
};

RunConfig trend_base() {
  RunConfig c;
  c.set("paths.out", kOut.string());
  return c;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string fmt_runs(const std::string& label, const std::vector<double>& v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << label << " mean " << mean(v) << " [";
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  os << "]";
  return os.str();
}

TrendRuns run_trends() {
  TrendRuns out;
  try {
    fs::remove_all(kOut);
    std::ostream& log = std::cout;
    auto base = trend_base();
    auto task = [&](RunConfig c, const std::string& t) {
      c.set("task", t);
      const auto t0 = std::chrono::steady_clock::now();
      auto rows = run_task(c, log);
      log << "  (" << t << " took " << seconds_since(t0) << " s)\n" << std::flush;
      return rows;
    };
    task(base, "gen-data");
    task(base, "pretrain-plm");
    for (const auto& seed : kSeeds) {
      auto plain = base;
      plain.set("converter", "none");
      plain.set("seed", seed);
      out.bleu["plain"].push_back(task(plain, "train").at(0).bleu);

      auto best = base;
      best.parse("converter=concat_linear\nfusion=addition\nalignment.kind=cosine\nalignment.site=decoder\n"
                 "alignment.sign_mode=maximize_alignment\nrho=0.01\n");
      best.set("seed", seed);
      out.bleu["best"].push_back(task(best, "train").at(0).bleu);

      auto dual = base;
      dual.set("seed", seed);
      const auto rows = task(dual, "dual-train");
      out.bleu["bidirectional only"].push_back(rows.at(0).bleu);
      out.bleu["dual-step"].push_back(rows.at(1).bleu);
    }
    // Vanilla integration at rho 0.01 and 1 as an ablation grid.
    auto sweep = base;
    sweep.parse("grid.rho = 0.01, 1\ngrid.seeds = 1, 2, 3\n");
    const auto rows = task(sweep, "ablate");
    for (const auto& rho : {"0.01", "1"})
      for (const auto& seed : kSeeds) {
        auto cell = base;
        cell.set("task", "train");
        cell.set("rho", rho);
        cell.set("seed", seed);
        const auto id = run_id_for(cell);
        for (const auto& r : rows)
          if (r.run_id == id) out.bleu[std::string("vanilla rho=") + rho].push_back(r.bleu);
      }
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

const TrendRuns& trends() {
  static const TrendRuns r = run_trends();
  return r;
}

const std::vector<double>& runs_of(const std::string& label) {
  static const std::vector<double> none;
  auto it = trends().bleu.find(label);
  return it == trends().bleu.end() ? none : it->second;
}

void expect_complete(const std::vector<std::string>& labels) {
  ASSERT_TRUE(trends().error.empty()) << trends().error;
  for (const auto& l : labels) ASSERT_EQ(runs_of(l).size(), kSeeds.size()) << l;
}

TEST(Trend, VanillaIntegrationBeatsPlainTransformer) {
  expect_complete({"plain", "vanilla rho=0.01"});
  note(7, "(a) " + fmt_runs("vanilla", runs_of("vanilla rho=0.01")) + " vs " + fmt_runs("plain", runs_of("plain")));
  EXPECT_GT(mean(runs_of("vanilla rho=0.01")), mean(runs_of("plain")));
}

TEST(Trend, BestConfigurationAtLeastVanilla) {
  expect_complete({"best", "vanilla rho=0.01"});
  note(7, "(b) " + fmt_runs("best", runs_of("best")) + " vs " + fmt_runs("vanilla", runs_of("vanilla rho=0.01")));
  EXPECT_GE(mean(runs_of("best")), mean(runs_of("vanilla rho=0.01")));
}

TEST(Trend, SmallPlmRateBeatsFullRate) {
  expect_complete({"vanilla rho=0.01", "vanilla rho=1"});
  note(7, "(c) " + fmt_runs("rho=0.01", runs_of("vanilla rho=0.01")) + " vs " +
              fmt_runs("rho=1", runs_of("vanilla rho=1")));
  EXPECT_GT(mean(runs_of("vanilla rho=0.01")), mean(runs_of("vanilla rho=1")));
}

TEST(Trend, DualStepFineTuningAtLeastBidirectionalPhase) {
  expect_complete({"dual-step", "bidirectional only"});
  note(7, "(d) " + fmt_runs("fine-tuned", runs_of("dual-step")) + " vs " +
              fmt_runs("bidirectional only", runs_of("bidirectional only")));
  EXPECT_GE(mean(runs_of("dual-step")), mean(runs_of("bidirectional only")));
}

// ---------------------------------------------------------------------------
// Criterion 8: a full-size 64-bit run repeated, and repeated from its echo.

TEST(Determinism, RepeatedRunReproducesResultRow) {
  const fs::path out = "acceptance_determinism";
  fs::remove_all(out);
  RunConfig c;
  c.parse("paths.out=" + out.string() +
          "\nprecision=double\nplm.steps=20\nsteps=30\nbeam.width=2\n"
          "converter=concat_linear\nfusion=addition\nalignment.kind=cosine\nrho=0.01\n");
  std::ostringstream log;
  auto run = [&](RunConfig cc, const std::string& t) {
    cc.set("task", t);
    return run_task(cc, log);
  };
  run(c, "gen-data");
  run(c, "pretrain-plm");
  const auto first = run(c, "train").at(0);
  const auto second = run(c, "train").at(0);
  RunConfig echoed;
  echoed.parse_file((out / "runs" / first.run_id / "config.txt").string());
  const auto third = run_task(echoed, log).at(0);
  const auto dual_a = run(c, "dual-train"), dual_b = run(c, "dual-train");
  note(8, "row " + first.reproducible_part());
  EXPECT_EQ(first.reproducible_part(), second.reproducible_part());
  EXPECT_EQ(first.reproducible_part(), third.reproducible_part());
  ASSERT_EQ(dual_a.size(), 2u);
  ASSERT_EQ(dual_b.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(dual_a[i].reproducible_part(), dual_b[i].reproducible_part());
}

}  // namespace
}  // namespace pinmt

int main(int argc, char** argv) {
  using pinmt::criteria;
  std::string filter;
  for (const auto& c : criteria())
    for (const auto& p : c.patterns) filter += (filter.empty() ? "" : ":") + p;
  testing::GTEST_FLAG(filter) = filter;
  testing::InitGoogleTest(&argc, argv);
  testing::UnitTest::GetInstance()->listeners().Append(new pinmt::CriterionListener);
  const int rc = RUN_ALL_TESTS();
  std::cout << "\n";
  bool all = true;
  for (const auto& c : criteria()) {
    const bool ok = c.failed == 0 && c.passed > 0;
    all = all && ok;
    std::printf("criterion %d %s: %s (%zu passed, %zu failed, %.1f s)\n", c.id, ok ? "PASS" : "FAIL", c.title.c_str(),
                c.passed, c.failed, c.seconds);
    for (const auto& n : c.notes) std::printf("    %s\n", n.c_str());
  }
  return all && rc == 0 ? 0 : 1;
}
