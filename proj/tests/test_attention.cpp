#include <algorithm>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "lookback/attention.hpp"
#include "lookback/sim_env.hpp"

using namespace lookback;

namespace {

AttentionTrace make_trace(const std::vector<double>& ratios, std::vector<TraceSpan> spans = {}) {
  AttentionTrace t;
  t.meta = {"test", 16, "mean"};
  for (std::size_t i = 0; i < ratios.size(); ++i) t.tokens.push_back({i, "t" + std::to_string(i), ratios[i]});
  t.spans = std::move(spans);
  return t;
}

std::vector<DatasetRollout> texts(std::size_t backs, std::size_t total) {
  const std::string back = "<think> a </think> <back> looked at the picture </back> <think> b </think> \\boxed{A}";
  const std::string cot = "<think> a </think> \\boxed{A}";
  std::vector<DatasetRollout> out;
  for (std::size_t i = 0; i < total; ++i) out.push_back({i < backs ? back : cot, std::nullopt});
  return out;
}

}  // namespace

TEST(Smooth, ImpulseWithTruncatedEdges) {
  const auto s = smooth({0.0, 1.0, 0.0}, 3);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(s[2], 0.5);
}

TEST(Smooth, WindowOneIsIdentity) {
  const std::vector<double> x = {0.1, 0.7, 0.3, 0.25};
  EXPECT_EQ(smooth(x, 1), x);
}

TEST(Smooth, ConstantIsFixedPoint) {
  const std::vector<double> x(37, 0.2);
  for (std::size_t w : {1u, 3u, 5u, 11u, 75u}) EXPECT_EQ(smooth(x, w), x);
}

TEST(Smooth, BadInputs) {
  EXPECT_THROW(smooth({0.1}, 2), std::invalid_argument);
  EXPECT_THROW(smooth({0.1}, 0), std::invalid_argument);
  EXPECT_THROW(smooth({}, 3), std::invalid_argument);
}

TEST(Smooth, RangePropertyOnRandomTraces) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int n = 0; n < 1000; ++n) {
    std::vector<double> x(1 + rng() % 60);
    for (double& v : x) v = u(rng);
    const std::size_t w = 2 * (rng() % 8) + 1;
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    for (double v : smooth(x, w)) {
      EXPECT_GE(v, *lo);
      EXPECT_LE(v, *hi);
    }
  }
}

TEST(Elevation, HandMeans) {
  const auto t = make_trace({0.1, 0.1, 0.4, 0.4, 0.1}, {{"think", 0, 2}, {"back", 2, 4}});
  const auto r = back_elevation(t);
  EXPECT_NEAR(r.mean_in_back, 0.4, 1e-12);
  EXPECT_NEAR(r.mean_outside, 0.1, 1e-12);
  EXPECT_TRUE(r.elevated);
}

TEST(Elevation, FlatTraceNotElevated) {
  const auto r = back_elevation(make_trace({0.3, 0.3, 0.3}, {{"back", 1, 2}}));
  EXPECT_EQ(r.difference, 0.0);
  EXPECT_FALSE(r.elevated);
}

TEST(Elevation, ShiftInvariant) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 0.5);
  for (int n = 0; n < 200; ++n) {
    std::vector<double> x(10);
    for (double& v : x) v = u(rng);
    auto shifted = x;
    for (double& v : shifted) v += 0.25;
    const std::vector<TraceSpan> spans = {{"back", 3, 6}};
    EXPECT_NEAR(back_elevation(make_trace(x, spans)).difference,
                back_elevation(make_trace(shifted, spans)).difference, 1e-12);
  }
}

TEST(Elevation, MissingSpansThrow) {
  EXPECT_THROW(back_elevation(make_trace({0.1, 0.2})), std::invalid_argument);
  EXPECT_THROW(back_elevation(make_trace({0.1, 0.2}, {{"back", 0, 2}})), std::invalid_argument);
}

TEST(Elevation, SyntheticTracesAreElevated) {
  const std::string text =
      "<think> The marker looks round. Guess A. </think> <back> Looking back at the image, the marker shows star. "
      "</back> <think> So the answer is D. </think> \\boxed{D}";
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto r = back_elevation(synth_trace(text, seed));
    EXPECT_TRUE(r.elevated);
    EXPECT_GE(r.difference, 0.25);
  }
}

TEST(TraceIo, RoundTripAndValidation) {
  const auto t = make_trace({0.1, 0.5, 0.2}, {{"back", 1, 2}});
  std::stringstream ss;
  write_traces(ss, {t, t});
  const auto back = read_traces(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], t);

  auto bad = make_trace({0.1, 1.5});
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  auto overlap = make_trace({0.1, 0.2, 0.3}, {{"think", 0, 2}, {"back", 1, 3}});
  EXPECT_THROW(overlap.validate(), std::invalid_argument);
  std::stringstream junk("{\"meta\": {}}\n");
  EXPECT_THROW(read_traces(junk), FormatError);
}

TEST(TraceCsv, HeaderAndRows) {
  std::stringstream ss;
  write_trace_csv(ss, make_trace({0.0, 1.0, 0.0}, {{"back", 1, 2}}), 3);
  std::string comment, header, row;
  std::getline(ss, comment);
  std::getline(ss, header);
  std::getline(ss, row);
  EXPECT_EQ(comment.rfind("# model_id=test", 0), 0u);
  EXPECT_EQ(header, "token_index,raw_ratio,smoothed_ratio,span_label");
  EXPECT_EQ(row, "0,0,0.5,");
}

TEST(Trigger, SingleDatasetRate) {
  const auto rep = trigger_stats({{"MathVista", texts(87, 100)}});
  ASSERT_EQ(rep.datasets.size(), 1u);
  EXPECT_EQ(rep.datasets[0].back_triggered, 87u);
  EXPECT_DOUBLE_EQ(rep.datasets[0].trigger_rate(), 0.87);
  EXPECT_EQ(trigger_stats({{"x", texts(0, 10)}}).datasets[0].trigger_rate(), 0.0);
}

TEST(Trigger, MacroAverageOfFiveDatasets) {
  const auto rep = trigger_stats({{"MathVerse", texts(6201, 10000)},
                                  {"MathVision", texts(1121, 2000)},
                                  {"MathVista", texts(87, 100)},
                                  {"WeMath", texts(2563, 5000)},
                                  {"GeoMath", texts(561, 1000)}});
  EXPECT_NEAR(rep.macro_rate() * 100.0, 62.484, 1e-9);
  EXPECT_NEAR(rep.micro_rate(), (6201.0 + 1121 + 87 + 2563 + 561) / 18100.0, 1e-12);
}

TEST(Trigger, PermutationInvariant) {
  std::mt19937_64 rng(2);
  auto rolls = texts(13, 40);
  const double base = trigger_stats({{"d", rolls}}).datasets[0].trigger_rate();
  for (int n = 0; n < 1000; ++n) {
    std::shuffle(rolls.begin(), rolls.end(), rng);
    EXPECT_EQ(trigger_stats({{"d", rolls}}).datasets[0].trigger_rate(), base);
  }
}

TEST(SplitAccuracy, PartitionMeans) {
  std::vector<LabeledOutcome> o;
  for (int i = 0; i < 10000; ++i) o.push_back({true, i < 5414 ? 1.0 : 0.0});
  for (int i = 0; i < 10000; ++i) o.push_back({false, i < 5089 ? 1.0 : 0.0});
  const auto s = split_accuracy(o);
  EXPECT_NEAR(*s.acc_with_back, 0.5414, 1e-12);
  EXPECT_NEAR(*s.acc_without_back, 0.5089, 1e-12);
  EXPECT_NEAR(*s.delta, 0.0325, 1e-12);
}

TEST(SplitAccuracy, EmptyPartitionAbsent) {
  const auto s = split_accuracy({{true, 1.0}, {true, 0.0}});
  EXPECT_TRUE(s.acc_with_back);
  EXPECT_FALSE(s.acc_without_back);
  EXPECT_FALSE(s.delta);
  const auto same = split_accuracy({{true, 1.0}, {false, 1.0}});
  EXPECT_EQ(*same.delta, 0.0);
}

TEST(Aggregate, MathRows) {
  const auto cot = aggregate_scores(
      {{"MathVerse", 45.71}, {"MathVision", 25.49}, {"MathVista", 64.2}, {"WeMath", 60.46}, {"GeoMath", 45.61}});
  EXPECT_NEAR(*cot.avg_math, 48.294, 1e-9);
  EXPECT_FALSE(cot.avg_perception);
  EXPECT_NEAR(cot.avg_all, 48.294, 1e-9);
  const auto sem = aggregate_scores(
      {{"MathVerse", 50.5}, {"MathVision", 27.7}, {"MathVista", 71.6}, {"WeMath", 71.3}, {"GeoMath", 56.5}});
  EXPECT_NEAR(*sem.avg_math, 55.52, 1e-9);
}

TEST(Aggregate, OverallConventions) {
  const std::vector<std::pair<std::string, double>> row = {
      {"MathVerse", 46.3}, {"MathVision", 25.1}, {"MathVista", 68.2}, {"WeMath", 62.1},
      {"GeoMath", 45.6},   {"Hallusion", 65.0},  {"TallyQA", 75.5},   {"MME", 82.1}};
  const auto cat = aggregate_scores(row);
  EXPECT_NEAR(*cat.avg_math, 49.46, 1e-9);
  EXPECT_NEAR(*cat.avg_perception, 74.2, 1e-9);
  EXPECT_NEAR(cat.avg_all, (49.46 + 74.2) / 2.0, 1e-9);
  const auto flat = aggregate_scores(row, default_category_map(), OverallAverage::OfBenchmarks);
  EXPECT_NEAR(flat.avg_all, (46.3 + 25.1 + 68.2 + 62.1 + 45.6 + 65.0 + 75.5 + 82.1) / 8.0, 1e-9);
}

TEST(Aggregate, SingletonAndUnknown) {
  EXPECT_EQ(aggregate_scores({{"TallyQA", 71.0}}).avg_all, 71.0);
  EXPECT_THROW(aggregate_scores({{"ChartQA", 1.0}}), std::invalid_argument);
  EXPECT_THROW(aggregate_scores({}), std::invalid_argument);
}
