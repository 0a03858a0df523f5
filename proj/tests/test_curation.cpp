#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "curation_oracle.hpp"
#include "lookback/annotator.hpp"
#include "lookback/curation.hpp"

using namespace lookback;

namespace {

std::vector<QuestionRecord> load_fixture() {
  std::ifstream in(std::string(LOOKBACK_FIXTURES) + "/curation_20.jsonl");
  auto res = load_rollout_dump(in);
  EXPECT_TRUE(res.errors.empty());
  return res.records;
}

ColdStartSample sample(int i, SampleLabel label) {
  return {"img/" + std::to_string(i) + ".png", "Question " + std::to_string(i) + "?",
          "<think> r </think> <back> look again now </back> <think> s </think> \\boxed{A}", label};
}

std::vector<ColdStartSample> pool(std::size_t corr, std::size_t ver) {
  std::vector<ColdStartSample> out;
  for (std::size_t i = 0; i < corr; ++i) out.push_back(sample(static_cast<int>(i), SampleLabel::Correction));
  for (std::size_t i = 0; i < ver; ++i) out.push_back(sample(static_cast<int>(corr + i), SampleLabel::Verification));
  return out;
}

const char* kCorrectCot = "<think> The chart has 3 bars. The tallest is B. So B. </think> \\boxed{B}";
const char* kWrongCot = "<think> The chart has 3 bars. The tallest is C. So C. </think> \\boxed{C}";

}  // namespace

TEST(CurationStats, MatchesFixtureOracle) {
  const auto records = load_fixture();
  ASSERT_EQ(records.size(), test_support::kCurationOracle.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto s = compute_stats(records[i]);
    const auto& o = test_support::kCurationOracle[i];
    EXPECT_EQ(s.question_id, o.id);
    EXPECT_NEAR(s.accuracy_mean, o.p, 1e-12) << o.id;
    EXPECT_NEAR(s.reward_variance, o.variance, 1e-12) << o.id;
    EXPECT_DOUBLE_EQ(s.correctness_variance, o.p * (1.0 - o.p));
  }
}

TEST(CurationSelection, MatchesFrozenOrder) {
  std::vector<SelectionStats> stats;
  for (const auto& r : load_fixture()) stats.push_back(compute_stats(r));
  const auto sel = select_questions(stats, {});
  ASSERT_EQ(sel.question_ids.size(), test_support::kCurationOrder.size());
  for (std::size_t i = 0; i < sel.question_ids.size(); ++i) EXPECT_EQ(sel.question_ids[i], test_support::kCurationOrder[i]);
  EXPECT_FALSE(sel.warning);
}

TEST(CurationSelection, MatchesPairwiseBruteForce) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<SelectionStats> stats;
    const int n = 2 + static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) {
      SelectionStats s;
      s.question_id = "q" + std::to_string(rng() % 50);
      s.accuracy_mean = static_cast<double>(rng() % 9) / 8.0;
      s.difficulty = 1.0 - s.accuracy_mean;
      s.reward_variance = static_cast<double>(rng() % 4) / 16.0;
      stats.push_back(s);
    }
    const auto sel = select_questions(stats, {});
    std::vector<SelectionStats> kept;
    for (const auto& s : stats) {
      if (s.accuracy_mean > 0.0 && s.accuracy_mean < 1.0) kept.push_back(s);
    }
    ASSERT_EQ(sel.question_ids.size(), kept.size());
    // position = number of candidates that beat it on (variance, difficulty, id)
    std::vector<std::string> expected(kept.size());
    std::vector<bool> used(kept.size(), false);
    for (std::size_t pos = 0; pos < kept.size(); ++pos) {
      for (std::size_t a = 0; a < kept.size(); ++a) {
        if (used[a]) continue;
        bool best = true;
        for (std::size_t b = 0; b < kept.size() && best; ++b) {
          if (used[b] || a == b) continue;
          const auto ka = std::make_tuple(-kept[a].reward_variance, -kept[a].difficulty, kept[a].question_id);
          const auto kb = std::make_tuple(-kept[b].reward_variance, -kept[b].difficulty, kept[b].question_id);
          if (kb < ka) best = false;
        }
        if (best) {
          expected[pos] = kept[a].question_id;
          used[a] = true;
          break;
        }
      }
    }
    EXPECT_EQ(sel.question_ids, expected);
  }
}

TEST(CurationSelection, TieBreaks) {
  std::vector<SelectionStats> s(3);
  s[0] = {"b", 0.5, 0.25, 0.25, 0.5};
  s[1] = {"a", 0.5, 0.25, 0.25, 0.5};
  s[2] = {"c", 0.25, 0.25, 0.1875, 0.75};
  const auto sel = select_questions(s, {});
  EXPECT_EQ(sel.question_ids, (std::vector<std::string>{"c", "a", "b"}));
}

TEST(CurationSelection, TopKAndWarning) {
  std::vector<SelectionStats> stats;
  for (const auto& r : load_fixture()) stats.push_back(compute_stats(r));
  SelectionPolicy pol;
  pol.top_k = 3;
  EXPECT_EQ(select_questions(stats, pol).question_ids, (std::vector<std::string>{"q05", "q14", "q18"}));
  pol.top_k = 40;
  const auto all = select_questions(stats, pol);
  EXPECT_EQ(all.question_ids.size(), 16u);
  EXPECT_TRUE(all.warning);
  EXPECT_THROW(select_questions({}, pol), std::invalid_argument);
}

TEST(Mixer, ExactCountsOnGrid) {
  for (std::size_t n : {10u, 100u, 1000u}) {
    for (double rr : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      const auto mixed = mix_reflection_rate(pool(n, n), rr, n, 7);
      ASSERT_EQ(mixed.size(), n);
      const auto corr = static_cast<std::size_t>(
          std::count_if(mixed.begin(), mixed.end(), [](const auto& s) { return s.label == SampleLabel::Correction; }));
      EXPECT_EQ(corr, static_cast<std::size_t>(std::llround(rr * static_cast<double>(n)))) << n << " " << rr;
    }
  }
}

TEST(Mixer, RoundsHalfToEven) {
  EXPECT_EQ(correction_count(0.5, 5), 2u);
  EXPECT_EQ(correction_count(0.5, 7), 4u);
  EXPECT_EQ(correction_count(0.3, 10), 3u);
}

TEST(Mixer, ShortfallThrows) {
  EXPECT_THROW(mix_reflection_rate(pool(2, 10), 0.5, 10, 0), MixError);
  EXPECT_THROW(mix_reflection_rate(pool(10, 2), 0.5, 10, 0), MixError);
  EXPECT_THROW(mix_reflection_rate(pool(10, 10), 1.5, 10, 0), MixError);
  EXPECT_EQ(max_mix_size(2, 10, 0.5), 5u);
}

TEST(Mixer, SeededAndReproducible) {
  const auto p = pool(30, 30);
  EXPECT_EQ(mix_reflection_rate(p, 0.3, 20, 5), mix_reflection_rate(p, 0.3, 20, 5));
  EXPECT_NE(mix_reflection_rate(p, 0.3, 20, 5), mix_reflection_rate(p, 0.3, 20, 6));
}

TEST(SftSerialization, RoundTripIsIdentity) {
  for (AnnotationMode mode : {AnnotationMode::Semantic, AnnotationMode::Solution}) {
    auto data = pool(3, 4);
    data[0].question = "Braces {x} and \"quotes\"\nand a newline";
    std::stringstream ss;
    serialize_sft(data, mode, ss);
    const auto back = load_sft(ss);
    EXPECT_EQ(back.samples, data);
    EXPECT_EQ(back.mode, mode);
  }
}

TEST(SftSerialization, RecordShape) {
  const auto j = sft_record(sample(1, SampleLabel::Correction), AnnotationMode::Semantic);
  EXPECT_EQ(j["messages"][0]["role"], "user");
  EXPECT_EQ(j["messages"][0]["content"], sft_user_content(AnnotationMode::Semantic, "Question 1?"));
  EXPECT_EQ(j["messages"][1]["role"], "assistant");
  EXPECT_EQ(j["images"][0], "img/1.png");
}

TEST(SftSerialization, BadLineReportsLineNumber) {
  std::stringstream ss;
  serialize_sft(pool(1, 1), AnnotationMode::Semantic, ss);
  ss << "{\"messages\": []}\n";
  try {
    load_sft(ss);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Validation, AcceptsVerificationAndCorrection) {
  const auto ok = validate_annotation(
      "<think> The chart has 3 bars. The tallest is B. </think> <back> Looking at the bars again. </back> "
      "<think> So B. </think> \\boxed{B}",
      AnnotationMode::Semantic, kCorrectCot, "B");
  EXPECT_TRUE(ok.validation.accepted);
  EXPECT_EQ(ok.sample->label, SampleLabel::Verification);

  const auto fix = validate_annotation(
      "<think> The chart has 3 bars. </think> <back> The tallest bar is actually B. </back> <think> So B. </think> "
      "\\boxed{B}",
      AnnotationMode::Semantic, kWrongCot, "B");
  EXPECT_TRUE(fix.validation.accepted);
  EXPECT_EQ(fix.sample->label, SampleLabel::Correction);
}

TEST(Validation, RejectionCodes) {
  struct Case {
    const char* response;
    const char* original;
    AnnotationMode mode;
    RejectionCode code;
  };
  const Case cases[] = {
      {"<think> The chart has 3 bars. </think> \\boxed{B}", kCorrectCot, AnnotationMode::Semantic,
       RejectionCode::NotBackFormat},
      {"<think> The chart has 3 bars. </think> <back> looking again </back> <think> C </think> \\boxed{C}",
       kWrongCot, AnnotationMode::Semantic, RejectionCode::AnswerMismatch},
      {"<think> The chart has 4 bars. The tallest is B. </think> <back> looking again </back> <think> So B. "
       "</think> \\boxed{B}",
       kCorrectCot, AnnotationMode::Semantic, RejectionCode::ReasoningModified},
      {"<think> The chart has 5 bars. </think> <back> looking again </back> <think> So B. </think> \\boxed{B}",
       kWrongCot, AnnotationMode::Semantic, RejectionCode::PrefixModified},
      {"<think> a </think> <back> looking again </back> <think> So B. </think> \\boxed{B}", "no think here",
       AnnotationMode::Semantic, RejectionCode::OriginalUnparseable},
  };
  for (const auto& c : cases) {
    const auto r = validate_annotation(c.response, c.mode, c.original, "B");
    EXPECT_FALSE(r.validation.accepted) << c.response;
    EXPECT_EQ(r.validation.code, c.code) << c.response;
    EXPECT_FALSE(r.sample);
  }
}

TEST(Validation, SolutionModeMayAppendRethinking) {
  const auto r = validate_annotation(
      "<think> The chart has 3 bars. The tallest is B. So B. </think> <back> The image confirms it. </back> "
      "<think> Based on both, the answer remains B. </think> \\boxed{B}",
      AnnotationMode::Solution, kCorrectCot, "B");
  EXPECT_TRUE(r.validation.accepted);
}

TEST(AnnotationRequest, RejectsRolloutWithBack) {
  QuestionRecord rec{"q", "img", "Q?", "B", {}};
  rec.rollouts.push_back({"<think> a </think> <back> looked again </back> <think> b </think> \\boxed{B}", {}});
  EXPECT_THROW(build_annotation_request(rec, 0, AnnotationMode::Semantic), AnnotationError);
  EXPECT_FALSE(choose_rollout(rec));
}

TEST(StubAnnotator, FixtureBecomesAllBackFormat) {
  for (AnnotationMode mode : {AnnotationMode::Semantic, AnnotationMode::Solution}) {
    StubAnnotator stub;
    CurationConfig cfg;
    cfg.mode = mode;
    const auto out = run_curation(load_fixture(), stub, cfg);
    EXPECT_EQ(out.accepted.size(), 16u);
    for (const auto& s : out.accepted) {
      EXPECT_EQ(parse_rollout(s.response).format_class, FormatClass::BackFormat) << s.response;
    }
    std::size_t corr = 0;
    for (const auto& s : out.dataset) corr += s.label == SampleLabel::Correction;
    EXPECT_EQ(corr, correction_count(0.5, out.dataset.size()));
    for (const auto& r : out.report) {
      if (!r.selected) EXPECT_EQ(r.outcome, "not_selected");
      else EXPECT_EQ(r.outcome.rfind("accepted:", 0), 0u) << r.outcome;
    }
  }
}

TEST(CannedAnnotator, RetriesThenRejects) {
  auto records = load_fixture();
  records.resize(3);  // q00..q02; only q02 is selected
  CannedAnnotator canned(std::map<std::string, std::string>{{"q02", "<think> not a back response </think> \\boxed{C}"}});
  CurationConfig cfg;
  cfg.retries = 2;
  const auto out = run_curation(records, canned, cfg);
  EXPECT_EQ(canned.calls("q02"), 3);
  EXPECT_EQ(out.report[2].outcome, "rejected:NOT_BACK_FORMAT");
  EXPECT_EQ(out.report[2].attempts, 3);
  EXPECT_TRUE(out.accepted.empty());
  EXPECT_FALSE(out.warnings.empty());
}

TEST(CannedAnnotator, UnknownIdPropagates) {
  auto records = load_fixture();
  CannedAnnotator canned;
  EXPECT_THROW(run_curation(records, canned, {}), AnnotatorError);
}

TEST(RolloutDump, SkipsBadLines) {
  std::stringstream ss;
  ss << "{\"question_id\": \"a\", \"question\": \"Q\", \"ground_truth\": \"A\", \"rollouts\": [\"x\"]}\n"
     << "not json\n"
     << "{\"question_id\": \"b\", \"question\": \"Q\", \"ground_truth\": \"A\", \"rollouts\": []}\n";
  const auto res = load_rollout_dump(ss);
  EXPECT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.errors.size(), 2u);
}
