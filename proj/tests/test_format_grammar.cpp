#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "lookback/format_grammar.hpp"
#include "lookback/templates.hpp"

using namespace lookback;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(ExtractBoxed, SimpleAndNested) {
  EXPECT_EQ(extract_boxed("\\boxed{D}"), "D");
  EXPECT_EQ(extract_boxed("x \\boxed{\\frac{1}{2}} y"), "\\frac{1}{2}");
  EXPECT_EQ(extract_boxed("\\boxed{1} then \\boxed{2}"), "2");
  EXPECT_EQ(extract_boxed("\\boxed{a\\{b}"), "a\\{b");
  EXPECT_FALSE(extract_boxed("no box here"));
  EXPECT_FALSE(extract_boxed("\\boxed{unbalanced"));
}

TEST(ParseRollout, BackFormat) {
  auto p = parse_rollout("<think> a </think> <back> checked the picture </back> <think> b </think> \\boxed{A}");
  EXPECT_EQ(p.format_class, FormatClass::BackFormat);
  EXPECT_TRUE(p.back_trigger);
  EXPECT_EQ(p.boxed_answer, "A");
  ASSERT_EQ(p.segments.size(), 3u);
  EXPECT_EQ(p.count(SegmentKind::Back), 1u);
  EXPECT_EQ(p.segments[1].text, " checked the picture ");
}

TEST(ParseRollout, CharSpansPointAtContent) {
  const std::string text = "<think>ab</think><back>verify it now</back><think>c</think>\\boxed{1}";
  auto p = parse_rollout(text);
  ASSERT_EQ(p.format_class, FormatClass::BackFormat);
  for (const auto& s : p.segments) {
    EXPECT_EQ(text.substr(s.char_span.start, s.char_span.end - s.char_span.start), s.text);
  }
}

TEST(ParseRollout, CotFormat) {
  auto p = parse_rollout("<think> reasoning </think>\n\\boxed{42}");
  EXPECT_EQ(p.format_class, FormatClass::CoTFormat);
  EXPECT_FALSE(p.back_trigger);
  EXPECT_EQ(p.boxed_answer, "42");
  auto two = parse_rollout("<think> a </think><think> b </think> \\boxed{x}");
  EXPECT_EQ(two.format_class, FormatClass::CoTFormat);
}

TEST(ParseRollout, MultipleBackRounds) {
  auto p = parse_rollout(
      "<think>a</think><back>look again here</back><think>b</think><back>and once more</back><think>c</think>"
      "\\boxed{B}");
  EXPECT_EQ(p.format_class, FormatClass::BackFormat);
  EXPECT_EQ(p.count(SegmentKind::Back), 2u);
}

TEST(ParseRollout, EmptyBackIsDemoted) {
  auto p = parse_rollout("<think> a </think> <back></back> <think> b </think> \\boxed{A}");
  EXPECT_EQ(p.format_class, FormatClass::CoTFormat);
  EXPECT_FALSE(p.back_trigger);
  auto spaces = parse_rollout("<think> a </think> <back>   \n </back> <think> b </think> \\boxed{A}");
  EXPECT_EQ(spaces.format_class, FormatClass::CoTFormat);
  auto short_back = parse_rollout("<think> a </think> <back>ok yes</back> <think> b </think> \\boxed{A}");
  EXPECT_EQ(short_back.format_class, FormatClass::CoTFormat);
  auto exactly = parse_rollout("<think> a </think> <back>12345678</back> <think> b </think> \\boxed{A}");
  EXPECT_EQ(exactly.format_class, FormatClass::BackFormat);
}

TEST(ParseRollout, MinBackCharsConfigurable) {
  GrammarConfig cfg;
  cfg.min_back_chars = 1;
  auto p = parse_rollout("<think> a </think> <back>ok</back> <think> b </think> \\boxed{A}", cfg);
  EXPECT_EQ(p.format_class, FormatClass::BackFormat);
}

TEST(ParseRollout, MixedEmptyAndRealBack) {
  auto p = parse_rollout(
      "<think>a</think><back></back><think>b</think><back>real verification</back><think>c</think>\\boxed{B}");
  EXPECT_EQ(p.format_class, FormatClass::BackFormat);
}

TEST(ParseRollout, InvalidShapes) {
  struct Case {
    const char* text;
    GrammarIssue issue;
  };
  const Case cases[] = {
      {"", GrammarIssue::Empty},
      {"   ", GrammarIssue::Empty},
      {"The answer is \\boxed{A}", GrammarIssue::StrayText},
      {"<think> a \\boxed{A}", GrammarIssue::UnclosedTag},
      {"<think> a <back> b </back> </think> \\boxed{A}", GrammarIssue::NestedTag},
      {"</think> \\boxed{A}", GrammarIssue::UnexpectedCloseTag},
      {"<back> looked at it </back> <think> a </think> \\boxed{A}", GrammarIssue::BadSegmentOrder},
      {"<think> a </think> <back> looked at it </back> \\boxed{A}", GrammarIssue::BadSegmentOrder},
      {"<think>a</think><back>looked at it</back><back>looked twice</back><think>b</think>\\boxed{A}",
       GrammarIssue::BadSegmentOrder},
      {"<think> a </think>", GrammarIssue::MissingBoxed},
      {"<think> a </think> The answer is A.", GrammarIssue::MissingBoxed},
      {"<think> a </think> \\boxed{A} and more", GrammarIssue::TextAfterBoxed},
  };
  for (const auto& c : cases) {
    auto p = parse_rollout(c.text);
    EXPECT_EQ(p.format_class, FormatClass::Invalid) << c.text;
    EXPECT_EQ(p.issue, c.issue) << c.text;
  }
}

TEST(ParseRollout, InvalidKeepsLastBox) {
  auto p = parse_rollout("answer: \\boxed{C}");
  EXPECT_EQ(p.format_class, FormatClass::Invalid);
  EXPECT_EQ(p.boxed_answer, "C");
}

TEST(ParseRollout, AnswerTailDelimiters) {
  for (const char* tail : {"\\(\\boxed{D}\\)", "\\[ \\boxed{D} \\]", "$\\boxed{D}$", "$$\\boxed{D}$$",
                           "\\boxed{D}.", "  \\boxed{D}  \n"}) {
    auto p = parse_rollout(std::string("<think> a </think> ") + tail);
    EXPECT_EQ(p.format_class, FormatClass::CoTFormat) << tail;
    EXPECT_EQ(p.boxed_answer, "D") << tail;
  }
  EXPECT_EQ(parse_rollout("<think> a </think> \\(\\boxed{D}").format_class, FormatClass::Invalid);
}

TEST(ParseRollout, CaseStudySamples) {
  const std::pair<const char*, const char*> expected[] = {
      {"sample1.txt", "D"}, {"sample2.txt", "Yes"}, {"sample3.txt", "no"}, {"sample4.txt", "B"}, {"sample5.txt", "1"},
  };
  for (const auto& [file, answer] : expected) {
    const auto text = read_file(std::string(LOOKBACK_FIXTURES) + "/samples/" + file);
    ASSERT_FALSE(text.empty()) << file;
    auto p = parse_rollout(text);
    EXPECT_EQ(p.format_class, FormatClass::BackFormat) << file;
    EXPECT_EQ(p.boxed_answer, answer) << file;
  }
}

TEST(ParseRollout, TemplateExamples) {
  const auto examples = template_format_examples();
  ASSERT_EQ(examples.size(), 8u);
  for (const auto& e : examples) {
    auto p = parse_rollout(e);
    EXPECT_EQ(p.format_class, FormatClass::BackFormat) << e;
    EXPECT_TRUE(p.boxed_answer == "final answer" || p.boxed_answer == "answer") << e;
  }
}

TEST(Render, PlainCot) {
  ControlSequence c;
  c.initial_answer = "B";
  const auto text = render_rollout(c);
  EXPECT_EQ(text, "<think> The figure suggests the answer is B. So the answer is B. </think> \\boxed{B}");
  EXPECT_EQ(parse_rollout(text).format_class, FormatClass::CoTFormat);
}

TEST(Render, RoundTripRandomSequences) {
  std::mt19937_64 rng(7);
  const char* answers[] = {"A", "B", "C", "D"};
  const char* backs[] = {"", "Looking back at the image, the marker shows a star.", "tiny", "The bars are 3 and 5."};
  for (int n = 0; n < 500; ++n) {
    ControlSequence c;
    c.template_id = rng() % 2 ? "semantic" : "solution";
    c.initial_answer = answers[rng() % 4];
    const int rounds = static_cast<int>(rng() % 4);
    for (int r = 0; r < rounds; ++r) {
      BackRound b{backs[rng() % 4], std::nullopt};
      if (rng() % 2) b.revised_answer = answers[rng() % 4];
      c.rounds.push_back(b);
    }
    c.truncated = rng() % 10 == 0;
    const auto p = parse_rollout(render_rollout(c));
    EXPECT_EQ(p.format_class, implied_format(c));
    if (!c.truncated) {
      EXPECT_EQ(p.boxed_answer, c.final_answer());
    }
  }
}

TEST(Render, UnknownTemplateThrows) {
  ControlSequence c;
  c.template_id = "nope";
  EXPECT_THROW(render_rollout(c), std::invalid_argument);
}
