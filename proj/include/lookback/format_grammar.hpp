#pragma once

// Rollout grammar: <think>/<back> segmentation, format classification,
// \boxed{} extraction, and the inverse renderer used by the simulator.

#include <cctype>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lookback {

struct GrammarConfig {
  // Back segments with fewer non-whitespace bytes than this do not count.
  std::size_t min_back_chars = 8;
};

enum class SegmentKind { Think, Back };
enum class FormatClass { BackFormat, CoTFormat, Invalid };

inline std::string_view to_string(FormatClass c) {
  switch (c) {
    case FormatClass::BackFormat: return "BackFormat";
    case FormatClass::CoTFormat: return "CoTFormat";
    case FormatClass::Invalid: return "Invalid";
  }
  return "Invalid";
}

inline std::string_view to_string(SegmentKind k) {
  return k == SegmentKind::Think ? "think" : "back";
}

struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  bool operator==(const CharSpan&) const = default;
};

struct Segment {
  SegmentKind kind = SegmentKind::Think;
  std::string text;  // raw content between the tags
  CharSpan char_span;
  bool operator==(const Segment&) const = default;
};

/// Why a rollout was classified Invalid. `None` for Back/CoT rollouts.
enum class GrammarIssue {
  None,
  Empty,
  StrayText,
  UnclosedTag,
  NestedTag,
  UnexpectedCloseTag,
  BadSegmentOrder,
  MissingBoxed,
  TextAfterBoxed,
};

struct ParsedRollout {
  std::vector<Segment> segments;
  std::optional<std::string> boxed_answer;
  FormatClass format_class = FormatClass::Invalid;
  bool back_trigger = false;
  GrammarIssue issue = GrammarIssue::None;

  std::size_t count(SegmentKind kind) const {
    std::size_t n = 0;
    for (const auto& s : segments) n += (s.kind == kind);
    return n;
  }
};

namespace grammar_detail {

inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kBackOpen = "<back>";
inline constexpr std::string_view kBackClose = "</back>";
inline constexpr std::string_view kBoxed = "\\boxed{";

inline bool is_space(char c) {
  return std::isspace(static_cast<unsigned char>(c)) != 0;
}

inline std::size_t skip_space(std::string_view s, std::size_t i) {
  while (i < s.size() && is_space(s[i])) ++i;
  return i;
}

inline bool starts_with_at(std::string_view s, std::size_t i, std::string_view p) {
  return s.substr(i, p.size()) == p;
}

inline bool contains_structural_tag(std::string_view s) {
  for (auto tag : {kThinkOpen, kThinkClose, kBackOpen, kBackClose}) {
    if (s.find(tag) != std::string_view::npos) return true;
  }
  return false;
}

// Position one past the brace closing the group whose content starts at
// `content_begin`, or npos when the braces never balance.
inline std::size_t match_brace(std::string_view s, std::size_t content_begin) {
  int depth = 1;
  for (std::size_t i = content_begin; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size() && (s[i + 1] == '{' || s[i + 1] == '}')) {
      ++i;  // escaped brace
      continue;
    }
    if (s[i] == '{') ++depth;
    if (s[i] == '}' && --depth == 0) return i + 1;
  }
  return std::string_view::npos;
}

struct BoxedHit {
  std::size_t start;    // position of the backslash
  std::size_t end;      // one past the closing brace
  std::string content;
};

inline std::optional<BoxedHit> last_boxed(std::string_view s) {
  std::optional<BoxedHit> hit;
  std::size_t pos = s.find(kBoxed);
  while (pos != std::string_view::npos) {
    const std::size_t begin = pos + kBoxed.size();
    const std::size_t end = match_brace(s, begin);
    if (end != std::string_view::npos) {
      hit = BoxedHit{pos, end, std::string(s.substr(begin, end - 1 - begin))};
    }
    pos = s.find(kBoxed, pos + 1);
  }
  return hit;
}

inline std::size_t non_space_count(std::string_view s) {
  std::size_t n = 0;
  for (char c : s) n += !is_space(c);
  return n;
}

// Accepts the tail after the final </think>: an optional math-mode
// delimiter pair around one \boxed{...}, an optional period, whitespace.
inline bool parse_answer_tail(std::string_view tail, std::string& answer) {
  std::size_t i = skip_space(tail, 0);
  std::string_view closer;
  for (auto [open, close] : {std::pair<std::string_view, std::string_view>{"\\(", "\\)"},
                             {"\\[", "\\]"},
                             {"$$", "$$"},
                             {"$", "$"}}) {
    if (starts_with_at(tail, i, open)) {
      i = skip_space(tail, i + open.size());
      closer = close;
      break;
    }
  }
  if (!starts_with_at(tail, i, kBoxed)) return false;
  const std::size_t begin = i + kBoxed.size();
  const std::size_t end = match_brace(tail, begin);
  if (end == std::string_view::npos) return false;
  answer = std::string(tail.substr(begin, end - 1 - begin));
  i = skip_space(tail, end);
  if (!closer.empty()) {
    if (!starts_with_at(tail, i, closer)) return false;
    i = skip_space(tail, i + closer.size());
  }
  if (i < tail.size() && tail[i] == '.') i = skip_space(tail, i + 1);
  return i == tail.size();
}

}  // namespace grammar_detail

/// Content of the last balanced `\boxed{...}` in `text`, if any.
inline std::optional<std::string> extract_boxed(std::string_view text) {
  auto hit = grammar_detail::last_boxed(text);
  if (!hit) return std::nullopt;
  return hit->content;
}

/// Decomposes a rollout into think/back segments and classifies it.
///
/// Accepted shapes, whitespace between tags ignored:
///   Back:  Think (Back Think)+ \boxed{a}
///   CoT:   Think+ \boxed{a}
/// Consecutive Think segments are allowed; a Back must sit between two
/// Thinks. A rollout whose Back segments are all shorter than
/// `min_back_chars` is demoted to CoT. The boxed answer must follow the
/// final </think>, optionally wrapped in \( \), \[ \] or $ $. Any other
/// untagged text makes the rollout Invalid.
inline ParsedRollout parse_rollout(std::string_view text, const GrammarConfig& config = {}) {
  using namespace grammar_detail;
  ParsedRollout out;
  auto invalid = [&](GrammarIssue why) {
    out.format_class = FormatClass::Invalid;
    out.issue = why;
    out.back_trigger = false;
    for (const auto& s : out.segments) {
      if (s.kind == SegmentKind::Back && non_space_count(s.text) >= config.min_back_chars) {
        out.back_trigger = true;
      }
    }
    return out;
  };

  out.boxed_answer = extract_boxed(text);

  std::size_t i = skip_space(text, 0);
  if (i == text.size()) return invalid(GrammarIssue::Empty);

  std::size_t tail_begin = std::string_view::npos;
  while (i < text.size()) {
    SegmentKind kind;
    std::string_view close;
    if (starts_with_at(text, i, kThinkOpen)) {
      kind = SegmentKind::Think;
      close = kThinkClose;
      i += kThinkOpen.size();
    } else if (starts_with_at(text, i, kBackOpen)) {
      kind = SegmentKind::Back;
      close = kBackClose;
      i += kBackOpen.size();
    } else if (starts_with_at(text, i, kThinkClose) || starts_with_at(text, i, kBackClose)) {
      return invalid(GrammarIssue::UnexpectedCloseTag);
    } else {
      if (out.segments.empty()) return invalid(GrammarIssue::StrayText);
      tail_begin = i;
      break;
    }
    const std::size_t end = text.find(close, i);
    if (end == std::string_view::npos) return invalid(GrammarIssue::UnclosedTag);
    std::string_view content = text.substr(i, end - i);
    if (contains_structural_tag(content)) return invalid(GrammarIssue::NestedTag);
    out.segments.push_back(Segment{kind, std::string(content), CharSpan{i, end}});
    i = skip_space(text, end + close.size());
  }

  for (const auto& s : out.segments) {
    if (s.kind == SegmentKind::Back && non_space_count(s.text) >= config.min_back_chars) {
      out.back_trigger = true;
    }
  }

  if (out.segments.front().kind != SegmentKind::Think ||
      out.segments.back().kind != SegmentKind::Think) {
    return invalid(GrammarIssue::BadSegmentOrder);
  }
  for (std::size_t k = 1; k < out.segments.size(); ++k) {
    if (out.segments[k].kind == SegmentKind::Back &&
        out.segments[k - 1].kind == SegmentKind::Back) {
      return invalid(GrammarIssue::BadSegmentOrder);
    }
  }
  if (tail_begin == std::string_view::npos) return invalid(GrammarIssue::MissingBoxed);

  std::string answer;
  if (!parse_answer_tail(text.substr(tail_begin), answer)) {
    return invalid(text.substr(tail_begin).find(kBoxed) == std::string_view::npos
                       ? GrammarIssue::MissingBoxed
                       : GrammarIssue::TextAfterBoxed);
  }
  out.boxed_answer = std::move(answer);
  out.format_class = out.back_trigger ? FormatClass::BackFormat : FormatClass::CoTFormat;
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

/// One look-back round: the verification text and, optionally, the answer
/// the following think segment settles on. An empty `back_text` renders an
/// empty `<back></back>` pair.
struct BackRound {
  std::string back_text;
  std::optional<std::string> revised_answer;  // nullopt keeps the current answer
  bool operator==(const BackRound&) const = default;
};

/// Decisions of one rollout, independent of concrete wording.
struct ControlSequence {
  std::string template_id = "semantic";
  std::string initial_answer;
  std::vector<BackRound> rounds;  // empty => plain CoT
  bool truncated = false;         // generation hit the length cap; no answer is emitted

  bool wants_back() const { return !rounds.empty(); }
  std::string final_answer() const {
    std::string a = initial_answer;
    for (const auto& r : rounds) {
      if (r.revised_answer) a = *r.revised_answer;
    }
    return a;
  }
  bool operator==(const ControlSequence&) const = default;
};

/// Wording for the segments of a rendered rollout. `{answer}` is replaced
/// by the relevant answer symbol.
struct RolloutTemplate {
  std::string opening;     // first think when a back round follows
  std::string conclusion;  // first think when no back round follows
  std::string revise;      // think after a back that changes the answer
  std::string keep;        // think after a back that keeps the answer
};

struct TemplateSet {
  std::map<std::string, RolloutTemplate> templates;

  static TemplateSet defaults() {
    TemplateSet set;
    set.templates["semantic"] = RolloutTemplate{
        "The figure suggests the answer is {answer}.",
        "The figure suggests the answer is {answer}. So the answer is {answer}.",
        "So the answer is {answer}.",
        "So the answer remains {answer}.",
    };
    set.templates["solution"] = RolloutTemplate{
        "The figure suggests the answer is {answer}. So the answer is {answer}.",
        "The figure suggests the answer is {answer}. So the answer is {answer}.",
        "Based on the thinking and verification contents, the answer is {answer}.",
        "Based on the thinking and verification contents, the answer remains {answer}.",
    };
    return set;
  }

  const RolloutTemplate& at(const std::string& id) const {
    auto it = templates.find(id);
    if (it == templates.end()) throw std::invalid_argument("unknown template id: " + id);
    return it->second;
  }
};

namespace grammar_detail {
inline std::string fill(std::string_view pattern, std::string_view answer) {
  std::string out;
  constexpr std::string_view key = "{answer}";
  std::size_t i = 0;
  while (i < pattern.size()) {
    if (pattern.substr(i, key.size()) == key) {
      out += answer;
      i += key.size();
    } else {
      out += pattern[i++];
    }
  }
  return out;
}
}  // namespace grammar_detail

/// Renders a control sequence to rollout text. Inverse of parse_rollout in
/// the sense that the parse recovers the implied format class and answer.
inline std::string render_rollout(const ControlSequence& choices,
                                  const TemplateSet& templates = TemplateSet::defaults()) {
  using grammar_detail::fill;
  const RolloutTemplate& t = templates.at(choices.template_id);
  std::string out;
  std::string current = choices.initial_answer;

  if (choices.rounds.empty()) {
    out = "<think> " + fill(t.conclusion, current) + " </think>";
  } else {
    out = "<think> " + fill(t.opening, current) + " </think>";
    for (const auto& round : choices.rounds) {
      if (round.back_text.empty()) {
        out += " <back></back>";
      } else {
        out += " <back> " + round.back_text + " </back>";
      }
      if (round.revised_answer) {
        current = *round.revised_answer;
        out += " <think> " + fill(t.revise, current) + " </think>";
      } else {
        out += " <think> " + fill(t.keep, current) + " </think>";
      }
    }
  }
  if (!choices.truncated) out += " \\boxed{" + current + "}";
  return out;
}

/// Format class a control sequence should parse to under `config`.
inline FormatClass implied_format(const ControlSequence& c, const GrammarConfig& config = {}) {
  if (c.truncated) return FormatClass::Invalid;
  for (const auto& r : c.rounds) {
    if (grammar_detail::non_space_count(r.back_text) >= config.min_back_chars) {
      return FormatClass::BackFormat;
    }
  }
  return FormatClass::CoTFormat;
}

}  // namespace lookback
