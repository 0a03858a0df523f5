#pragma once

// Tiered format reward, verifiable accuracy reward, and their weighted sum.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "lookback/format_grammar.hpp"

namespace lookback {

enum class AnswerNorm { Exact, Normalized, Numeric };

inline std::string_view to_string(AnswerNorm n) {
  switch (n) {
    case AnswerNorm::Exact: return "exact";
    case AnswerNorm::Normalized: return "normalized";
    case AnswerNorm::Numeric: return "numeric";
  }
  return "normalized";
}

inline AnswerNorm answer_norm_from_string(std::string_view s) {
  if (s == "exact") return AnswerNorm::Exact;
  if (s == "normalized") return AnswerNorm::Normalized;
  if (s == "numeric") return AnswerNorm::Numeric;
  throw std::invalid_argument("unknown answer_norm: " + std::string(s));
}

struct RewardConfig {
  double lambda = 0.1;
  double back_reward = 1.0;
  double cot_reward = 0.667;  // literal tier value, not 2/3
  double invalid_reward = 0.0;
  AnswerNorm answer_norm = AnswerNorm::Normalized;

  void validate() const {
    if (!(back_reward > cot_reward && cot_reward > invalid_reward)) {
      throw std::invalid_argument("reward tiers must satisfy back > cot > invalid");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw std::invalid_argument("lambda must be finite and >= 0");
    }
  }
};

struct RewardBreakdown {
  FormatClass format_class = FormatClass::Invalid;
  double r_format = 0.0;
  double r_accuracy = 0.0;
  double r_total = 0.0;
  bool operator==(const RewardBreakdown&) const = default;
};

inline double format_reward(const ParsedRollout& rollout, const RewardConfig& cfg = {}) {
  switch (rollout.format_class) {
    case FormatClass::BackFormat: return cfg.back_reward;
    case FormatClass::CoTFormat: return cfg.cot_reward;
    case FormatClass::Invalid: return cfg.invalid_reward;
  }
  return cfg.invalid_reward;
}

namespace reward_detail {

inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending = !out.empty();
      continue;
    }
    if (pending) out += ' ';
    pending = false;
    out += c;
  }
  return out;
}

inline std::string fold_case(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// "(D)" and "D." style multiple-choice answers reduce to the bare letter.
inline std::string strip_choice_decoration(std::string s) {
  if (s.size() == 3 && s.front() == '(' && s.back() == ')' &&
      std::isalpha(static_cast<unsigned char>(s[1]))) {
    return s.substr(1, 1);
  }
  if (s.size() == 2 && s.back() == '.' && std::isalpha(static_cast<unsigned char>(s[0]))) {
    return s.substr(0, 1);
  }
  return s;
}

inline std::string normalize_answer(std::string_view s) {
  return strip_choice_decoration(fold_case(collapse_whitespace(s)));
}

inline std::optional<double> parse_plain_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Decimals, "a/b" rationals and \frac{a}{b}; surrounding whitespace ignored.
inline std::optional<double> parse_number(std::string_view raw) {
  std::string s = collapse_whitespace(raw);
  s.erase(std::remove(s.begin(), s.end(), ' '), s.end());
  std::string_view v = s;
  bool negative = false;
  if (!v.empty() && v.front() == '-' && v.substr(0, 6) == "-\\frac") {
    negative = true;
    v.remove_prefix(1);
  }
  for (std::string_view prefix : {"\\frac{", "\\dfrac{", "\\tfrac{"}) {
    if (v.substr(0, prefix.size()) == prefix) {
      v.remove_prefix(prefix.size());
      auto mid = v.find("}{");
      if (mid == std::string_view::npos || v.empty() || v.back() != '}') return std::nullopt;
      auto num = parse_plain_number(v.substr(0, mid));
      auto den = parse_plain_number(v.substr(mid + 2, v.size() - mid - 3));
      if (!num || !den || *den == 0.0) return std::nullopt;
      double q = *num / *den;
      return negative ? -q : q;
    }
  }
  if (auto slash = v.find('/'); slash != std::string_view::npos) {
    auto num = parse_plain_number(v.substr(0, slash));
    auto den = parse_plain_number(v.substr(slash + 1));
    if (!num || !den || *den == 0.0) return std::nullopt;
    return *num / *den;
  }
  return parse_plain_number(v);
}

}  // namespace reward_detail

/// 1 when the boxed answer matches the ground truth under `cfg.answer_norm`.
/// `numeric` falls back to normalized comparison when either side is not a
/// number.
inline double accuracy_reward(const std::optional<std::string>& boxed, std::string_view ground_truth,
                              const RewardConfig& cfg = {}) {
  using namespace reward_detail;
  if (!boxed) return 0.0;
  switch (cfg.answer_norm) {
    case AnswerNorm::Exact: {
      if (*boxed == ground_truth) return 1.0;
      // single-letter choices are case-insensitive in every mode
      if (boxed->size() == 1 && ground_truth.size() == 1 &&
          std::isalpha(static_cast<unsigned char>((*boxed)[0])) &&
          std::tolower(static_cast<unsigned char>((*boxed)[0])) ==
              std::tolower(static_cast<unsigned char>(ground_truth[0]))) {
        return 1.0;
      }
      return 0.0;
    }
    case AnswerNorm::Numeric: {
      auto a = parse_number(*boxed);
      auto b = parse_number(ground_truth);
      if (a && b) {
        const double scale = std::max({std::abs(*a), std::abs(*b), 1e-300});
        return std::abs(*a - *b) <= 1e-9 * scale ? 1.0 : 0.0;
      }
      [[fallthrough]];
    }
    case AnswerNorm::Normalized:
      return normalize_answer(*boxed) == normalize_answer(ground_truth) ? 1.0 : 0.0;
  }
  return 0.0;
}

inline RewardBreakdown total_reward(const ParsedRollout& rollout, std::string_view ground_truth,
                                    const RewardConfig& cfg = {}) {
  RewardBreakdown r;
  r.format_class = rollout.format_class;
  r.r_format = format_reward(rollout, cfg);
  r.r_accuracy = accuracy_reward(rollout.boxed_answer, ground_truth, cfg);
  r.r_total = cfg.lambda * r.r_format + r.r_accuracy;
  return r;
}

/// Parse-and-score convenience for raw rollout text.
inline RewardBreakdown score_text(std::string_view text, std::string_view ground_truth,
                                  const GrammarConfig& grammar = {}, const RewardConfig& cfg = {}) {
  return total_reward(parse_rollout(text, grammar), ground_truth, cfg);
}

}  // namespace lookback
