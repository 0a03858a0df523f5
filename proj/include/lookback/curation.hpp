#pragma once

// Cold-start data construction: rollout statistics, question selection,
// annotation requests and validation, reflection-rate mixing, and the SFT
// record format.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lookback/format_grammar.hpp"
#include "lookback/jsonl.hpp"
#include "lookback/reward.hpp"
#include "lookback/templates.hpp"

namespace lookback {

struct ScoredRollout {
  std::string text;
  RewardBreakdown reward;
};

struct QuestionRecord {
  std::string question_id;
  std::string image_ref;
  std::string question_text;
  std::string ground_truth;
  std::vector<ScoredRollout> rollouts;
};

struct SelectionStats {
  std::string question_id;
  double accuracy_mean = 0.0;         // p
  double reward_variance = 0.0;       // population variance of r_total
  double correctness_variance = 0.0;  // p (1 - p)
  double difficulty = 0.0;            // 1 - p
};

inline SelectionStats compute_stats(const QuestionRecord& record) {
  if (record.rollouts.empty()) {
    throw std::invalid_argument("question " + record.question_id + " has no rollouts");
  }
  const double n = static_cast<double>(record.rollouts.size());
  double acc = 0.0, total = 0.0;
  for (const auto& r : record.rollouts) {
    acc += r.reward.r_accuracy;
    total += r.reward.r_total;
  }
  const double mean_total = total / n;
  double var = 0.0;
  for (const auto& r : record.rollouts) var += (r.reward.r_total - mean_total) * (r.reward.r_total - mean_total);
  SelectionStats s;
  s.question_id = record.question_id;
  s.accuracy_mean = acc / n;
  s.reward_variance = var / n;
  s.correctness_variance = s.accuracy_mean * (1.0 - s.accuracy_mean);
  s.difficulty = 1.0 - s.accuracy_mean;
  return s;
}

struct SelectionPolicy {
  double p_min = 0.0;  // exclusive
  double p_max = 1.0;  // exclusive
  std::optional<std::size_t> top_k;  // nullopt keeps every candidate
};

struct SelectionResult {
  std::vector<std::string> question_ids;
  std::optional<std::string> warning;
};

/// Strict "a ranks before b": higher reward variance, then higher
/// difficulty, then smaller question id (byte order).
inline bool ranks_before(const SelectionStats& a, const SelectionStats& b) {
  if (a.reward_variance != b.reward_variance) return a.reward_variance > b.reward_variance;
  if (a.difficulty != b.difficulty) return a.difficulty > b.difficulty;
  return a.question_id < b.question_id;
}

inline SelectionResult select_questions(std::vector<SelectionStats> stats, const SelectionPolicy& policy) {
  if (stats.empty()) throw std::invalid_argument("no statistics to select from");
  std::erase_if(stats, [&](const SelectionStats& s) {
    return !(s.accuracy_mean > policy.p_min && s.accuracy_mean < policy.p_max);
  });
  std::sort(stats.begin(), stats.end(), ranks_before);
  SelectionResult out;
  std::size_t k = stats.size();
  if (policy.top_k) {
    if (*policy.top_k > stats.size()) {
      out.warning = "requested top_k=" + std::to_string(*policy.top_k) + " but only " +
                    std::to_string(stats.size()) + " candidates pass the accuracy band";
    } else {
      k = *policy.top_k;
    }
  }
  for (std::size_t i = 0; i < k; ++i) out.question_ids.push_back(stats[i].question_id);
  return out;
}

// ---------------------------------------------------------------------------
// Annotation

struct AnnotationRequest {
  AnnotationMode mode = AnnotationMode::Semantic;
  std::string question_id;
  std::string image_ref;
  std::string question;      // raw query
  std::string user_prompt;   // query + RL instruction, as the policy saw it
  std::string prediction;    // the chosen CoT rollout
  std::string ground_truth;
  std::string score;         // accuracy of the chosen rollout, "0" or "1"
  std::string prompt_text;   // the filled insertion template
};

enum class RejectionCode {
  None,
  NotBackFormat,
  AnswerMismatch,
  ReasoningModified,
  PrefixModified,
  OriginalUnparseable,
};

inline std::string_view to_string(RejectionCode c) {
  switch (c) {
    case RejectionCode::None: return "NONE";
    case RejectionCode::NotBackFormat: return "NOT_BACK_FORMAT";
    case RejectionCode::AnswerMismatch: return "ANSWER_MISMATCH";
    case RejectionCode::ReasoningModified: return "REASONING_MODIFIED";
    case RejectionCode::PrefixModified: return "PREFIX_MODIFIED";
    case RejectionCode::OriginalUnparseable: return "ORIGINAL_UNPARSEABLE";
  }
  return "NONE";
}

enum class SampleLabel { Verification, Correction };

inline std::string_view to_string(SampleLabel l) {
  return l == SampleLabel::Verification ? "verification" : "correction";
}

inline SampleLabel sample_label_from_string(std::string_view s) {
  if (s == "verification") return SampleLabel::Verification;
  if (s == "correction") return SampleLabel::Correction;
  throw std::invalid_argument("unknown label: " + std::string(s));
}

struct ColdStartSample {
  std::string image_ref;
  std::string question;
  std::string response;  // back-annotated CoT ending in \boxed{answer}
  SampleLabel label = SampleLabel::Verification;
  bool operator==(const ColdStartSample&) const = default;
};

struct ValidationReport {
  bool accepted = false;
  RejectionCode code = RejectionCode::None;
  std::string detail;
};

struct AnnotationResult {
  std::string raw_response;
  std::optional<ColdStartSample> sample;
  ValidationReport validation;
};

class AnnotationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace curation_detail {

inline std::string format_score(double v) {
  if (v == std::floor(v) && std::abs(v) < 1e15) return std::to_string(static_cast<long long>(v));
  std::string s = std::to_string(v);
  return s;
}

inline std::string think_text(const ParsedRollout& p, std::size_t end_segment) {
  std::string out;
  for (std::size_t i = 0; i < end_segment && i < p.segments.size(); ++i) {
    if (p.segments[i].kind != SegmentKind::Think) continue;
    auto t = reward_detail::collapse_whitespace(p.segments[i].text);
    if (t.empty()) continue;
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

inline std::size_t first_back(const ParsedRollout& p) {
  for (std::size_t i = 0; i < p.segments.size(); ++i) {
    if (p.segments[i].kind == SegmentKind::Back) return i;
  }
  return p.segments.size();
}

}  // namespace curation_detail

/// Builds the insertion prompt for one of the record's rollouts.
inline AnnotationRequest build_annotation_request(const QuestionRecord& record, std::size_t rollout_index,
                                                  AnnotationMode mode) {
  const auto& rollout = record.rollouts.at(rollout_index);
  if (rollout.text.find("<back>") != std::string::npos) {
    throw AnnotationError("rollout " + std::to_string(rollout_index) + " of question " +
                          record.question_id + " already contains <back>");
  }
  AnnotationRequest req;
  req.mode = mode;
  req.question_id = record.question_id;
  req.image_ref = record.image_ref;
  req.question = record.question_text;
  req.user_prompt = rl_user_prompt(mode, record.question_text);
  req.prediction = rollout.text;
  req.ground_truth = record.ground_truth;
  req.score = curation_detail::format_score(rollout.reward.r_accuracy);
  req.prompt_text = insertion_prompt(mode, req.user_prompt, req.prediction, req.ground_truth, req.score);
  return req;
}

/// Index of the first rollout eligible for annotation: no <back> tag and a
/// well-formed CoT parse. nullopt when none qualifies.
inline std::optional<std::size_t> choose_rollout(const QuestionRecord& record, const GrammarConfig& grammar = {}) {
  for (std::size_t i = 0; i < record.rollouts.size(); ++i) {
    const auto& t = record.rollouts[i].text;
    if (t.find("<back>") != std::string::npos) continue;
    if (parse_rollout(t, grammar).format_class == FormatClass::CoTFormat) return i;
  }
  return std::nullopt;
}

/// Checks an annotator response against the insertion rules:
///  (a) it parses as back format;
///  (b) its boxed answer matches the ground truth (normalized);
///  (c) semantic mode, originally correct: the think text with back segments
///      removed equals the original think text;
///  (d) originally wrong: the think text before the first back is a prefix
///      of the original think text.
/// Think text is compared with whitespace runs collapsed.
inline AnnotationResult validate_annotation(std::string_view result_text, AnnotationMode mode,
                                            std::string_view original_cot, std::string_view ground_truth,
                                            std::string_view question = {}, std::string_view image_ref = {},
                                            const GrammarConfig& grammar = {}) {
  using namespace curation_detail;
  AnnotationResult out;
  out.raw_response = std::string(result_text);
  auto reject = [&](RejectionCode code, std::string detail) {
    out.validation = ValidationReport{false, code, std::move(detail)};
    return out;
  };

  RewardConfig norm;
  norm.answer_norm = AnswerNorm::Normalized;

  const auto original = parse_rollout(original_cot, grammar);
  if (original.segments.empty()) {
    return reject(RejectionCode::OriginalUnparseable, "original CoT has no think segment");
  }
  const bool originally_correct = accuracy_reward(original.boxed_answer, ground_truth, norm) == 1.0;

  const auto annotated = parse_rollout(result_text, grammar);
  if (annotated.format_class != FormatClass::BackFormat) {
    return reject(RejectionCode::NotBackFormat,
                  "response parses as " + std::string(to_string(annotated.format_class)));
  }
  if (accuracy_reward(annotated.boxed_answer, ground_truth, norm) != 1.0) {
    return reject(RejectionCode::AnswerMismatch,
                  "boxed answer '" + annotated.boxed_answer.value_or("") + "' != ground truth '" +
                      std::string(ground_truth) + "'");
  }

  const std::string original_think = think_text(original, original.segments.size());
  if (mode == AnnotationMode::Semantic && originally_correct) {
    if (think_text(annotated, annotated.segments.size()) != original_think) {
      return reject(RejectionCode::ReasoningModified, "think text differs from the original reasoning");
    }
  }
  if (!originally_correct) {
    const std::string prefix = think_text(annotated, first_back(annotated));
    if (original_think.compare(0, prefix.size(), prefix) != 0) {
      return reject(RejectionCode::PrefixModified, "reasoning before the first <back> was modified");
    }
  }

  out.sample = ColdStartSample{std::string(image_ref), std::string(question), std::string(result_text),
                               originally_correct ? SampleLabel::Verification : SampleLabel::Correction};
  out.validation = ValidationReport{true, RejectionCode::None, {}};
  return out;
}

inline AnnotationResult validate_annotation(std::string_view result_text, const AnnotationRequest& req,
                                            const GrammarConfig& grammar = {}) {
  return validate_annotation(result_text, req.mode, req.prediction, req.ground_truth, req.question,
                             req.image_ref, grammar);
}

/// Source of annotation completions. Implementations must be safe to call
/// from several threads at once.
class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual std::string complete(const AnnotationRequest& request) = 0;
};

/// Transport or protocol failure talking to a remote annotator.
class AnnotatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AnnotationOutcome {
  std::string question_id;
  AnnotationResult result;
  int attempts = 0;
};

/// Issues requests with at most `max_in_flight` concurrent completions.
/// Responses failing validation are retried up to `retries` more times.
/// Outcomes are returned ordered by question id. AnnotatorError propagates.
inline std::vector<AnnotationOutcome> annotate_all(const std::vector<AnnotationRequest>& requests,
                                                   Annotator& annotator, std::size_t max_in_flight = 4,
                                                   int retries = 2, const GrammarConfig& grammar = {}) {
  if (max_in_flight == 0) max_in_flight = 1;
  std::vector<AnnotationOutcome> out(requests.size());
  auto work = [&](std::size_t i) {
    AnnotationOutcome o;
    o.question_id = requests[i].question_id;
    for (int attempt = 0; attempt <= retries; ++attempt) {
      ++o.attempts;
      o.result = validate_annotation(annotator.complete(requests[i]), requests[i], grammar);
      if (o.result.validation.accepted) break;
    }
    return o;
  };
  for (std::size_t begin = 0; begin < requests.size(); begin += max_in_flight) {
    const std::size_t end = std::min(requests.size(), begin + max_in_flight);
    std::vector<std::future<AnnotationOutcome>> inflight;
    for (std::size_t i = begin; i < end; ++i) inflight.push_back(std::async(std::launch::async, work, i));
    for (std::size_t i = begin; i < end; ++i) out[i] = inflight[i - begin].get();
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.question_id < b.question_id; });
  return out;
}

// ---------------------------------------------------------------------------
// Reflection-rate mixing

class MixError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Number of correction samples in a mix of size n: round-half-to-even of rr * n.
inline std::size_t correction_count(double rr, std::size_t n) {
  return static_cast<std::size_t>(std::nearbyint(rr * static_cast<double>(n)));
}

/// Largest mix size the available class counts support at rate rr.
inline std::size_t max_mix_size(std::size_t corrections, std::size_t verifications, double rr) {
  for (std::size_t n = corrections + verifications; n > 0; --n) {
    const std::size_t c = correction_count(rr, n);
    if (c <= corrections && n - c <= verifications) return n;
  }
  return 0;
}

/// Draws correction_count(rr, n) correction samples and the rest
/// verification samples, then shuffles the result with `seed`.
inline std::vector<ColdStartSample> mix_reflection_rate(const std::vector<ColdStartSample>& samples, double rr,
                                                        std::size_t n, std::uint64_t seed) {
  if (!(rr >= 0.0 && rr <= 1.0)) throw MixError("reflection rate must lie in [0, 1]");
  std::vector<ColdStartSample> corr, ver;
  for (const auto& s : samples) (s.label == SampleLabel::Correction ? corr : ver).push_back(s);
  const std::size_t want_corr = correction_count(rr, n);
  const std::size_t want_ver = n - want_corr;
  if (want_corr > corr.size() || want_ver > ver.size()) {
    std::string msg = "insufficient samples for n=" + std::to_string(n) + ", rr=" + std::to_string(rr) + ":";
    if (want_corr > corr.size()) msg += " correction short by " + std::to_string(want_corr - corr.size());
    if (want_ver > ver.size()) msg += " verification short by " + std::to_string(want_ver - ver.size());
    throw MixError(msg);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(corr.begin(), corr.end(), rng);
  std::shuffle(ver.begin(), ver.end(), rng);
  std::vector<ColdStartSample> out(corr.begin(), corr.begin() + static_cast<std::ptrdiff_t>(want_corr));
  out.insert(out.end(), ver.begin(), ver.begin() + static_cast<std::ptrdiff_t>(want_ver));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// ---------------------------------------------------------------------------
// SFT records

inline json sft_record(const ColdStartSample& s, AnnotationMode mode) {
  json user = {{"role", "user"}, {"content", sft_user_content(mode, s.question)}};
  json assistant = {{"role", "assistant"}, {"content", s.response}};
  return json{{"messages", json::array({user, assistant})},
              {"images", json::array({s.image_ref})},
              {"label", std::string(to_string(s.label))}};
}

inline void serialize_sft(const std::vector<ColdStartSample>& dataset, AnnotationMode mode, std::ostream& os) {
  for (const auto& s : dataset) os << sft_record(s, mode).dump() << '\n';
}

inline void serialize_sft(const std::vector<ColdStartSample>& dataset, AnnotationMode mode, const std::string& path) {
  auto out = open_output(path);
  serialize_sft(dataset, mode, out);
  if (!out) throw IoError("write failed: " + path);
}

struct SftDataset {
  std::vector<ColdStartSample> samples;
  std::optional<AnnotationMode> mode;  // nullopt for an empty file
};

inline SftDataset load_sft(std::istream& in) {
  SftDataset out;
  for_each_jsonl(in, [&](std::size_t line, const json& j) {
    try {
      const auto& msgs = j.at("messages");
      if (!msgs.is_array() || msgs.size() != 2) throw FormatError(line, "expected two messages");
      if (msgs[0].at("role") != "user" || msgs[1].at("role") != "assistant") {
        throw FormatError(line, "expected user then assistant message");
      }
      const std::string user = msgs[0].at("content").get<std::string>();
      const auto& images = j.at("images");
      if (!images.is_array() || images.size() != 1) throw FormatError(line, "expected one image");

      std::optional<AnnotationMode> mode;
      std::string query;
      const std::string head = std::string(templates::kImagePlaceholder) + " ";
      for (AnnotationMode m : {AnnotationMode::Semantic, AnnotationMode::Solution}) {
        const std::string tail = " " + std::string(sft_instruction(m));
        if (user.size() >= head.size() + tail.size() && user.compare(0, head.size(), head) == 0 &&
            user.compare(user.size() - tail.size(), tail.size(), tail) == 0) {
          mode = m;
          query = user.substr(head.size(), user.size() - head.size() - tail.size());
          break;
        }
      }
      if (!mode) throw FormatError(line, "user content does not match an SFT instruction template");
      if (out.mode && *out.mode != *mode) throw FormatError(line, "mixed annotation modes in one file");
      out.mode = mode;

      ColdStartSample s;
      s.image_ref = images[0].get<std::string>();
      s.question = std::move(query);
      s.response = msgs[1].at("content").get<std::string>();
      s.label = sample_label_from_string(j.at("label").get<std::string>());
      out.samples.push_back(std::move(s));
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(line, e.what());
    }
  });
  return out;
}

inline SftDataset load_sft(const std::string& path) {
  auto in = open_input(path);
  return load_sft(in);
}

// ---------------------------------------------------------------------------
// Rollout dumps

struct DumpLoadResult {
  std::vector<QuestionRecord> records;
  std::vector<std::string> errors;  // "line N: ..." for skipped records
};

/// Reads {question_id, image_ref, question, ground_truth, rollouts:[text...]}
/// records and scores every rollout. Malformed lines are skipped and reported.
inline DumpLoadResult load_rollout_dump(std::istream& in, const GrammarConfig& grammar = {},
                                        const RewardConfig& reward = {}) {
  DumpLoadResult out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(line);
      QuestionRecord r;
      r.question_id = string_field(j, "question_id", n);
      r.image_ref = j.contains("image_ref") ? string_field(j, "image_ref", n) : std::string();
      r.question_text = string_field(j, "question", n);
      r.ground_truth = string_field(j, "ground_truth", n);
      if (r.ground_truth.empty()) throw FormatError(n, "empty ground_truth");
      if (!j.contains("rollouts") || !j.at("rollouts").is_array()) throw FormatError(n, "missing rollouts array");
      for (const auto& t : j.at("rollouts")) {
        if (!t.is_string()) throw FormatError(n, "rollouts must be strings");
        const auto text = t.get<std::string>();
        r.rollouts.push_back({text, score_text(text, r.ground_truth, grammar, reward)});
      }
      if (r.rollouts.empty()) throw FormatError(n, "empty rollouts array");
      out.records.push_back(std::move(r));
    } catch (const FormatError& e) {
      out.errors.push_back(e.what());
    } catch (const std::exception& e) {
      out.errors.push_back("line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end curation

struct CurationConfig {
  AnnotationMode mode = AnnotationMode::Semantic;
  SelectionPolicy selection;
  double reflection_rate = 0.5;
  std::optional<std::size_t> mix_size;  // nullopt: largest feasible
  std::uint64_t seed = 0;
  int retries = 2;
  std::size_t max_in_flight = 4;
  GrammarConfig grammar;
};

struct QuestionReport {
  SelectionStats stats;
  bool selected = false;
  std::string outcome;  // accepted:<label>, rejected:<code>, skipped:no_cot, not_selected
  int attempts = 0;
};

struct CurationOutput {
  std::vector<QuestionReport> report;  // input order
  std::vector<ColdStartSample> accepted;
  std::vector<ColdStartSample> dataset;  // after mixing
  std::vector<std::string> warnings;
};

/// Stats -> selection -> annotation -> validation -> reflection-rate mix.
inline CurationOutput run_curation(const std::vector<QuestionRecord>& records, Annotator& annotator,
                                   const CurationConfig& cfg) {
  CurationOutput out;
  std::vector<SelectionStats> stats;
  for (const auto& r : records) {
    stats.push_back(compute_stats(r));
    out.report.push_back({stats.back(), false, "not_selected", 0});
  }
  if (records.empty()) return out;
  auto selection = select_questions(stats, cfg.selection);
  if (selection.warning) out.warnings.push_back(*selection.warning);

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].question_id, i);

  std::vector<AnnotationRequest> requests;
  for (const auto& id : selection.question_ids) {
    const std::size_t i = index.at(id);
    out.report[i].selected = true;
    auto pick = choose_rollout(records[i], cfg.grammar);
    if (!pick) {
      out.report[i].outcome = "skipped:no_cot";
      continue;
    }
    requests.push_back(build_annotation_request(records[i], *pick, cfg.mode));
  }

  for (auto& o : annotate_all(requests, annotator, cfg.max_in_flight, cfg.retries, cfg.grammar)) {
    auto& rep = out.report[index.at(o.question_id)];
    rep.attempts = o.attempts;
    if (o.result.validation.accepted) {
      rep.outcome = "accepted:" + std::string(to_string(o.result.sample->label));
      out.accepted.push_back(*o.result.sample);
    } else {
      rep.outcome = "rejected:" + std::string(to_string(o.result.validation.code));
      out.warnings.push_back("question " + o.question_id + " dropped after " + std::to_string(o.attempts) +
                             " attempts: " + std::string(to_string(o.result.validation.code)) + " (" +
                             o.result.validation.detail + ")");
    }
  }

  std::size_t corr = 0;
  for (const auto& s : out.accepted) corr += s.label == SampleLabel::Correction;
  const std::size_t n =
      cfg.mix_size.value_or(max_mix_size(corr, out.accepted.size() - corr, cfg.reflection_rate));
  out.dataset = mix_reflection_rate(out.accepted, cfg.reflection_rate, n, cfg.seed);
  return out;
}

}  // namespace lookback
