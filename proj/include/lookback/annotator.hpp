#pragma once

// In-process annotators: a rule-based stub and a canned-response table.

#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "lookback/curation.hpp"

namespace lookback {

namespace annotator_detail {

/// Splits on '.', '?' or '!' followed by whitespace; trailing text without a
/// terminator becomes the last sentence.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  const std::string s = reward_detail::collapse_whitespace(text);
  std::size_t begin = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if ((c == '.' || c == '?' || c == '!') && (i + 1 == s.size() || s[i + 1] == ' ')) {
      out.push_back(s.substr(begin, i + 1 - begin));
      begin = i + 2;
      ++i;
    }
  }
  if (begin < s.size()) out.push_back(s.substr(begin));
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::size_t from, std::size_t to) {
  std::string out;
  for (std::size_t i = from; i < to && i < parts.size(); ++i) {
    if (!out.empty()) out += ' ';
    out += parts[i];
  }
  return out;
}

inline std::string think(std::string_view body) {
  return body.empty() ? "<think></think>" : "<think> " + std::string(body) + " </think>";
}

}  // namespace annotator_detail

/// Deterministic rule-based annotator used by `curate --stub` and tests.
///
/// Semantic mode, correct prediction: the back segment is inserted after
/// ceil(n/2) reasoning sentences, the rest of the reasoning is kept.
/// Semantic mode, wrong prediction: the final sentence is dropped, a
/// correcting back segment follows, and the answer is revised.
/// Solution mode: the reasoning is kept whole and a back segment plus a
/// rethinking segment are appended.
class StubAnnotator : public Annotator {
 public:
  std::string complete(const AnnotationRequest& req) override {
    using namespace annotator_detail;
    const auto parsed = parse_rollout(req.prediction);
    std::string original;
    for (const auto& s : parsed.segments) {
      if (s.kind != SegmentKind::Think) continue;
      if (!original.empty()) original += ' ';
      original += s.text;
    }
    const auto sentences = split_sentences(original);
    const std::size_t n = sentences.size();
    const bool correct = req.score == "1";
    const std::string& gt = req.ground_truth;
    const std::string boxed = " \\boxed{" + gt + "}";

    if (req.mode == AnnotationMode::Semantic) {
      if (correct) {
        const std::size_t k = (n + 1) / 2;
        return think(join(sentences, 0, k)) +
               " <back> Looking back at the image, the observed details agree with this step. </back> " +
               think(join(sentences, k, n)) + boxed;
      }
      const std::size_t k = n == 0 ? 0 : n - 1;
      return think(join(sentences, 0, k)) +
             " <back> Looking back at the image, the previous step misreads it; the image supports " + gt +
             ". </back> " + think("So the answer is " + gt + ".") + boxed;
    }

    const std::string whole = join(sentences, 0, n);
    if (correct) {
      return think(whole) + " <back> Looking back at the image confirms the reasoning above. </back> " +
             think("Based on the thinking and verification contents, the answer remains " + gt + ".") + boxed;
    }
    return think(whole) + " <back> Looking back at the image, the reasoning above conflicts with it. </back> " +
           think("Based on the thinking and verification contents, the answer is " + gt + ".") + boxed;
  }
};

/// Returns fixed responses keyed by question id. Unknown ids raise AnnotatorError.
class CannedAnnotator : public Annotator {
 public:
  CannedAnnotator() = default;
  explicit CannedAnnotator(std::map<std::string, std::string> responses) : responses_(std::move(responses)) {}

  void set(std::string question_id, std::string response) {
    std::lock_guard lock(mu_);
    responses_[std::move(question_id)] = std::move(response);
  }

  std::string complete(const AnnotationRequest& req) override {
    std::lock_guard lock(mu_);
    ++calls_[req.question_id];
    auto it = responses_.find(req.question_id);
    if (it == responses_.end()) throw AnnotatorError("no canned response for " + req.question_id);
    return it->second;
  }

  int calls(const std::string& question_id) const {
    std::lock_guard lock(mu_);
    auto it = calls_.find(question_id);
    return it == calls_.end() ? 0 : it->second;
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::string> responses_;
  std::map<std::string, int> calls_;
};

}  // namespace lookback
