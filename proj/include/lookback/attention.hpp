#pragma once

// Attention-trace analytics, trigger-rate statistics and benchmark
// score aggregation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lookback/format_grammar.hpp"
#include "lookback/jsonl.hpp"

namespace lookback {

struct TraceMeta {
  std::string model_id;
  std::size_t image_token_count = 0;
  std::string layers_aggregated;
  bool operator==(const TraceMeta&) const = default;
};

struct TraceToken {
  std::size_t index = 0;
  std::string token_text;
  double image_attention_ratio = 0.0;
  bool operator==(const TraceToken&) const = default;
};

/// Labeled token range [start, end) in token positions (not `index` values).
struct TraceSpan {
  std::string label;  // "think" or "back"
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const TraceSpan&) const = default;
};

struct AttentionTrace {
  TraceMeta meta;
  std::vector<TraceToken> tokens;
  std::vector<TraceSpan> spans;
  bool operator==(const AttentionTrace&) const = default;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const double r = tokens[i].image_attention_ratio;
      if (!(r >= 0.0 && r <= 1.0)) {
        throw std::invalid_argument("token " + std::to_string(i) + ": ratio outside [0,1]");
      }
      if (i > 0 && tokens[i].index <= tokens[i - 1].index) {
        throw std::invalid_argument("token " + std::to_string(i) + ": index not strictly increasing");
      }
    }
    auto sorted = spans;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      const auto& s = sorted[i];
      if (s.start >= s.end || s.end > tokens.size()) {
        throw std::invalid_argument("span '" + s.label + "' out of bounds");
      }
      if (i > 0 && s.start < sorted[i - 1].end) throw std::invalid_argument("spans overlap");
    }
  }
};

/// Centered moving average with truncated windows at the edges.
inline std::vector<double> smooth(const std::vector<double>& x, std::size_t w) {
  if (w == 0 || w % 2 == 0) throw std::invalid_argument("smoothing window must be odd and >= 1");
  if (x.empty()) throw std::invalid_argument("empty trace");
  const std::size_t half = w / 2;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(x.size(), i + half + 1);
    double s = 0.0, mn = x[lo], mx = x[lo];
    for (std::size_t j = lo; j < hi; ++j) {
      s += x[j];
      mn = std::min(mn, x[j]);
      mx = std::max(mx, x[j]);
    }
    out[i] = std::clamp(s / static_cast<double>(hi - lo), mn, mx);
  }
  return out;
}

inline std::vector<double> raw_ratios(const AttentionTrace& trace) {
  std::vector<double> x;
  x.reserve(trace.tokens.size());
  for (const auto& t : trace.tokens) x.push_back(t.image_attention_ratio);
  return x;
}

inline std::vector<double> ratio_series(const AttentionTrace& trace, std::size_t w = 1) {
  return smooth(raw_ratios(trace), w);
}

struct ElevationReport {
  double mean_in_back = 0.0;
  double mean_outside = 0.0;
  double difference = 0.0;
  bool elevated = false;
};

inline ElevationReport back_elevation(const AttentionTrace& trace, double margin = 0.05) {
  std::vector<bool> in_back(trace.tokens.size(), false);
  bool any_span = false;
  for (const auto& s : trace.spans) {
    if (s.label != "back") continue;
    if (s.end > trace.tokens.size() || s.start >= s.end) throw std::invalid_argument("back span out of bounds");
    any_span = true;
    for (std::size_t i = s.start; i < s.end; ++i) in_back[i] = true;
  }
  if (!any_span) throw std::invalid_argument("trace has no back span");
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    (in_back[i] ? in : out) += trace.tokens[i].image_attention_ratio;
    ++(in_back[i] ? n_in : n_out);
  }
  if (n_out == 0) throw std::invalid_argument("trace has no token outside back spans");
  ElevationReport r;
  r.mean_in_back = in / static_cast<double>(n_in);
  r.mean_outside = out / static_cast<double>(n_out);
  r.difference = r.mean_in_back - r.mean_outside;
  r.elevated = r.difference >= margin;
  return r;
}

/// Plot-ready rows: token_index,raw_ratio,smoothed_ratio,span_label.
inline void write_trace_csv(std::ostream& os, const AttentionTrace& trace, std::size_t w) {
  const auto smoothed = ratio_series(trace, w);
  std::vector<std::string> label(trace.tokens.size(), "");
  for (const auto& s : trace.spans) {
    for (std::size_t i = s.start; i < s.end && i < label.size(); ++i) label[i] = s.label;
  }
  auto old = os.precision(17);
  os << "# model_id=" << trace.meta.model_id << " layers_aggregated=" << trace.meta.layers_aggregated
     << " smoothing_window=" << w << " smoothing=centered_truncated_mean normalization=none\n";
  os << "token_index,raw_ratio,smoothed_ratio,span_label\n";
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    os << trace.tokens[i].index << ',' << trace.tokens[i].image_attention_ratio << ',' << smoothed[i] << ','
       << label[i] << '\n';
  }
  os.precision(old);
}

// ---------------------------------------------------------------------------
// Trace I/O

inline json trace_to_json(const AttentionTrace& t) {
  json tokens = json::array();
  for (const auto& k : t.tokens) {
    tokens.push_back({{"index", k.index}, {"token_text", k.token_text}, {"image_attention_ratio", k.image_attention_ratio}});
  }
  json spans = json::array();
  for (const auto& s : t.spans) spans.push_back({{"label", s.label}, {"start", s.start}, {"end", s.end}});
  return json{{"meta",
               {{"model_id", t.meta.model_id},
                {"image_token_count", t.meta.image_token_count},
                {"layers_aggregated", t.meta.layers_aggregated}}},
              {"tokens", tokens},
              {"spans", spans}};
}

inline AttentionTrace trace_from_json(const json& j) {
  AttentionTrace t;
  const auto& m = j.at("meta");
  t.meta.model_id = m.at("model_id").get<std::string>();
  t.meta.image_token_count = m.at("image_token_count").get<std::size_t>();
  t.meta.layers_aggregated = m.at("layers_aggregated").get<std::string>();
  for (const auto& k : j.at("tokens")) {
    t.tokens.push_back({k.at("index").get<std::size_t>(), k.value("token_text", std::string()),
                        k.at("image_attention_ratio").get<double>()});
  }
  if (j.contains("spans")) {
    for (const auto& s : j.at("spans")) {
      t.spans.push_back({s.at("label").get<std::string>(), s.at("start").get<std::size_t>(),
                         s.at("end").get<std::size_t>()});
    }
  }
  t.validate();
  return t;
}

inline void write_traces(std::ostream& os, const std::vector<AttentionTrace>& traces) {
  for (const auto& t : traces) os << trace_to_json(t).dump() << '\n';
}

inline std::vector<AttentionTrace> read_traces(std::istream& in) {
  std::vector<AttentionTrace> out;
  for_each_jsonl(in, [&](std::size_t line, const json& j) {
    try {
      out.push_back(trace_from_json(j));
    } catch (const std::exception& e) {
      throw FormatError(line, e.what());
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Trigger statistics

struct AccuracySplit {
  std::optional<double> acc_with_back;
  std::optional<double> acc_without_back;
  std::optional<double> delta;  // with - without, when both exist
};

struct DatasetTrigger {
  std::string dataset;
  std::size_t total = 0;
  std::size_t back_triggered = 0;
  std::optional<AccuracySplit> accuracy;
  double trigger_rate() const { return total == 0 ? 0.0 : static_cast<double>(back_triggered) / static_cast<double>(total); }
};

struct TriggerReport {
  std::vector<DatasetTrigger> datasets;  // sorted by name
  double macro_rate() const {
    if (datasets.empty()) return 0.0;
    double s = 0.0;
    for (const auto& d : datasets) s += d.trigger_rate();
    return s / static_cast<double>(datasets.size());
  }
  double micro_rate() const {
    std::size_t t = 0, b = 0;
    for (const auto& d : datasets) {
      t += d.total;
      b += d.back_triggered;
    }
    return t == 0 ? 0.0 : static_cast<double>(b) / static_cast<double>(t);
  }
};

struct LabeledOutcome {
  bool triggered = false;
  double correct = 0.0;
};

inline AccuracySplit split_accuracy(const std::vector<LabeledOutcome>& outcomes) {
  double with = 0.0, without = 0.0;
  std::size_t n_with = 0, n_without = 0;
  for (const auto& o : outcomes) {
    if (o.triggered) {
      with += o.correct;
      ++n_with;
    } else {
      without += o.correct;
      ++n_without;
    }
  }
  AccuracySplit s;
  if (n_with) s.acc_with_back = with / static_cast<double>(n_with);
  if (n_without) s.acc_without_back = without / static_cast<double>(n_without);
  if (s.acc_with_back && s.acc_without_back) s.delta = *s.acc_with_back - *s.acc_without_back;
  return s;
}

/// Rollout text with optional ground truth for the accuracy split.
struct DatasetRollout {
  std::string text;
  std::optional<double> correct;
};

inline TriggerReport trigger_stats(const std::map<std::string, std::vector<DatasetRollout>>& by_dataset,
                                   const GrammarConfig& grammar = {}) {
  TriggerReport rep;
  for (const auto& [name, rollouts] : by_dataset) {
    DatasetTrigger d;
    d.dataset = name;
    std::vector<LabeledOutcome> outcomes;
    bool all_labeled = !rollouts.empty();
    for (const auto& r : rollouts) {
      const bool trig = parse_rollout(r.text, grammar).back_trigger;
      ++d.total;
      d.back_triggered += trig;
      if (r.correct) {
        outcomes.push_back({trig, *r.correct});
      } else {
        all_labeled = false;
      }
    }
    if (all_labeled) d.accuracy = split_accuracy(outcomes);
    rep.datasets.push_back(std::move(d));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Score aggregation

enum class BenchmarkCategory { Math, Perception };

inline std::map<std::string, BenchmarkCategory> default_category_map() {
  using C = BenchmarkCategory;
  return {
      {"MathVerse", C::Math},        {"MathVision", C::Math}, {"MathVista", C::Math},
      {"WeMath", C::Math},           {"GeoMath", C::Math},    {"HallusionBench", C::Perception},
      {"Hallusion", C::Perception},  {"TallyQA", C::Perception}, {"MME", C::Perception},
  };
}

/// How Avg_All combines the benchmarks: the mean of the per-category means
/// (the published column convention) or the flat mean of every score.
enum class OverallAverage { OfCategories, OfBenchmarks };

struct AggregateScores {
  std::optional<double> avg_math;
  std::optional<double> avg_perception;
  double avg_all = 0.0;
};

inline AggregateScores aggregate_scores(const std::vector<std::pair<std::string, double>>& scores,
                                        const std::map<std::string, BenchmarkCategory>& categories = default_category_map(),
                                        OverallAverage overall = OverallAverage::OfCategories) {
  if (scores.empty()) throw std::invalid_argument("no benchmark scores");
  double m = 0.0, p = 0.0;
  std::size_t nm = 0, np = 0;
  for (const auto& [name, v] : scores) {
    auto it = categories.find(name);
    if (it == categories.end()) throw std::invalid_argument("unknown benchmark: " + name);
    if (it->second == BenchmarkCategory::Math) {
      m += v;
      ++nm;
    } else {
      p += v;
      ++np;
    }
  }
  AggregateScores out;
  if (nm) out.avg_math = m / static_cast<double>(nm);
  if (np) out.avg_perception = p / static_cast<double>(np);
  if (overall == OverallAverage::OfBenchmarks) {
    out.avg_all = (m + p) / static_cast<double>(nm + np);
  } else if (out.avg_math && out.avg_perception) {
    out.avg_all = (*out.avg_math + *out.avg_perception) / 2.0;
  } else {
    out.avg_all = out.avg_math ? *out.avg_math : *out.avg_perception;
  }
  return out;
}

}  // namespace lookback
