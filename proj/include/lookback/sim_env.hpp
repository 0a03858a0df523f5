#pragma once

// Synthetic look-back environment and the end-to-end training driver:
// base rollouts -> curation -> annotated cold-start SFT -> GRPO.
//
// A task hides a "visual fact" that maps to the answer through a public
// lookup. The policy only observes the fact through a back segment, so the
// back channel is the causal route to a correct answer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lookback/attention.hpp"
#include "lookback/curation.hpp"
#include "lookback/format_grammar.hpp"
#include "lookback/grpo.hpp"
#include "lookback/policy.hpp"
#include "lookback/reward.hpp"

namespace lookback {

inline constexpr std::size_t kSimAnswers = 5;
inline constexpr std::size_t kSimFacts = 5;
inline const std::array<std::string, kSimAnswers> kSimAnswerSymbols = {"A", "B", "C", "D", "E"};
inline const std::array<std::string, kSimFacts> kSimFactWords = {"circle", "square", "triangle", "star", "hexagon"};

struct SynthTask {
  std::string task_id;
  std::size_t answer = 0;      // index into kSimAnswerSymbols
  std::size_t fact = 0;        // index into kSimFactWords
  std::size_t distractor = 0;  // != answer
  bool answer_visible = false;  // the question itself states the answer
};

/// Base-policy priors.
struct SimPriors {
  double init_distractor = 0.6;  // remaining mass spread evenly
  double init_visible = 0.6;     // stated answer, on answer-visible tasks
  double back_round0 = 0.3;
  double back_round1 = 0.1;
  double look_fact = 0.5;        // true fact
  double look_empty = 0.1;       // remaining mass spread over other facts
  double revise_lookup = 0.5;    // after seeing a fact: its lookup answer
  double revise_keep = 0.25;
  double revise_empty_keep = 0.6;  // after an empty look
};

struct SimConfig {
  std::uint64_t seed = 0;
  GrammarConfig grammar;
  RewardConfig reward;
  GrpoConfig grpo;
  SimPriors priors;
  std::size_t max_back_rounds = 2;
  double visible_fraction = 0.3;

  // curation
  std::size_t pool_size = 200;
  std::size_t curation_rollouts = 12;
  SelectionPolicy selection;
  double reflection_rate = 0.5;

  // cold-start SFT
  std::size_t sft_steps = 500;
  double sft_learning_rate = 0.5;

  // GRPO
  std::size_t grpo_epochs = 2;
  std::size_t grpo_tasks_per_epoch = 2400;
  std::size_t rollout_batch = 16;  // tasks per step

  // evaluation and outputs
  std::size_t eval_samples = 2000;
  std::size_t trace_count = 8;
  std::size_t trailing_window = 50;

  SimConfig() {
    grpo.learning_rate = 2.0;
  }

  void validate() const {
    grpo.validate();
    reward.validate();
    if (max_back_rounds == 0) throw std::invalid_argument("max_back_rounds must be >= 1");
    if (pool_size == 0 || curation_rollouts < 2) throw std::invalid_argument("curation pool too small");
    if (rollout_batch == 0) throw std::invalid_argument("rollout_batch must be >= 1");
    if (trailing_window == 0) throw std::invalid_argument("trailing_window must be >= 1");
    if (!(reflection_rate >= 0.0 && reflection_rate <= 1.0)) throw std::invalid_argument("reflection_rate must lie in [0,1]");
    if (!(visible_fraction >= 0.0 && visible_fraction <= 1.0)) throw std::invalid_argument("visible_fraction must lie in [0,1]");
  }
};

/// Vocabulary, context layout and the public fact -> answer lookup.
class SimWorld {
 public:
  explicit SimWorld(const SimConfig& cfg) : cfg_(cfg) {
    std::vector<std::size_t> perm(kSimFacts);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x6c6f6f6b7570ULL));
    std::shuffle(perm.begin(), perm.end(), rng);
    lookup_ = perm;
  }

  std::size_t lookup(std::size_t fact) const { return lookup_.at(fact); }
  std::size_t max_rounds() const { return cfg_.max_back_rounds; }
  double visible_fraction() const { return cfg_.visible_fraction; }

  SynthTask make_task(std::string id, std::mt19937_64& rng) const {
    SynthTask t;
    t.task_id = std::move(id);
    t.fact = std::uniform_int_distribution<std::size_t>(0, kSimFacts - 1)(rng);
    t.answer = lookup(t.fact);
    t.distractor = std::uniform_int_distribution<std::size_t>(0, kSimAnswers - 2)(rng);
    if (t.distractor >= t.answer) ++t.distractor;
    t.answer_visible = std::bernoulli_distribution(cfg_.visible_fraction)(rng);
    return t;
  }

  /// Every (fact, distractor) combination once, with `visible` set on all of them.
  std::vector<SynthTask> all_tasks(bool visible) const {
    std::vector<SynthTask> out;
    for (std::size_t f = 0; f < kSimFacts; ++f) {
      for (std::size_t d = 0; d < kSimAnswers; ++d) {
        if (d == lookup(f)) continue;
        out.push_back({(visible ? "v" : "h") + std::string("f") + std::to_string(f) + "d" + std::to_string(d),
                       lookup(f), f, d, visible});
      }
    }
    return out;
  }

  ToyPolicy base_policy() const {
    std::vector<std::string> vocab;
    for (const auto& a : kSimAnswerSymbols) vocab.push_back("ANS_" + a);
    for (const auto& f : kSimFactWords) vocab.push_back("FACT_" + f);
    for (const char* s : {"EMPTY", "BACK", "STOP", "KEEP"}) vocab.emplace_back(s);
    ToyPolicy p(vocab);
    const auto& pr = cfg_.priors;

    std::vector<TokenId> answers, facts_and_empty, answers_and_keep;
    for (const auto& a : kSimAnswerSymbols) answers.push_back(p.token("ANS_" + a));
    for (const auto& f : kSimFactWords) facts_and_empty.push_back(p.token("FACT_" + f));
    facts_and_empty.push_back(p.token("EMPTY"));
    answers_and_keep = answers;
    answers_and_keep.push_back(p.token("KEEP"));

    for (std::size_t d = 0; d < kSimAnswers; ++d) {
      std::vector<double> probs(kSimAnswers, (1.0 - pr.init_distractor) / (kSimAnswers - 1));
      probs[d] = pr.init_distractor;
      p.add_context("INIT_" + kSimAnswerSymbols[d], answers, logits_from_probabilities(probs));
    }
    for (std::size_t a = 0; a < kSimAnswers; ++a) {
      std::vector<double> probs(kSimAnswers, (1.0 - pr.init_visible) / (kSimAnswers - 1));
      probs[a] = pr.init_visible;
      p.add_context("INIT_SEEN_" + kSimAnswerSymbols[a], answers, logits_from_probabilities(probs));
    }
    for (const char* prefix : {"DECIDE_", "DECIDE_SEEN_"}) {
      for (std::size_t r = 0; r < cfg_.max_back_rounds; ++r) {
        const double b = r == 0 ? pr.back_round0 : pr.back_round1;
        p.add_context(prefix + std::to_string(r), {p.token("BACK"), p.token("STOP")},
                      logits_from_probabilities({b, 1.0 - b}));
      }
    }
    for (std::size_t v = 0; v < kSimFacts; ++v) {
      std::vector<double> probs(kSimFacts + 1, (1.0 - pr.look_fact - pr.look_empty) / (kSimFacts - 1));
      probs[v] = pr.look_fact;
      probs[kSimFacts] = pr.look_empty;
      p.add_context("LOOK_" + kSimFactWords[v], facts_and_empty, logits_from_probabilities(probs));
    }
    for (std::size_t e = 0; e <= kSimFacts; ++e) {
      std::vector<double> probs(kSimAnswers + 1);
      if (e < kSimFacts) {
        std::fill(probs.begin(), probs.end(), (1.0 - pr.revise_lookup - pr.revise_keep) / (kSimAnswers - 1));
        probs[lookup(e)] = pr.revise_lookup;
        probs[kSimAnswers] = pr.revise_keep;
      } else {
        std::fill(probs.begin(), probs.end(), (1.0 - pr.revise_empty_keep) / kSimAnswers);
        probs[kSimAnswers] = pr.revise_empty_keep;
      }
      p.add_context("REVISE_" + (e < kSimFacts ? kSimFactWords[e] : std::string("EMPTY")), answers_and_keep,
                    logits_from_probabilities(probs));
    }
    return p;
  }

  /// Context sequencing for one task: INIT, then up to max_rounds of
  /// DECIDE -> (LOOK -> REVISE) with STOP ending the rollout. Answer-visible
  /// tasks use their own INIT and DECIDE rows.
  NextContext next_context(const ToyPolicy& p, const SynthTask& task) const {
    const ContextId init = task.answer_visible ? p.context("INIT_SEEN_" + kSimAnswerSymbols[task.answer])
                                               : p.context("INIT_" + kSimAnswerSymbols[task.distractor]);
    const std::string decide_prefix = task.answer_visible ? "DECIDE_SEEN_" : "DECIDE_";
    const ContextId look = p.context("LOOK_" + kSimFactWords[task.fact]);
    const TokenId back = p.token("BACK"), empty = p.token("EMPTY");
    const TokenId fact0 = p.token("FACT_" + kSimFactWords[0]);
    std::vector<ContextId> decide, revise;
    for (std::size_t r = 0; r < cfg_.max_back_rounds; ++r) decide.push_back(p.context(decide_prefix + std::to_string(r)));
    for (const auto& f : kSimFactWords) revise.push_back(p.context("REVISE_" + f));
    revise.push_back(p.context("REVISE_EMPTY"));
    const std::size_t rounds = cfg_.max_back_rounds;

    return [=](std::span<const Step> prefix) -> std::optional<ContextId> {
      if (prefix.empty()) return init;
      std::size_t i = 1, r = 0;
      while (true) {
        if (i == prefix.size()) return r < rounds ? std::optional<ContextId>(decide[r]) : std::nullopt;
        if (prefix[i].token != back) return std::nullopt;  // STOP
        if (++i == prefix.size()) return look;
        const TokenId seen = prefix[i].token;
        const std::size_t e = seen == empty ? kSimFacts : static_cast<std::size_t>(seen - fact0);
        if (++i == prefix.size()) return revise[e];
        ++i;
        ++r;
      }
    };
  }

  /// Maps a trajectory to the rollout decisions it encodes.
  ControlSequence decode(const ToyPolicy& p, const Trajectory& t) const {
    ControlSequence c;
    c.template_id = "solution";
    c.truncated = t.truncated;
    if (t.steps.empty()) return c;
    auto symbol = [&](TokenId tok) { return p.vocabulary()[tok]; };
    c.initial_answer = symbol(t.steps[0].token).substr(4);
    std::size_t i = 1;
    while (i + 2 < t.steps.size() && symbol(t.steps[i].token) == "BACK") {
      BackRound round;
      const std::string seen = symbol(t.steps[i + 1].token);
      if (seen != "EMPTY") round.back_text = back_text(seen.substr(5));
      const std::string rev = symbol(t.steps[i + 2].token);
      if (rev != "KEEP") round.revised_answer = rev.substr(4);
      c.rounds.push_back(std::move(round));
      i += 3;
    }
    return c;
  }

  static std::string back_text(const std::string& fact_word) {
    return "Looking back at the image, the marker shows " + fact_word + ".";
  }

  /// Inverse of decode over rendered text; throws std::invalid_argument on
  /// text that is not a rendering of a control sequence for this task.
  Trajectory tokenize(const ToyPolicy& p, const SynthTask& task, std::string_view text,
                      const TemplateSet& templates = TemplateSet::defaults()) const {
    const auto parsed = parse_rollout(text, cfg_.grammar);
    if (parsed.format_class == FormatClass::Invalid || parsed.segments.empty()) {
      throw std::invalid_argument("demo for " + task.task_id + " does not parse");
    }
    const auto& tpl = templates.at("solution");
    auto norm = [](std::string_view s) { return reward_detail::collapse_whitespace(s); };
    auto match_answer = [&](std::string_view seg, std::initializer_list<const std::string*> patterns)
        -> std::optional<std::pair<std::size_t, std::size_t>> {
      std::size_t k = 0;
      for (const auto* pat : patterns) {
        for (std::size_t a = 0; a < kSimAnswers; ++a) {
          if (norm(seg) == norm(grammar_detail::fill(*pat, kSimAnswerSymbols[a]))) return std::make_pair(k, a);
        }
        ++k;
      }
      return std::nullopt;
    };
    auto fail = [&](const std::string& why) {
      return std::invalid_argument("demo for " + task.task_id + ": " + why);
    };

    Trajectory traj;
    auto next = next_context(p, task);
    auto emit = [&](const std::string& symbol) {
      auto ctx = next(traj.steps);
      if (!ctx) throw fail("more rounds than the environment allows");
      const TokenId tok = p.token(symbol);
      if (!p.action_index(*ctx, tok)) throw fail(symbol + " not legal in " + p.row(*ctx).name);
      traj.steps.push_back({*ctx, tok});
    };

    const auto first = match_answer(parsed.segments[0].text, {&tpl.opening, &tpl.conclusion});
    if (!first) throw fail("unrecognized opening");
    emit("ANS_" + kSimAnswerSymbols[first->second]);
    std::size_t k = 1;
    while (k + 1 < parsed.segments.size()) {
      const auto& back = parsed.segments[k];
      const auto& think = parsed.segments[k + 1];
      if (back.kind != SegmentKind::Back || think.kind != SegmentKind::Think) throw fail("unexpected segment order");
      emit("BACK");
      std::string seen = "EMPTY";
      for (const auto& f : kSimFactWords) {
        if (norm(back.text) == back_text(f)) seen = "FACT_" + f;
      }
      if (seen == "EMPTY" && !norm(back.text).empty()) throw fail("unrecognized back text");
      emit(seen);
      const auto rev = match_answer(think.text, {&tpl.revise, &tpl.keep});
      if (!rev) throw fail("unrecognized rethink");
      emit(rev->first == 0 ? "ANS_" + kSimAnswerSymbols[rev->second] : std::string("KEEP"));
      k += 2;
    }
    if (next(traj.steps)) emit("STOP");
    return traj;
  }

  std::string render(const ToyPolicy& p, const Trajectory& t) const { return render_rollout(decode(p, t)); }

 private:
  SimConfig cfg_;
  std::vector<std::size_t> lookup_;
};

/// Correct only when the boxed answer is right and it was either the
/// initial guess or some back segment revealed the task's visual fact.
inline RewardBreakdown env_reward(const SynthTask& task, std::string_view text, const GrammarConfig& grammar = {},
                                  const RewardConfig& cfg = {}) {
  const auto parsed = parse_rollout(text, grammar);
  const auto& truth = kSimAnswerSymbols.at(task.answer);
  double acc = accuracy_reward(parsed.boxed_answer, truth, cfg);
  if (acc > 0.0 && !parsed.segments.empty()) {
    bool guessed = false;
    for (std::size_t a = 0; a < kSimAnswers; ++a) {
      if (reward_detail::collapse_whitespace(parsed.segments[0].text) ==
          reward_detail::collapse_whitespace(grammar_detail::fill(TemplateSet::defaults().at("solution").opening,
                                                                  kSimAnswerSymbols[a]))) {
        guessed = a == task.answer;
      }
    }
    bool revealed = false;
    const std::string& fact = kSimFactWords.at(task.fact);
    for (const auto& s : parsed.segments) {
      if (s.kind != SegmentKind::Back) continue;
      std::istringstream words(s.text);
      std::string w;
      while (words >> w) {
        while (!w.empty() && std::ispunct(static_cast<unsigned char>(w.back()))) w.pop_back();
        if (w == fact) revealed = true;
      }
    }
    if (!guessed && !revealed) acc = 0.0;
  }
  RewardBreakdown r;
  r.format_class = parsed.format_class;
  r.r_format = format_reward(parsed, cfg);
  r.r_accuracy = acc;
  r.r_total = cfg.lambda * r.r_format + acc;
  return r;
}

/// Annotator for simulated questions: renders the verification or
/// correction demo for the request's task directly.
class SimAnnotator : public Annotator {
 public:
  explicit SimAnnotator(std::map<std::string, SynthTask> tasks) : tasks_(std::move(tasks)) {}

  std::string complete(const AnnotationRequest& req) override {
    const auto& task = tasks_.at(req.question_id);
    const auto parsed = parse_rollout(req.prediction);
    ControlSequence c;
    c.template_id = "solution";
    c.initial_answer = parsed.boxed_answer.value_or(kSimAnswerSymbols[task.distractor]);
    BackRound round{SimWorld::back_text(kSimFactWords[task.fact]), std::nullopt};
    if (c.initial_answer != kSimAnswerSymbols[task.answer]) round.revised_answer = kSimAnswerSymbols[task.answer];
    c.rounds.push_back(std::move(round));
    return render_rollout(c);
  }

 private:
  std::map<std::string, SynthTask> tasks_;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Exact probability that a sampled rollout contains a qualifying back,
/// averaged over the uniform task distribution.
inline double exact_trigger_rate(const SimWorld& world, const ToyPolicy& p, double temperature = 1.0) {
  const std::size_t rounds = world.max_rounds();
  auto rate = [&](const std::string& decide_prefix) {
    double total = 0.0;
    for (std::size_t v = 0; v < kSimFacts; ++v) {
      const auto look = p.probabilities(p.context("LOOK_" + kSimFactWords[v]), temperature);
      const double p_empty = look.back();
      double from = 0.0;  // trigger probability from round r onward
      for (std::size_t r = rounds; r-- > 0;) {
        const double p_back = p.probabilities(p.context(decide_prefix + std::to_string(r)), temperature)[0];
        from = p_back * ((1.0 - p_empty) + p_empty * from);
      }
      total += from;
    }
    return total / static_cast<double>(kSimFacts);
  };
  const double f = world.visible_fraction();
  return (1.0 - f) * rate("DECIDE_") + f * rate("DECIDE_SEEN_");
}

struct SampledEval {
  double trigger_rate = 0.0;
  double mean_reward = 0.0;
  double accuracy = 0.0;
};

inline SampledEval sampled_eval(const SimWorld& world, const ToyPolicy& p, const SimConfig& cfg, std::size_t n,
                                std::uint64_t seed) {
  std::mt19937_64 task_rng(seed);
  SampledEval e;
  for (std::size_t i = 0; i < n; ++i) {
    const auto task = world.make_task("eval" + std::to_string(i), task_rng);
    std::mt19937_64 rng(derive_seed(seed, task.task_id, 0));
    auto s = sample_trajectory(p, world.next_context(p, task), cfg.grpo.temperature, cfg.grpo.max_seq_len, rng);
    const auto text = world.render(p, s.trajectory);
    const auto r = env_reward(task, text, cfg.grammar, cfg.reward);
    e.trigger_rate += parse_rollout(text, cfg.grammar).back_trigger;
    e.mean_reward += r.r_total;
    e.accuracy += r.r_accuracy;
  }
  const double dn = static_cast<double>(std::max<std::size_t>(n, 1));
  e.trigger_rate /= dn;
  e.mean_reward /= dn;
  e.accuracy /= dn;
  return e;
}

/// Greedy-decode trigger rate over every task, weighted by the task distribution.
inline double greedy_trigger_rate(const SimWorld& world, const ToyPolicy& p, const SimConfig& cfg) {
  auto rate = [&](bool visible) {
    const auto tasks = world.all_tasks(visible);
    double trig = 0.0;
    for (const auto& t : tasks) {
      const auto traj = greedy_trajectory(p, world.next_context(p, t), cfg.grpo.max_seq_len);
      trig += parse_rollout(world.render(p, traj), cfg.grammar).back_trigger;
    }
    return trig / static_cast<double>(tasks.size());
  };
  const double f = world.visible_fraction();
  return (1.0 - f) * rate(false) + f * rate(true);
}

/// Checks that each trailing-window mean is at least the best earlier
/// window mean minus the current window's standard deviation.
struct TrailingWindowCheck {
  bool passed = true;
  std::size_t worst_step = 0;
  double worst_shortfall = 0.0;  // max(best_before - mean - sd), <= 0 when passed
};

inline TrailingWindowCheck trailing_window_check(const std::vector<double>& series, std::size_t w) {
  TrailingWindowCheck c;
  c.worst_shortfall = -std::numeric_limits<double>::infinity();
  if (w == 0 || series.size() < w) return c;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t end = w; end <= series.size(); ++end) {
    double mean = 0.0;
    for (std::size_t i = end - w; i < end; ++i) mean += series[i];
    mean /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t i = end - w; i < end; ++i) var += (series[i] - mean) * (series[i] - mean);
    const double sd = std::sqrt(var / static_cast<double>(w));
    if (std::isfinite(best)) {
      const double shortfall = best - mean - sd;
      if (shortfall > c.worst_shortfall) {
        c.worst_shortfall = shortfall;
        c.worst_step = end - 1;
      }
      if (shortfall > 0.0) c.passed = false;
    }
    best = std::max(best, mean);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic attention traces

/// Whitespace tokens of `text` with think/back spans; a flat decaying base
/// ratio with small noise, raised by `back_boost` inside back spans.
inline AttentionTrace synth_trace(std::string_view text, std::uint64_t seed, double back_boost = 0.3,
                                  const std::string& model_id = "sim-policy") {
  AttentionTrace t;
  t.meta = {model_id, 64, "synthetic"};
  std::istringstream in{std::string(text)};
  std::string tok;
  std::string label;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-0.02, 0.02);
  std::vector<std::string> labels;
  while (in >> tok) {
    std::string this_label = label;
    if (tok.starts_with("<think>")) this_label = label = "think";
    if (tok.starts_with("<back>")) this_label = label = "back";
    if (tok.starts_with("\\boxed")) this_label = label = "";
    const std::size_t i = t.tokens.size();
    double r = 0.08 + 0.04 * std::exp(-static_cast<double>(i) / 20.0) + noise(rng);
    if (this_label == "back") r += back_boost;
    t.tokens.push_back({i, tok, std::clamp(r, 0.0, 1.0)});
    labels.push_back(this_label);
    if (tok.ends_with("</think>") || tok.ends_with("</back>")) label.clear();
  }
  for (std::size_t i = 0; i < labels.size();) {
    std::size_t j = i;
    while (j < labels.size() && labels[j] == labels[i]) ++j;
    if (!labels[i].empty()) t.spans.push_back({labels[i], i, j});
    i = j;
  }
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Pipeline

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RunArtifacts {
  std::vector<StepReport> grpo_log;
  std::vector<double> sft_losses;
  std::size_t selected_questions = 0;
  std::size_t accepted_demos = 0;
  std::size_t sft_demos = 0;
  std::size_t correction_demos = 0;
  double base_trigger_exact = 0.0;
  SampledEval base_eval;
  double sft_greedy_trigger = 0.0;
  double sft_trigger_exact = 0.0;
  double final_trigger_exact = 0.0;
  SampledEval final_eval;
  TrailingWindowCheck reward_window;
  std::vector<AttentionTrace> traces;
  ToyPolicy base_policy;
  ToyPolicy sft_policy;
  ToyPolicy final_policy;
};

inline RunArtifacts run_pipeline(const SimConfig& cfg) {
  cfg.validate();
  RunArtifacts art;
  const SimWorld world(cfg);
  ToyPolicy policy = world.base_policy();
  art.base_policy = policy;
  art.base_trigger_exact = exact_trigger_rate(world, policy, cfg.grpo.temperature);
  art.base_eval = sampled_eval(world, policy, cfg, cfg.eval_samples, derive_seed(cfg.seed, "eval", 0));

  // (1) base rollouts over the curation pool
  std::vector<QuestionRecord> records;
  std::map<std::string, SynthTask> tasks;
  try {
    std::mt19937_64 task_rng(derive_seed(cfg.seed, "pool", 0));
    GrpoConfig gcfg = cfg.grpo;
    gcfg.group_size = static_cast<int>(cfg.curation_rollouts);
    for (std::size_t q = 0; q < cfg.pool_size; ++q) {
      char id[16];
      std::snprintf(id, sizeof id, "q%04zu", q);
      auto task = world.make_task(id, task_rng);
      auto group = sample_group(policy, task.task_id, world.next_context(policy, task), gcfg,
                                derive_seed(cfg.seed, "base", q));
      QuestionRecord rec;
      rec.question_id = task.task_id;
      rec.image_ref = "synthetic://" + task.task_id;
      rec.question_text = task.answer_visible
                              ? "The caption says the answer is " + kSimAnswerSymbols[task.answer] +
                                    ". Which answer does the marker in the image indicate?"
                              : "Which answer does the marker in the image indicate?";
      rec.ground_truth = kSimAnswerSymbols[task.answer];
      for (const auto& t : group.rollouts) {
        const auto text = world.render(policy, t);
        rec.rollouts.push_back({text, env_reward(task, text, cfg.grammar, cfg.reward)});
      }
      records.push_back(std::move(rec));
      tasks.emplace(task.task_id, task);
    }
  } catch (const std::exception& e) {
    throw StageError("rollout", e.what());
  }

  // (2)-(3) selection, annotation, validation, mixing
  std::vector<Trajectory> demos;
  try {
    SimAnnotator annotator(tasks);
    CurationConfig ccfg;
    ccfg.mode = AnnotationMode::Solution;
    ccfg.selection = cfg.selection;
    ccfg.reflection_rate = cfg.reflection_rate;
    ccfg.seed = derive_seed(cfg.seed, "mix", 0);
    ccfg.grammar = cfg.grammar;
    ccfg.max_in_flight = 1;
    const auto cur = run_curation(records, annotator, ccfg);
    for (const auto& r : cur.report) art.selected_questions += r.selected;
    art.accepted_demos = cur.accepted.size();
    if (cur.dataset.empty()) throw std::runtime_error("curation produced no demos");
    for (const auto& s : cur.dataset) {
      const std::string id = s.image_ref.substr(std::string("synthetic://").size());
      demos.push_back(world.tokenize(policy, tasks.at(id), s.response));
      art.correction_demos += s.label == SampleLabel::Correction;
    }
    art.sft_demos = demos.size();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("curate", e.what());
  }

  // (4) cold-start SFT
  try {
    for (std::size_t s = 0; s < cfg.sft_steps; ++s) {
      auto step = sft_step(policy, demos, cfg.sft_learning_rate);
      art.sft_losses.push_back(step.loss_before);
      policy = std::move(step.policy);
    }
  } catch (const std::exception& e) {
    throw StageError("sft", e.what());
  }
  art.sft_policy = policy;
  art.sft_greedy_trigger = greedy_trigger_rate(world, policy, cfg);
  art.sft_trigger_exact = exact_trigger_rate(world, policy, cfg.grpo.temperature);

  // (5) GRPO with the post-SFT policy as reference
  try {
    const ToyPolicy ref = policy;
    std::mt19937_64 task_rng(derive_seed(cfg.seed, "grpo", 0));
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, cfg.grpo_tasks_per_epoch / cfg.rollout_batch);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.grpo_epochs; ++epoch) {
      for (std::size_t k = 0; k < steps_per_epoch; ++k, ++step) {
        std::vector<RolloutGroup> groups;
        for (std::size_t b = 0; b < cfg.rollout_batch; ++b) {
          const auto task = world.make_task("s" + std::to_string(step) + "b" + std::to_string(b), task_rng);
          auto g = sample_group(policy, task.task_id, world.next_context(policy, task), cfg.grpo,
                                derive_seed(cfg.seed, "grpo-rollout", step));
          std::vector<double> rewards;
          for (const auto& t : g.rollouts) {
            const auto text = world.render(policy, t);
            rewards.push_back(env_reward(task, text, cfg.grammar, cfg.reward).r_total);
            g.texts.push_back(text);
            g.triggered.push_back(parse_rollout(text, cfg.grammar).back_trigger);
          }
          assign_rewards(g, std::move(rewards), cfg.grpo.advantage_eps);
          groups.push_back(std::move(g));
        }
        auto res = grpo_step(policy, groups, ref, cfg.grpo);
        res.report.step = step;
        art.grpo_log.push_back(res.report);
        policy = std::move(res.policy);
      }
    }
  } catch (const std::exception& e) {
    throw StageError("grpo", e.what());
  }
  art.final_policy = policy;
  art.final_trigger_exact = exact_trigger_rate(world, policy, cfg.grpo.temperature);
  art.final_eval = sampled_eval(world, policy, cfg, cfg.eval_samples, derive_seed(cfg.seed, "eval", 1));

  std::vector<double> rewards;
  for (const auto& r : art.grpo_log) rewards.push_back(r.mean_reward);
  art.reward_window = trailing_window_check(rewards, cfg.trailing_window);

  // attention traces from sampled rollouts of the final policy
  std::mt19937_64 trace_rng(derive_seed(cfg.seed, "trace", 0));
  for (std::size_t attempt = 0; art.traces.size() < cfg.trace_count && attempt < 100 * cfg.trace_count;
       ++attempt) {
    const auto task = world.make_task("trace" + std::to_string(attempt), trace_rng);
    std::mt19937_64 rng(derive_seed(cfg.seed, task.task_id, 0));
    auto s = sample_trajectory(policy, world.next_context(policy, task), cfg.grpo.temperature, cfg.grpo.max_seq_len, rng);
    const auto text = world.render(policy, s.trajectory);
    if (!parse_rollout(text, cfg.grammar).back_trigger) continue;
    art.traces.push_back(synth_trace(text, derive_seed(cfg.seed, task.task_id, 1)));
  }
  return art;
}

inline void write_training_csv(std::ostream& os, const std::vector<StepReport>& log) {
  os << StepReport::csv_header << '\n';
  for (const auto& r : log) write_csv_row(os, r);
}

inline void write_summary(std::ostream& os, const RunArtifacts& a) {
  auto old = os.precision(6);
  os << "selected_questions " << a.selected_questions << '\n'
     << "accepted_demos " << a.accepted_demos << '\n'
     << "sft_demos " << a.sft_demos << " (corrections " << a.correction_demos << ")\n"
     << "base_trigger_exact " << a.base_trigger_exact << '\n'
     << "base_trigger_sampled " << a.base_eval.trigger_rate << '\n'
     << "base_mean_reward " << a.base_eval.mean_reward << '\n'
     << "sft_final_loss " << (a.sft_losses.empty() ? 0.0 : a.sft_losses.back()) << '\n'
     << "sft_greedy_trigger " << a.sft_greedy_trigger << '\n'
     << "sft_trigger_exact " << a.sft_trigger_exact << '\n'
     << "grpo_steps " << a.grpo_log.size() << '\n'
     << "final_trigger_exact " << a.final_trigger_exact << '\n'
     << "final_trigger_sampled " << a.final_eval.trigger_rate << '\n'
     << "final_mean_reward " << a.final_eval.mean_reward << '\n'
     << "final_accuracy " << a.final_eval.accuracy << '\n'
     << "reward_window_check " << (a.reward_window.passed ? "pass" : "fail") << '\n';
  os.precision(old);
}

}  // namespace lookback
