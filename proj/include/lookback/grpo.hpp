#pragma once

// Group-relative policy optimization and the cold-start SFT objective on a
// ToyPolicy, with analytic gradients and a finite-difference checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lookback/policy.hpp"

namespace lookback {

enum class KlEstimator { K3, Exact };

struct GrpoConfig {
  int group_size = 12;
  double clip_eps = 0.2;
  double kl_beta = 0.01;
  double advantage_eps = 1e-6;
  double learning_rate = 1.0;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  KlEstimator kl_estimator = KlEstimator::K3;
  std::size_t max_seq_len = 16;

  void validate() const {
    if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw std::invalid_argument("clip_eps must be in (0,1)");
    if (!(kl_beta >= 0.0)) throw std::invalid_argument("kl_beta must be >= 0");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (!(advantage_eps >= 0.0)) throw std::invalid_argument("advantage_eps must be >= 0");
    if (max_seq_len == 0) throw std::invalid_argument("max_seq_len must be > 0");
  }
};

/// Thrown when an update would write non-finite parameters.
class StepRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RolloutGroup {
  std::string question_id;
  std::vector<Trajectory> rollouts;
  std::vector<std::string> texts;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<std::vector<double>> old_logprobs;  // per rollout, per token
  std::vector<bool> triggered;                    // optional, for reporting

  std::size_t size() const { return rollouts.size(); }
};

// ---------------------------------------------------------------------------
// Seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for rollout `index` of `question_id`; independent of sampling order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view question_id,
                                 std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ fnv1a(question_id)) + index);
}

// ---------------------------------------------------------------------------
// Sampling

/// Maps a generated prefix to the next context, or nullopt at end of sequence.
using NextContext = std::function<std::optional<ContextId>(std::span<const Step>)>;

struct SampledTrajectory {
  Trajectory trajectory;
  std::vector<double> logprobs;
};

template <class Rng>
SampledTrajectory sample_trajectory(const ToyPolicy& policy, const NextContext& next,
                                    double temperature, std::size_t max_len, Rng& rng) {
  SampledTrajectory out;
  while (true) {
    auto ctx = next(out.trajectory.steps);
    if (!ctx) break;
    if (out.trajectory.steps.size() >= max_len) {
      out.trajectory.truncated = true;
      break;
    }
    const TokenId tok = policy.sample(*ctx, temperature, rng);
    out.trajectory.steps.push_back(Step{*ctx, tok});
    out.logprobs.push_back(policy.log_prob(*ctx, tok, temperature));
  }
  return out;
}

inline Trajectory greedy_trajectory(const ToyPolicy& policy, const NextContext& next,
                                    std::size_t max_len) {
  Trajectory t;
  while (true) {
    auto ctx = next(t.steps);
    if (!ctx) break;
    if (t.steps.size() >= max_len) {
      t.truncated = true;
      break;
    }
    t.steps.push_back(Step{*ctx, policy.greedy(*ctx)});
  }
  return t;
}

/// Draws G rollouts from `policy` (acting as pi_old) with per-rollout derived
/// seeds. Rewards and advantages are left empty for the caller to fill.
inline RolloutGroup sample_group(const ToyPolicy& policy, std::string question_id,
                                 const NextContext& next, const GrpoConfig& cfg,
                                 std::uint64_t rng_seed) {
  cfg.validate();
  RolloutGroup g;
  g.question_id = std::move(question_id);
  for (int i = 0; i < cfg.group_size; ++i) {
    std::mt19937_64 rng(derive_seed(rng_seed, g.question_id, static_cast<std::uint64_t>(i)));
    auto s = sample_trajectory(policy, next, cfg.temperature, cfg.max_seq_len, rng);
    g.rollouts.push_back(std::move(s.trajectory));
    g.old_logprobs.push_back(std::move(s.logprobs));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Advantages

/// Group-normalized outcome advantages: (R_i - mean) / std_pop. Groups whose
/// population std does not exceed `eps` get all-zero advantages.
inline std::vector<double> compute_advantages(std::span<const double> rewards, double eps = 1e-6) {
  if (rewards.size() < 2) throw std::invalid_argument("advantages need a group of at least 2");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (!(sd > eps)) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

inline void assign_rewards(RolloutGroup& group, std::vector<double> rewards, double eps) {
  if (rewards.size() != group.size()) throw std::invalid_argument("reward count != group size");
  group.rewards = std::move(rewards);
  group.advantages = compute_advantages(group.rewards, eps);
}

// ---------------------------------------------------------------------------
// Objective

struct GrpoEvaluation {
  double objective = 0.0;
  std::vector<double> gradient;  // empty unless requested
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  std::size_t tokens = 0;
  // Per token, in rollout order: true when the clipped branch is active.
  std::vector<bool> clip_pattern;
};

namespace grpo_detail {

inline bool clipped_branch(double ratio, double adv, double eps) {
  return (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps);
}

inline void check_group(const RolloutGroup& g) {
  if (g.old_logprobs.size() != g.rollouts.size() || g.advantages.size() != g.rollouts.size()) {
    throw std::invalid_argument("group " + g.question_id +
                                ": rollout, advantage and logprob counts differ");
  }
  for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
    if (g.old_logprobs[i].size() != g.rollouts[i].steps.size()) {
      throw std::invalid_argument("group " + g.question_id + ": rollout " + std::to_string(i) +
                                  " has " + std::to_string(g.rollouts[i].steps.size()) +
                                  " tokens but " + std::to_string(g.old_logprobs[i].size()) +
                                  " logprob records");
    }
  }
}

}  // namespace grpo_detail

/// Mean over groups of
///   (1/G) sum_i (1/|o_i|) sum_t [ min(r A, clip(r, 1-eps, 1+eps) A) - beta KL_t ].
/// With K3, KL_t = u - log u - 1 where u = pi_ref / pi_new at the sampled
/// token. With Exact, KL_t is the full categorical KL of the context row.
inline GrpoEvaluation evaluate_grpo(const ToyPolicy& policy, std::span<const RolloutGroup> groups,
                                    const ToyPolicy& ref, const GrpoConfig& cfg,
                                    bool with_gradient) {
  using grpo_detail::clipped_branch;
  GrpoEvaluation ev;
  if (groups.empty()) throw std::invalid_argument("no rollout groups");
  if (with_gradient) ev.gradient.assign(policy.num_parameters(), 0.0);
  const double T = cfg.temperature;
  std::size_t clipped = 0;
  double kl_sum = 0.0;

  for (const auto& g : groups) {
    grpo_detail::check_group(g);
    const double G = static_cast<double>(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto& steps = g.rollouts[i].steps;
      if (steps.empty()) continue;
      const double w = 1.0 / (static_cast<double>(groups.size()) * G *
                              static_cast<double>(steps.size()));
      const double A = g.advantages[i];
      for (std::size_t t = 0; t < steps.size(); ++t) {
        const auto [ctx, tok] = steps[t];
        const double lp_new = policy.log_prob(ctx, tok, T);
        const double lp_ref = ref.log_prob(ctx, tok, T);
        const double ratio = std::exp(lp_new - g.old_logprobs[i][t]);
        const double lo = 1.0 - cfg.clip_eps, hi = 1.0 + cfg.clip_eps;
        const double surr_unclipped = ratio * A;
        const double surr_clipped = std::clamp(ratio, lo, hi) * A;
        const bool is_clipped = clipped_branch(ratio, A, cfg.clip_eps);
        const double surr = std::min(surr_unclipped, surr_clipped);

        double kl = 0.0;
        if (cfg.kl_estimator == KlEstimator::K3) {
          const double log_u = lp_ref - lp_new;
          kl = std::exp(log_u) - log_u - 1.0;
        } else {
          const auto p = policy.probabilities(ctx, T);
          const auto lpn = policy.log_probabilities(ctx, T);
          const auto lpr = ref.log_probabilities(ctx, T);
          for (std::size_t j = 0; j < p.size(); ++j) kl += p[j] * (lpn[j] - lpr[j]);
        }

        ev.objective += w * (surr - cfg.kl_beta * kl);
        ev.clip_pattern.push_back(is_clipped);
        clipped += is_clipped;
        kl_sum += kl;
        ++ev.tokens;

        if (!with_gradient) continue;
        double coeff = 0.0;  // multiplies d lp_new / d logits
        if (!is_clipped) coeff += A * ratio;
        if (cfg.kl_estimator == KlEstimator::K3) {
          coeff -= cfg.kl_beta * (1.0 - std::exp(lp_ref - lp_new));
        } else {
          const auto p = policy.probabilities(ctx, T);
          const auto lpn = policy.log_probabilities(ctx, T);
          const auto lpr = ref.log_probabilities(ctx, T);
          const std::size_t off = policy.row(ctx).offset;
          for (std::size_t j = 0; j < p.size(); ++j) {
            ev.gradient[off + j] -=
                w * cfg.kl_beta * p[j] * ((lpn[j] - lpr[j]) - kl) / T;
          }
        }
        if (coeff != 0.0) policy.accumulate_log_prob_gradient(ctx, tok, T, w * coeff, ev.gradient);
      }
    }
  }
  if (ev.tokens > 0) {
    ev.clip_fraction = static_cast<double>(clipped) / static_cast<double>(ev.tokens);
    ev.mean_kl = kl_sum / static_cast<double>(ev.tokens);
  }
  return ev;
}

inline double grpo_objective(const ToyPolicy& policy, const RolloutGroup& group,
                             const ToyPolicy& ref, const GrpoConfig& cfg) {
  return evaluate_grpo(policy, std::span<const RolloutGroup>(&group, 1), ref, cfg, false).objective;
}

inline double grpo_objective(const ToyPolicy& policy, std::span<const RolloutGroup> groups,
                             const ToyPolicy& ref, const GrpoConfig& cfg) {
  return evaluate_grpo(policy, groups, ref, cfg, false).objective;
}

struct StepReport {
  std::size_t step = 0;
  double objective = 0.0;
  double mean_reward = 0.0;
  double trigger_rate = 0.0;
  double mean_len = 0.0;
  double clip_frac = 0.0;
  double mean_kl = 0.0;

  static constexpr std::string_view csv_header =
      "step,objective,mean_reward,trigger_rate,mean_len,clip_frac,mean_kl";
};

inline void write_csv_row(std::ostream& os, const StepReport& r) {
  auto old = os.precision(17);
  os << r.step << ',' << r.objective << ',' << r.mean_reward << ',' << r.trigger_rate << ','
     << r.mean_len << ',' << r.clip_frac << ',' << r.mean_kl << '\n';
  os.precision(old);
}

struct StepResult {
  ToyPolicy policy;
  StepReport report;
};

/// One gradient-ascent update on the GRPO objective.
inline StepResult grpo_step(const ToyPolicy& policy, std::span<const RolloutGroup> groups,
                            const ToyPolicy& ref, const GrpoConfig& cfg) {
  cfg.validate();
  const auto ev = evaluate_grpo(policy, groups, ref, cfg, true);
  for (std::size_t k = 0; k < ev.gradient.size(); ++k) {
    if (!std::isfinite(ev.gradient[k])) {
      throw StepRejected("non-finite gradient at " + policy.parameter_name(k));
    }
  }
  StepResult out{policy, {}};
  auto params = out.policy.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) params[k] += cfg.learning_rate * ev.gradient[k];

  StepReport& r = out.report;
  r.objective = ev.objective;
  r.clip_frac = ev.clip_fraction;
  r.mean_kl = ev.mean_kl;
  std::size_t n = 0, trig = 0, len = 0;
  double reward = 0.0;
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      ++n;
      len += g.rollouts[i].steps.size();
      if (i < g.rewards.size()) reward += g.rewards[i];
      if (i < g.triggered.size()) trig += g.triggered[i];
    }
  }
  if (n > 0) {
    r.mean_reward = reward / static_cast<double>(n);
    r.trigger_rate = static_cast<double>(trig) / static_cast<double>(n);
    r.mean_len = static_cast<double>(len) / static_cast<double>(n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cold-start SFT

/// Mean negative log-likelihood per target token.
inline double sft_loss(const ToyPolicy& policy, std::span<const Trajectory> demos) {
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& d : demos) {
    for (const auto& s : d.steps) {
      nll -= policy.log_prob(s.context, s.token);
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("SFT batch has no target tokens");
  return nll / static_cast<double>(n);
}

inline std::vector<double> sft_gradient(const ToyPolicy& policy, std::span<const Trajectory> demos) {
  std::size_t n = 0;
  for (const auto& d : demos) n += d.steps.size();
  if (n == 0) throw std::invalid_argument("SFT batch has no target tokens");
  std::vector<double> grad(policy.num_parameters(), 0.0);
  const double w = -1.0 / static_cast<double>(n);
  for (const auto& d : demos) {
    for (const auto& s : d.steps) policy.accumulate_log_prob_gradient(s.context, s.token, 1.0, w, grad);
  }
  return grad;
}

struct SftStepResult {
  ToyPolicy policy;
  double loss_before = 0.0;
};

/// One gradient-descent step on the SFT loss.
inline SftStepResult sft_step(const ToyPolicy& policy, std::span<const Trajectory> demos,
                              double learning_rate) {
  SftStepResult out{policy, sft_loss(policy, demos)};
  const auto grad = sft_gradient(policy, demos);
  auto params = out.policy.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!std::isfinite(grad[k])) throw StepRejected("non-finite SFT gradient at " + policy.parameter_name(k));
    params[k] -= learning_rate * grad[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient verification

enum class ObjectiveKind { Grpo, Sft };

struct GradientBatch {
  ObjectiveKind kind = ObjectiveKind::Sft;
  std::vector<Trajectory> demos;     // Sft
  std::vector<RolloutGroup> groups;  // Grpo
  const ToyPolicy* ref = nullptr;    // Grpo
  GrpoConfig cfg;                    // Grpo
};

struct GradientCheckEntry {
  std::size_t index = 0;
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradientCheckReport {
  double max_rel_error = 0.0;
  bool passed = true;
  std::size_t checked = 0;
  std::vector<GradientCheckEntry> worst;  // descending by rel_error
  std::vector<std::size_t> excluded;      // clip-kink coordinates
};

/// Compares analytic gradients with central differences over every
/// parameter. Relative error is |a - n| / max(|a|, |n|); pairs where both
/// magnitudes are below `abs_floor` count as agreeing. For GRPO, coordinates
/// whose +/-h perturbation flips any token's clip branch sit on a
/// nondifferentiable point and are excluded.
inline GradientCheckReport check_gradients(const ToyPolicy& policy, const GradientBatch& batch,
                                           double tol = 1e-4, double h = 1e-5,
                                           double abs_floor = 1e-7, std::size_t keep_worst = 5) {
  GradientCheckReport rep;
  std::vector<double> analytic;
  std::vector<bool> base_pattern;
  auto value = [&](const ToyPolicy& p, std::vector<bool>* pattern) {
    if (batch.kind == ObjectiveKind::Sft) return sft_loss(p, batch.demos);
    if (!batch.ref) throw std::invalid_argument("GRPO gradient check needs a reference policy");
    auto ev = evaluate_grpo(p, batch.groups, *batch.ref, batch.cfg, false);
    if (pattern) *pattern = std::move(ev.clip_pattern);
    return ev.objective;
  };
  if (batch.kind == ObjectiveKind::Sft) {
    analytic = sft_gradient(policy, batch.demos);
  } else {
    if (!batch.ref) throw std::invalid_argument("GRPO gradient check needs a reference policy");
    auto ev = evaluate_grpo(policy, batch.groups, *batch.ref, batch.cfg, true);
    analytic = std::move(ev.gradient);
    base_pattern = std::move(ev.clip_pattern);
  }

  std::vector<GradientCheckEntry> entries;
  ToyPolicy probe = policy;
  auto params = probe.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double orig = params[k];
    std::vector<bool> plus_pattern, minus_pattern;
    params[k] = orig + h;
    const double f_plus = value(probe, &plus_pattern);
    params[k] = orig - h;
    const double f_minus = value(probe, &minus_pattern);
    params[k] = orig;
    if (batch.kind == ObjectiveKind::Grpo &&
        (plus_pattern != minus_pattern || plus_pattern != base_pattern)) {
      rep.excluded.push_back(k);
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * h);
    const double scale = std::max(std::abs(analytic[k]), std::abs(numeric));
    const double rel = scale < abs_floor ? 0.0 : std::abs(analytic[k] - numeric) / scale;
    entries.push_back({k, policy.parameter_name(k), analytic[k], numeric, rel});
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.checked;
  }
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
  if (entries.size() > keep_worst) entries.resize(keep_worst);
  rep.worst = std::move(entries);
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace lookback
