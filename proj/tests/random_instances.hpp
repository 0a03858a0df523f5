#pragma once

// Random small GRPO/SFT problems for gradient checks.

#include <random>
#include <vector>

#include "lookback/grpo.hpp"

namespace lookback::test_support {

struct RandomInstance {
  ToyPolicy policy;
  ToyPolicy ref;
  GradientBatch sft;
  GradientBatch grpo;
};

inline RandomInstance make_random_instance(std::uint64_t seed, KlEstimator kl = KlEstimator::K3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> n_ctx(2, 4), n_act(2, 4), len(1, 4);

  std::vector<std::string> vocab;
  for (int i = 0; i < 6; ++i) vocab.push_back("t" + std::to_string(i));
  ToyPolicy policy(vocab);
  const int contexts = n_ctx(rng);
  for (int c = 0; c < contexts; ++c) {
    std::vector<TokenId> acts(6);
    for (TokenId t = 0; t < 6; ++t) acts[t] = t;
    std::shuffle(acts.begin(), acts.end(), rng);
    acts.resize(static_cast<std::size_t>(n_act(rng)));
    std::vector<double> logits;
    for (std::size_t j = 0; j < acts.size(); ++j) logits.push_back(normal(rng));
    policy.add_context("c" + std::to_string(c), acts, logits);
  }
  auto perturbed = [&](double scale) {
    ToyPolicy p = policy;
    for (double& v : p.parameters()) v += scale * normal(rng);
    return p;
  };
  const ToyPolicy old = perturbed(0.05);
  ToyPolicy ref = perturbed(0.3);

  GrpoConfig cfg;
  cfg.group_size = 4;
  cfg.kl_beta = 0.05;
  cfg.kl_estimator = kl;
  cfg.temperature = std::uniform_real_distribution<double>(0.7, 1.3)(rng);

  auto random_trajectory = [&](const ToyPolicy& from) {
    Trajectory t;
    const int n = len(rng);
    for (int k = 0; k < n; ++k) {
      const auto c = static_cast<ContextId>(rng() % static_cast<std::uint64_t>(contexts));
      t.steps.push_back({c, from.sample(c, cfg.temperature, rng)});
    }
    return t;
  };

  GradientBatch sft;
  sft.kind = ObjectiveKind::Sft;
  for (int d = 0; d < 3; ++d) sft.demos.push_back(random_trajectory(policy));

  GradientBatch grpo;
  grpo.kind = ObjectiveKind::Grpo;
  grpo.cfg = cfg;
  for (int g = 0; g < 2; ++g) {
    RolloutGroup group;
    group.question_id = "g" + std::to_string(g);
    std::vector<double> rewards;
    for (int i = 0; i < cfg.group_size; ++i) {
      auto t = random_trajectory(old);
      std::vector<double> lps;
      for (const auto& s : t.steps) lps.push_back(old.log_prob(s.context, s.token, cfg.temperature));
      group.rollouts.push_back(std::move(t));
      group.old_logprobs.push_back(std::move(lps));
      rewards.push_back(std::uniform_real_distribution<double>(0.0, 1.1)(rng));
    }
    assign_rewards(group, rewards, cfg.advantage_eps);
    grpo.groups.push_back(std::move(group));
  }
  return RandomInstance{std::move(policy), std::move(ref), std::move(sft), std::move(grpo)};
}

}  // namespace lookback::test_support
