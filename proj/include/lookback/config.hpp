#pragma once

// Global JSON configuration. Every section is optional; unknown keys and
// ill-typed values are rejected.

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include "lookback/annotator_http.hpp"
#include "lookback/curation.hpp"
#include "lookback/grpo.hpp"
#include "lookback/jsonl.hpp"
#include "lookback/reward.hpp"
#include "lookback/sim_env.hpp"

namespace lookback {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PathsConfig {
  std::string output_dir = ".";
};

struct GlobalConfig {
  std::uint64_t seed = 0;
  PathsConfig paths;
  GrammarConfig grammar;
  RewardConfig reward;
  GrpoConfig grpo;
  SelectionPolicy selection;
  AnnotatorSettings annotator;
  AnnotationMode mode = AnnotationMode::Semantic;
  double reflection_rate = 0.5;
  std::optional<std::size_t> mix_size;
  SimConfig sim;

  void validate() const {
    try {
      reward.validate();
      grpo.validate();
      sim.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!(selection.p_min >= 0.0 && selection.p_max <= 1.0 && selection.p_min < selection.p_max)) {
      throw ConfigError("selection band must satisfy 0 <= p_min < p_max <= 1");
    }
    if (!(reflection_rate >= 0.0 && reflection_rate <= 1.0)) throw ConfigError("reflection_rate must lie in [0,1]");
    if (annotator.max_in_flight < 1) throw ConfigError("annotator.max_in_flight must be >= 1");
    if (annotator.retries < 0) throw ConfigError("annotator.retries must be >= 0");
  }
};

namespace config_detail {

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + " has the wrong type");
    }
  }

  void get_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(name_ + "." + key + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }

  void get_optional_size(const char* key, std::optional<std::size_t>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    std::size_t v = 0;
    seen_.erase(key);
    get_size(key, v);
    out = v;
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) throw ConfigError("unknown key: " + name_ + "." + k);
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace config_detail

inline GlobalConfig config_from_json(const json& j) {
  using config_detail::Section;
  GlobalConfig c;
  Section root(j, "config");

  root.get("seed", c.seed);
  if (root.has("paths")) {
    Section s(root.at("paths"), "paths");
    s.get("output_dir", c.paths.output_dir);
    s.finish();
  }
  if (root.has("grammar")) {
    Section s(root.at("grammar"), "grammar");
    s.get_size("min_back_chars", c.grammar.min_back_chars);
    s.finish();
  }
  if (root.has("reward")) {
    Section s(root.at("reward"), "reward");
    s.get("lambda", c.reward.lambda);
    s.get("back_reward", c.reward.back_reward);
    s.get("cot_reward", c.reward.cot_reward);
    s.get("invalid_reward", c.reward.invalid_reward);
    std::string norm(to_string(c.reward.answer_norm));
    s.get("answer_norm", norm);
    try {
      c.reward.answer_norm = answer_norm_from_string(norm);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    s.finish();
  }
  if (root.has("grpo")) {
    Section s(root.at("grpo"), "grpo");
    s.get("group_size", c.grpo.group_size);
    s.get("clip_eps", c.grpo.clip_eps);
    s.get("kl_beta", c.grpo.kl_beta);
    s.get("advantage_eps", c.grpo.advantage_eps);
    s.get("learning_rate", c.grpo.learning_rate);
    s.get("temperature", c.grpo.temperature);
    s.get_size("max_seq_len", c.grpo.max_seq_len);
    std::string kl = c.grpo.kl_estimator == KlEstimator::K3 ? "k3" : "exact";
    s.get("kl_estimator", kl);
    if (kl == "k3") {
      c.grpo.kl_estimator = KlEstimator::K3;
    } else if (kl == "exact") {
      c.grpo.kl_estimator = KlEstimator::Exact;
    } else {
      throw ConfigError("grpo.kl_estimator must be k3 or exact");
    }
    s.finish();
  }
  if (root.has("selection")) {
    Section s(root.at("selection"), "selection");
    s.get("p_min", c.selection.p_min);
    s.get("p_max", c.selection.p_max);
    s.get_optional_size("top_k", c.selection.top_k);
    s.finish();
  }
  if (root.has("annotator")) {
    Section s(root.at("annotator"), "annotator");
    s.get("endpoint", c.annotator.endpoint);
    s.get("model", c.annotator.model);
    s.get("temperature", c.annotator.temperature);
    s.get("timeout_seconds", c.annotator.timeout_seconds);
    s.get("api_key_env", c.annotator.api_key_env);
    s.get("max_in_flight", c.annotator.max_in_flight);
    s.get("retries", c.annotator.retries);
    s.finish();
  }
  if (root.has("curation")) {
    Section s(root.at("curation"), "curation");
    std::string mode(to_string(c.mode));
    s.get("mode", mode);
    try {
      c.mode = annotation_mode_from_string(mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    s.get("reflection_rate", c.reflection_rate);
    s.get_optional_size("mix_size", c.mix_size);
    s.finish();
  }
  if (root.has("sim")) {
    Section s(root.at("sim"), "sim");
    s.get_size("max_back_rounds", c.sim.max_back_rounds);
    s.get_size("pool_size", c.sim.pool_size);
    s.get_size("curation_rollouts", c.sim.curation_rollouts);
    s.get_optional_size("top_k", c.sim.selection.top_k);
    s.get("reflection_rate", c.sim.reflection_rate);
    s.get_size("sft_steps", c.sim.sft_steps);
    s.get("sft_learning_rate", c.sim.sft_learning_rate);
    s.get_size("grpo_epochs", c.sim.grpo_epochs);
    s.get_size("grpo_tasks_per_epoch", c.sim.grpo_tasks_per_epoch);
    s.get_size("rollout_batch", c.sim.rollout_batch);
    s.get("grpo_learning_rate", c.sim.grpo.learning_rate);
    s.get_size("eval_samples", c.sim.eval_samples);
    s.get_size("trace_count", c.sim.trace_count);
    s.get_size("trailing_window", c.sim.trailing_window);
    s.finish();
  }
  root.finish();

  // shared sections feed the simulation too
  const double sim_lr = c.sim.grpo.learning_rate;
  c.sim.grpo = c.grpo;
  c.sim.grpo.learning_rate = sim_lr;
  c.sim.grammar = c.grammar;
  c.sim.reward = c.reward;
  c.sim.seed = c.seed;
  c.validate();
  return c;
}

inline GlobalConfig load_config(const std::string& path) {
  auto in = open_input(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

}  // namespace lookback
