#pragma once

// Explicit-parameter autoregressive categorical policy.
//
// Every context row owns a logit vector over the subset of the vocabulary
// that is legal in that context. All rows live in one flat parameter
// buffer so gradients and updates are plain vector arithmetic.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace lookback {

using TokenId = std::uint32_t;
using ContextId = std::uint32_t;

struct Step {
  ContextId context = 0;
  TokenId token = 0;
  bool operator==(const Step&) const = default;
};

struct Trajectory {
  std::vector<Step> steps;
  bool truncated = false;
  bool operator==(const Trajectory&) const = default;
};

class ToyPolicy {
 public:
  struct Row {
    std::string name;
    std::vector<TokenId> actions;
    std::size_t offset = 0;  // into the flat parameter buffer
  };

  ToyPolicy() = default;
  explicit ToyPolicy(std::vector<std::string> vocabulary) : vocabulary_(std::move(vocabulary)) {
    for (TokenId t = 0; t < vocabulary_.size(); ++t) {
      if (!token_index_.emplace(vocabulary_[t], t).second) {
        throw std::invalid_argument("duplicate vocabulary symbol: " + vocabulary_[t]);
      }
    }
  }

  /// Adds a context row. Empty `logits` means uniform (all zeros).
  ContextId add_context(std::string name, std::vector<TokenId> actions,
                        std::vector<double> logits = {}) {
    if (actions.empty()) throw std::invalid_argument("context needs at least one action");
    for (TokenId a : actions) {
      if (a >= vocabulary_.size()) throw std::out_of_range("action outside vocabulary");
    }
    if (logits.empty()) logits.assign(actions.size(), 0.0);
    if (logits.size() != actions.size()) {
      throw std::invalid_argument("logit count does not match action count");
    }
    if (context_index_.contains(name)) {
      throw std::invalid_argument("duplicate context name: " + name);
    }
    const auto id = static_cast<ContextId>(rows_.size());
    context_index_.emplace(name, id);
    rows_.push_back(Row{std::move(name), std::move(actions), params_.size()});
    params_.insert(params_.end(), logits.begin(), logits.end());
    return id;
  }

  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  const std::vector<Row>& rows() const { return rows_; }
  const Row& row(ContextId c) const { return rows_.at(c); }

  TokenId token(const std::string& symbol) const {
    auto it = token_index_.find(symbol);
    if (it == token_index_.end()) throw std::out_of_range("token outside vocabulary: " + symbol);
    return it->second;
  }
  ContextId context(const std::string& name) const {
    auto it = context_index_.find(name);
    if (it == context_index_.end()) throw std::out_of_range("unknown context: " + name);
    return it->second;
  }

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  std::size_t num_parameters() const { return params_.size(); }

  std::span<double> logits(ContextId c) {
    const Row& r = rows_.at(c);
    return std::span<double>(params_).subspan(r.offset, r.actions.size());
  }
  std::span<const double> logits(ContextId c) const {
    const Row& r = rows_.at(c);
    return std::span<const double>(params_).subspan(r.offset, r.actions.size());
  }

  /// Index of `token` within the row's action list.
  std::optional<std::size_t> action_index(ContextId c, TokenId token) const {
    const auto& acts = rows_.at(c).actions;
    auto it = std::find(acts.begin(), acts.end(), token);
    if (it == acts.end()) return std::nullopt;
    return static_cast<std::size_t>(it - acts.begin());
  }

  std::vector<double> log_probabilities(ContextId c, double temperature = 1.0) const {
    auto z = logits(c);
    double m = -std::numeric_limits<double>::infinity();
    for (double v : z) m = std::max(m, v / temperature);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v / temperature - m);
    const double lse = m + std::log(sum);
    std::vector<double> out(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] / temperature - lse;
    return out;
  }

  std::vector<double> probabilities(ContextId c, double temperature = 1.0) const {
    auto lp = log_probabilities(c, temperature);
    for (double& v : lp) v = std::exp(v);
    return lp;
  }

  double log_prob(ContextId c, TokenId token, double temperature = 1.0) const {
    auto idx = action_index(c, token);
    if (!idx) {
      throw std::out_of_range("token " + symbol_or_id(token) + " not legal in context " +
                              rows_.at(c).name);
    }
    return log_probabilities(c, temperature)[*idx];
  }

  /// grad += weight * d log pi(token | c) / d logits
  void accumulate_log_prob_gradient(ContextId c, TokenId token, double temperature, double weight,
                                    std::span<double> grad) const {
    auto idx = action_index(c, token);
    if (!idx) throw std::out_of_range("token not legal in context " + rows_.at(c).name);
    const auto p = probabilities(c, temperature);
    const std::size_t off = rows_[c].offset;
    for (std::size_t j = 0; j < p.size(); ++j) {
      grad[off + j] += weight * ((j == *idx ? 1.0 : 0.0) - p[j]) / temperature;
    }
  }

  template <class Rng>
  TokenId sample(ContextId c, double temperature, Rng& rng) const {
    const auto p = probabilities(c, temperature);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double u = unif(rng);
    const auto& acts = rows_[c].actions;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (u < p[j]) return acts[j];
      u -= p[j];
    }
    return acts.back();
  }

  /// Argmax; ties go to the earliest action.
  TokenId greedy(ContextId c) const {
    auto z = logits(c);
    std::size_t best = 0;
    for (std::size_t j = 1; j < z.size(); ++j) {
      if (z[j] > z[best]) best = j;
    }
    return rows_[c].actions[best];
  }

  /// Checks the softmax normalization and finiteness invariants.
  bool valid(double tol = 1e-12) const {
    for (ContextId c = 0; c < rows_.size(); ++c) {
      double s = 0.0;
      for (double v : probabilities(c)) {
        if (!std::isfinite(v)) return false;
        s += v;
      }
      if (std::abs(s - 1.0) > tol) return false;
      for (double v : log_probabilities(c)) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

  std::string parameter_name(std::size_t k) const {
    for (const auto& r : rows_) {
      if (k >= r.offset && k < r.offset + r.actions.size()) {
        return r.name + "/" + vocabulary_[r.actions[k - r.offset]];
      }
    }
    return "?";
  }

 private:
  std::string symbol_or_id(TokenId t) const {
    return t < vocabulary_.size() ? vocabulary_[t] : std::to_string(t);
  }

  std::vector<std::string> vocabulary_;
  std::unordered_map<std::string, TokenId> token_index_;
  std::unordered_map<std::string, ContextId> context_index_;
  std::vector<Row> rows_;
  std::vector<double> params_;
};

/// Builds a logit row from target probabilities (log p, so softmax gives p back).
inline std::vector<double> logits_from_probabilities(const std::vector<double>& p) {
  std::vector<double> z(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (!(p[j] > 0.0)) throw std::invalid_argument("probabilities must be positive");
    z[j] = std::log(p[j]);
  }
  return z;
}

}  // namespace lookback
