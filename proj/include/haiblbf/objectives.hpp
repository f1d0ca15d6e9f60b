#pragma once

// Training objectives over a bandit log, with analytic gradients.
//
//   IPS:           (1/N) sum (r - lambda) * min(pi(a|x) / pi0(a|x), M)
//   collaboration: (1/N) sum p (r - C) + (1 - p) * min(pi(a|x) / pi0(a|x), M) * (r - lambda)
//                  with p = d(human | x)
//   personalized:  (1/N) sum (r - C_h) d(h|x) / d0(h|x)
//                           + (r - lambda) * min(d(alg|x) pi(a|x) / (d0(h|x) pi0(a|x,h)), M)
//
// A capped weight contributes the constant M and no gradient. The human
// branch is an on-policy average over the logging humans, so it carries no
// importance weight. All objectives are maximized.
//
// Precondition (not checkable from data): no unobserved confounders, i.e.
// given x the potential rewards are independent of the logged action and of
// the expert assignment.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "haiblbf/errors.hpp"
#include "haiblbf/nnkit.hpp"
#include "haiblbf/propensity.hpp"
#include "haiblbf/simkit.hpp"

namespace haiblbf::objectives {

enum class PropensitySource { kLogged, kEstimated };

struct ObjectiveConfig {
  double truncation = 10.0;
  double baseline = 0.0;  // lambda
  /// Subtract lambda from the human branch as well. The expected value of a
  /// lambda-shifted importance-weighted term is (value - lambda), so shifting
  /// only the algorithm branch tilts the router towards humans.
  bool baseline_human_branch = false;
  /// Personalized objective: divide the algorithm-branch weight by
  /// d0(h_i | x_i) as well as by pi0(a_i | x_i, h_i). Summed over the
  /// logging experts this counts the algorithm branch K times, so it is off
  /// by default.
  bool assignment_weight_on_algorithm_branch = false;
  /// Personalized objective: leave pi0(a_i | x_i, h_i) out of the
  /// algorithm-branch weight (sensitivity analysis only).
  bool drop_behavior_propensity = false;

  void validate() const {
    if (!(truncation >= 1.0)) throw std::invalid_argument("truncation cap must be >= 1");
    if (!(baseline >= 0.0 && baseline <= 1.0)) throw std::invalid_argument("baseline must lie in [0, 1]");
  }
};

/// A log record with every denominator resolved.
struct Sample {
  std::size_t record = 0;
  std::size_t action = 0;
  double reward = 0.0;
  std::size_t expert = 0;
  double behavior = 1.0;               // pi0(a | x)
  double behavior_given_expert = 1.0;  // pi0(a | x, h)
  double assignment = 1.0;             // d0(h | x)
  double expert_cost = 0.0;            // C_h(x) of the logging expert
  double mean_cost = 0.0;              // cost of a uniformly drawn expert
};

class PreparedLog {
 public:
  PreparedLog() = default;
  PreparedLog(const sim::BanditLog& log, std::vector<Sample> samples)
      : log_(&log), samples_(std::move(samples)) {}

  std::size_t size() const { return samples_.size(); }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  std::span<const double> x(std::size_t i) const { return log_->x(samples_[i].record); }
  std::size_t num_actions() const { return log_->num_actions(); }
  std::size_t num_features() const { return log_->num_features(); }
  std::size_t num_experts() const { return log_->num_experts(); }
  const sim::BanditLog& log() const { return *log_; }
  std::vector<Sample>& samples() { return samples_; }

 private:
  const sim::BanditLog* log_ = nullptr;
  std::vector<Sample> samples_;
};

inline void check_denominator(double p, const char* what) {
  if (!(p > 0.0) || !std::isfinite(p)) {
    throw NumericError(std::string("non-positive or non-finite ") + what);
  }
}

/// Resolves propensities (logged or estimated) and costs for every record.
/// `estimates` may be null for the logged source; its conditional behavior
/// model is only consulted if it was fitted.
inline PreparedLog prepare_log(const sim::BanditLog& log, const sim::ExpertPool& pool, PropensitySource source,
                               const propensity::PropensityEstimates* estimates = nullptr) {
  if (pool.size() != log.num_experts()) throw DataError("log and pool disagree on the number of experts");
  if (source == PropensitySource::kEstimated && estimates == nullptr) {
    throw UsageError("estimated propensities requested but none supplied");
  }
  std::vector<Sample> samples;
  samples.reserve(log.size());
  std::vector<double> buf;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& r = log[i];
    const auto x = log.x(i);
    Sample s;
    s.record = i;
    s.action = r.action;
    s.reward = r.reward;
    s.expert = r.expert;
    s.expert_cost = pool[r.expert].cost(x);
    s.mean_cost = pool.mean_cost(x);
    if (source == PropensitySource::kLogged) {
      if (!r.propensity || !r.marginal_propensity) {
        throw DataError("record " + std::to_string(i) + " has no logged propensity");
      }
      s.behavior = *r.marginal_propensity;
      s.behavior_given_expert = *r.propensity;
      s.assignment = pool.assignment()[r.expert];
    } else {
      s.behavior = estimates->behavior.probability(x, r.expert, r.action);
      s.behavior_given_expert = estimates->behavior_given_expert.num_actions() > 0
                                    ? estimates->behavior_given_expert.probability(x, r.expert, r.action)
                                    : s.behavior;
      s.assignment = estimates->assignment.probability(x, r.expert);
    }
    check_denominator(s.behavior, "behavior propensity");
    check_denominator(s.behavior_given_expert, "expert behavior propensity");
    check_denominator(s.assignment, "assignment probability");
    samples.push_back(s);
  }
  return PreparedLog(log, std::move(samples));
}

enum class Trainable { kNone, kPolicy, kRouter, kJoint };

inline bool wants_policy(Trainable t) { return t == Trainable::kPolicy || t == Trainable::kJoint; }
inline bool wants_router(Trainable t) { return t == Trainable::kRouter || t == Trainable::kJoint; }

struct ObjectiveResult {
  double value = 0.0;
  nn::Gradient policy;  // empty unless requested
  nn::Gradient router;  // empty unless requested
};

/// Per-record summands of the collaboration objective.
struct PerSampleTerms {
  double weight = 0.0;               // truncated importance weight
  double route_probability = 0.0;    // d(human | x); 0 for pure IPS
  double contribution = 0.0;
};

namespace detail {

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline void check_policy(const nn::DenseNet& policy, const PreparedLog& log) {
  if (policy.head() != nn::Head::kSoftmax || policy.output_dim() != log.num_actions()) {
    throw ShapeError("policy must be a softmax over the action space");
  }
}

}  // namespace detail

inline ObjectiveResult ips_objective(const nn::DenseNet& policy, const PreparedLog& log, const ObjectiveConfig& cfg,
                                     std::span<const std::size_t> batch = {},
                                     Trainable trainable = Trainable::kPolicy) {
  cfg.validate();
  detail::check_policy(policy, log);
  std::vector<std::size_t> all;
  if (batch.empty()) {
    all = detail::all_indices(log.size());
    batch = all;
  }
  ObjectiveResult res;
  const bool grad = wants_policy(trainable);
  if (grad) res.policy = nn::Gradient(policy.num_params());
  nn::ForwardCache cache;
  std::vector<double> upstream(log.num_actions(), 0.0);
  for (std::size_t idx : batch) {
    const Sample& s = log[idx];
    const auto pi = policy.forward(log.x(idx), cache);
    const double ratio = pi[s.action] / s.behavior;
    const double shifted = s.reward - cfg.baseline;
    const bool capped = ratio > cfg.truncation;
    res.value += shifted * (capped ? cfg.truncation : ratio);
    if (grad && !capped && shifted != 0.0) {
      upstream[s.action] = shifted / s.behavior;
      policy.backward(cache, upstream, res.policy);
      upstream[s.action] = 0.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  res.value *= inv;
  if (grad) res.policy *= inv;
  return res;
}

/// `router` == nullptr means the router always picks the algorithm.
inline ObjectiveResult collab_objective(const nn::DenseNet& policy, const nn::DenseNet* router,
                                        const PreparedLog& log, const ObjectiveConfig& cfg,
                                        Trainable trainable, std::span<const std::size_t> batch = {}) {
  cfg.validate();
  detail::check_policy(policy, log);
  if (router != nullptr && (router->head() != nn::Head::kSigmoid || router->output_dim() != 1)) {
    throw ShapeError("collaboration router must have a single logistic output");
  }
  std::vector<std::size_t> all;
  if (batch.empty()) {
    all = detail::all_indices(log.size());
    batch = all;
  }
  ObjectiveResult res;
  const bool pgrad = wants_policy(trainable);
  const bool rgrad = wants_router(trainable) && router != nullptr;
  if (pgrad) res.policy = nn::Gradient(policy.num_params());
  if (rgrad) res.router = nn::Gradient(router->num_params());
  nn::ForwardCache pcache, rcache;
  std::vector<double> upstream(log.num_actions(), 0.0);
  double rup[1] = {0.0};
  for (std::size_t idx : batch) {
    const Sample& s = log[idx];
    const auto x = log.x(idx);
    const auto pi = policy.forward(x, pcache);
    const double p = router != nullptr ? router->forward(x, rcache)[0] : 0.0;
    const double ratio = pi[s.action] / s.behavior;
    const bool capped = ratio > cfg.truncation;
    const double w = capped ? cfg.truncation : ratio;
    const double alg_shifted = s.reward - cfg.baseline;
    const double human = s.reward - s.mean_cost - (cfg.baseline_human_branch ? cfg.baseline : 0.0);
    res.value += p * human + (1.0 - p) * w * alg_shifted;
    if (pgrad && !capped && alg_shifted != 0.0 && p != 1.0) {
      upstream[s.action] = (1.0 - p) * alg_shifted / s.behavior;
      policy.backward(pcache, upstream, res.policy);
      upstream[s.action] = 0.0;
    }
    if (rgrad) {
      rup[0] = human - w * alg_shifted;
      router->backward(rcache, rup, res.router);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  res.value *= inv;
  if (pgrad) res.policy *= inv;
  if (rgrad) res.router *= inv;
  return res;
}

inline std::vector<PerSampleTerms> collab_terms(const nn::DenseNet& policy, const nn::DenseNet* router,
                                                const PreparedLog& log, const ObjectiveConfig& cfg) {
  cfg.validate();
  detail::check_policy(policy, log);
  std::vector<PerSampleTerms> out;
  out.reserve(log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    const Sample& s = log[i];
    const auto pi = policy.forward(log.x(i));
    const double p = router != nullptr ? router->forward(log.x(i))[0] : 0.0;
    PerSampleTerms t;
    t.weight = std::min(pi[s.action] / s.behavior, cfg.truncation);
    t.route_probability = p;
    const double human = s.reward - s.mean_cost - (cfg.baseline_human_branch ? cfg.baseline : 0.0);
    t.contribution = p * human + (1.0 - p) * t.weight * (s.reward - cfg.baseline);
    out.push_back(t);
  }
  return out;
}

/// Router over K experts plus the algorithm (last output). `router` ==
/// nullptr means the algorithm is always chosen.
inline ObjectiveResult personalized_objective(const nn::DenseNet& policy, const nn::DenseNet* router,
                                              const PreparedLog& log, const ObjectiveConfig& cfg,
                                              Trainable trainable, std::span<const std::size_t> batch = {}) {
  cfg.validate();
  detail::check_policy(policy, log);
  const std::size_t K = log.num_experts();
  if (router != nullptr && (router->head() != nn::Head::kSoftmax || router->output_dim() != K + 1)) {
    throw ShapeError("personalized router must be a softmax over K experts plus the algorithm");
  }
  std::vector<std::size_t> all;
  if (batch.empty()) {
    all = detail::all_indices(log.size());
    batch = all;
  }
  ObjectiveResult res;
  const bool pgrad = wants_policy(trainable);
  const bool rgrad = wants_router(trainable) && router != nullptr;
  if (pgrad) res.policy = nn::Gradient(policy.num_params());
  if (rgrad) res.router = nn::Gradient(router->num_params());
  nn::ForwardCache pcache, rcache;
  std::vector<double> pup(log.num_actions(), 0.0);
  std::vector<double> rup(K + 1, 0.0);
  for (std::size_t idx : batch) {
    const Sample& s = log[idx];
    if (s.expert >= K) throw DataError("record refers to unknown expert " + std::to_string(s.expert));
    const auto x = log.x(idx);
    const auto pi = policy.forward(x, pcache);
    double q_h = 0.0;
    double q_alg = 1.0;
    if (router != nullptr) {
      const auto q = router->forward(x, rcache);
      q_h = q[s.expert];
      q_alg = q[K];
    }
    double denom = cfg.drop_behavior_propensity ? 1.0 : s.behavior_given_expert;
    if (cfg.assignment_weight_on_algorithm_branch) denom *= s.assignment;
    const double human = s.reward - s.expert_cost - (cfg.baseline_human_branch ? cfg.baseline : 0.0);
    const double alg_shifted = s.reward - cfg.baseline;
    const double ratio = q_alg * pi[s.action] / denom;
    const bool capped = ratio > cfg.truncation;
    res.value += human * q_h / s.assignment + alg_shifted * (capped ? cfg.truncation : ratio);
    if (pgrad && !capped && alg_shifted != 0.0 && q_alg != 0.0) {
      pup[s.action] = alg_shifted * q_alg / denom;
      policy.backward(pcache, pup, res.policy);
      pup[s.action] = 0.0;
    }
    if (rgrad) {
      rup[s.expert] = human / s.assignment;
      rup[K] = capped ? 0.0 : alg_shifted * pi[s.action] / denom;
      router->backward(rcache, rup, res.router);
      rup[s.expert] = 0.0;
      rup[K] = 0.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  res.value *= inv;
  if (pgrad) res.policy *= inv;
  if (rgrad) res.router *= inv;
  return res;
}

struct LambdaSelection {
  double lambda = 0.0;
  std::size_t index = 0;
  std::vector<double> estimates;  // one per grid entry (empty for a single-entry grid)
};

/// Trains one model per baseline value and keeps the one whose un-baselined
/// estimate on the training log is largest. Estimates within `tie_tolerance`
/// of the best count as ties and go to the smaller lambda.
///
/// `train(lambda)` returns a model; `estimate(model)` scores it.
template <class TrainFn, class EstimateFn>
auto lambda_grid(std::span<const double> grid, TrainFn&& train, EstimateFn&& estimate,
                 double tie_tolerance = 1e-9) {
  using Model = decltype(train(0.0));
  if (grid.empty()) throw std::invalid_argument("lambda grid is empty");
  LambdaSelection sel;
  if (grid.size() == 1) {
    sel.lambda = grid[0];
    return std::pair<LambdaSelection, Model>{sel, train(grid[0])};
  }
  std::vector<Model> models;
  models.reserve(grid.size());
  for (double lambda : grid) {
    models.push_back(train(lambda));
    sel.estimates.push_back(estimate(models.back()));
  }
  const double best = *std::max_element(sel.estimates.begin(), sel.estimates.end());
  sel.index = grid.size();
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (sel.estimates[k] < best - tie_tolerance) continue;
    if (sel.index == grid.size() || grid[k] < grid[sel.index]) sel.index = k;
  }
  sel.lambda = grid[sel.index];
  return std::pair<LambdaSelection, Model>{sel, std::move(models[sel.index])};
}

}  // namespace haiblbf::objectives
