#pragma once

// Deployment evaluation with full counterfactual rewards.
//
// At test time both networks act deterministically. The router picks its
// argmax branch, preferring the algorithm on ties, and the policy picks its
// argmax action, preferring the lowest index on ties. A human branch
// queries an expert (the router's choice for JCP, a uniform draw otherwise)
// and pays that expert's cost.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "haiblbf/errors.hpp"
#include "haiblbf/nnkit.hpp"
#include "haiblbf/random.hpp"
#include "haiblbf/simkit.hpp"
#include "haiblbf/trainkit.hpp"

namespace haiblbf::eval {

using train::SystemKind;
using train::TrainedSystem;

struct DeploymentResult {
  SystemKind system = SystemKind::kHuman;
  double total = 0.0;      // raw - cost_paid
  double raw = 0.0;
  double cost_paid = 0.0;
  std::vector<std::size_t> routed;  // one entry per expert, then the algorithm
  double human_reward = 0.0;        // raw reward earned on human-routed instances
  double algorithm_reward = 0.0;
  std::uint64_t seed = 0;

  std::size_t instances() const {
    std::size_t n = 0;
    for (auto c : routed) n += c;
    return n;
  }
  std::size_t human_routed() const { return instances() - routed.back(); }
  double human_fraction() const {
    const auto n = instances();
    return n == 0 ? 0.0 : static_cast<double>(human_routed()) / static_cast<double>(n);
  }
};

/// Index of the largest entry; the first one wins ties.
inline std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (v[k] > v[best]) best = k;
  }
  return best;
}

/// Branch chosen by a trained router for context x: an expert index in
/// [0, K), or K for the algorithm. Returns K also when the expert should be
/// drawn at random; `human` tells the two apart.
struct Route {
  bool human = false;
  std::size_t expert = 0;  // meaningful for JCP only
};

inline Route route(const TrainedSystem& s, std::span<const double> x) {
  switch (s.kind) {
    case SystemKind::kHuman: return {true, 0};
    case SystemKind::kAO: return {false, 0};
    case SystemKind::kTS:
    case SystemKind::kJC: {
      const double p = s.router->forward(x)[0];
      return {p > 0.5, 0};
    }
    case SystemKind::kJCP: {
      const auto q = s.router->forward(x);
      const std::size_t K = q.size() - 1;
      const std::size_t best = argmax_lowest(std::span<const double>(q.data(), K));
      return q[best] > q[K] ? Route{true, best} : Route{false, 0};
    }
  }
  return {false, 0};
}

inline std::size_t policy_action(const nn::DenseNet& policy, std::span<const double> x) {
  const auto pi = policy.forward(x);
  return argmax_lowest(pi);
}

/// Deploys `system` on `instances` (rows of the oracle's dataset). Expert
/// randomness for instance i comes from its own stream derived from
/// (seed, i), so two systems sending the same instance to the same expert
/// see the same human decision.
inline DeploymentResult evaluate(const TrainedSystem& system, std::span<const std::size_t> instances,
                                 const sim::ExpertPool& pool, const sim::RewardOracle& oracle, std::uint64_t seed) {
  const std::size_t K = pool.size();
  if (system.kind != SystemKind::kHuman && !system.policy) {
    throw UsageError("system has no policy network");
  }
  if ((system.kind == SystemKind::kTS || system.kind == SystemKind::kJC || system.kind == SystemKind::kJCP) &&
      !system.router) {
    throw UsageError("system has no router network");
  }
  if (system.kind == SystemKind::kJCP && system.router->output_dim() != K + 1) {
    throw ShapeError("personalized router does not match the expert pool");
  }
  const auto& ds = oracle.dataset();
  DeploymentResult res;
  res.system = system.kind;
  res.seed = seed;
  res.routed.assign(K + 1, 0);
  for (std::size_t i : instances) {
    if (i >= ds.size()) throw DataError("test instance " + std::to_string(i) + " not covered by oracle");
    const auto x = ds.features(i);
    const Route r = route(system, x);
    if (r.human) {
      Rng rng = make_rng(derive_seed(seed, "deploy", i));
      const std::size_t j = system.kind == SystemKind::kJCP ? r.expert : uniform_index(rng, K);
      const auto d = sim::expert_decide_at_test(pool, j, oracle, i, rng);
      ++res.routed[j];
      res.raw += d.reward;
      res.human_reward += d.reward;
      res.cost_paid += d.cost;
    } else {
      const double reward = oracle(i, policy_action(*system.policy, x));
      ++res.routed[K];
      res.raw += reward;
      res.algorithm_reward += reward;
    }
  }
  res.total = res.raw - res.cost_paid;
  return res;
}

inline DeploymentResult evaluate(const TrainedSystem& system, const sim::ExpertPool& pool,
                                 const sim::RewardOracle& oracle, std::uint64_t seed) {
  std::vector<std::size_t> all(oracle.dataset().size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return evaluate(system, all, pool, oracle, seed);
}

/// Mean reward of a policy under full information. The stochastic form
/// averages over pi(a|x); the deterministic form uses the argmax action.
inline double exact_policy_value(const nn::DenseNet& policy, const data::MultiLabelDataset& ds,
                                 bool deterministic = false) {
  if (ds.empty()) throw EmptyDatasetError("cannot evaluate a policy on an empty dataset");
  double total = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto pi = policy.forward(ds.features(i));
    if (deterministic) {
      total += ds.has_label(i, argmax_lowest(pi)) ? 1.0 : 0.0;
    } else {
      for (std::size_t a = 0; a < pi.size(); ++a) {
        if (ds.has_label(i, a)) total += pi[a];
      }
    }
  }
  return total / static_cast<double>(ds.size());
}

struct Summary {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t count = 0;
};

/// Mean and standard error (sample standard deviation over sqrt(R)).
/// Welford's update keeps identical repetitions at exactly zero error.
inline Summary summarize(std::span<const double> values) {
  if (values.size() < 2) throw UsageError("standard error needs at least two repetitions");
  Summary s;
  double m2 = 0.0;
  for (double v : values) {
    ++s.count;
    const double delta = v - s.mean;
    s.mean += delta / static_cast<double>(s.count);
    m2 += delta * (v - s.mean);
  }
  s.stderr_ = std::sqrt(m2 / static_cast<double>(s.count - 1)) / std::sqrt(static_cast<double>(s.count));
  return s;
}

/// "423.3±5.2"
inline std::string format_mean_se(double mean, double se) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f±%.1f", mean, se);
  return buf;
}

inline std::string format_mean_se(const Summary& s) { return format_mean_se(s.mean, s.stderr_); }

}  // namespace haiblbf::eval
