#pragma once

// Estimated behavior policy pi_0(a | x[, h]) and expert-assignment model
// d_0(h | x), the denominators of every importance weight.
//
// All emitted probabilities are floored: p -> eps + (1 - n*eps) * p over an
// n-way distribution, which keeps each entry >= eps and the sum at 1.

#include <cmath>
#include <cstddef>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "haiblbf/errors.hpp"
#include "haiblbf/nnkit.hpp"
#include "haiblbf/random.hpp"
#include "haiblbf/simkit.hpp"

namespace haiblbf::propensity {

enum class Conditioning {
  kMarginal,        // pi_0(a | x)
  kSharedWithId,    // one classifier on [x, onehot(h)]
  kSeparatePerExpert,  // one classifier per expert
};

struct ClassifierOptions {
  std::vector<std::size_t> hidden = {8};
  nn::Activation activation = nn::Activation::kRelu;
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double epsilon = 1e-3;
  /// Share of examples held out for epoch selection. Training starts from the
  /// constant-frequency model and a later epoch replaces the kept one only if
  /// it lowers held-out cross-entropy by more than two standard errors. Zero,
  /// or fewer than 20 examples, trains on everything and keeps the last epoch.
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
};

inline void apply_floor(std::span<double> p, double eps) {
  const double n = static_cast<double>(p.size());
  for (double& v : p) v = eps + (1.0 - n * eps) * v;
}

namespace detail {

struct Example {
  std::span<const double> x;
  std::size_t expert;
  std::size_t target;
};

/// Softmax classifier fitted by cross-entropy. The output layer starts at
/// zero weights with biases equal to the log class frequencies, so training
/// begins at the constant empirical-frequency model.
inline nn::DenseNet fit_softmax_classifier(std::span<const Example> examples, std::size_t input_dim,
                                           std::size_t num_experts_onehot, std::size_t num_classes,
                                           const ClassifierOptions& opts, std::string_view stream) {
  const std::size_t in_dim = input_dim + num_experts_onehot;
  nn::DenseNet net(in_dim, opts.hidden, opts.activation, num_classes, nn::Head::kSoftmax);
  Rng init = make_rng(derive_seed(opts.seed, stream));
  net.init_glorot(init);
  std::vector<double> freq(num_classes, 0.5);  // add-half smoothing
  for (const auto& e : examples) freq[e.target] += 1.0;
  const std::size_t last = net.layers().size() - 1;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < net.layers()[last].in; ++i) net.weight(last, c, i) = 0.0;
    net.bias(last, c) = std::log(freq[c]);
  }

  nn::AdamState adam(net, opts.learning_rate);
  Rng order_rng = make_rng(derive_seed(opts.seed, stream, 1));
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::size_t> held_out;
  const auto n_val = static_cast<std::size_t>(opts.validation_fraction * static_cast<double>(examples.size()));
  if (examples.size() >= 20 && n_val > 0 && n_val < examples.size()) {
    shuffle(order, order_rng);
    held_out.assign(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
    order.resize(order.size() - n_val);
  }
  nn::ForwardCache cache;
  nn::Gradient grad(net.num_params());
  std::vector<double> input(in_dim);
  std::vector<double> dlogits(num_classes);
  auto encode = [&](const Example& e) {
    std::copy(e.x.begin(), e.x.end(), input.begin());
    for (std::size_t h = 0; h < num_experts_onehot; ++h) input[input_dim + h] = (h == e.expert) ? 1.0 : 0.0;
  };
  std::vector<double> losses(held_out.size());
  auto held_out_losses = [&](std::vector<double>& out) {
    for (std::size_t k = 0; k < held_out.size(); ++k) {
      const auto& e = examples[held_out[k]];
      encode(e);
      out[k] = -std::log(std::max(net.forward(input)[e.target], 1e-300));
    }
  };
  std::vector<double> best_losses(held_out.size());
  held_out_losses(best_losses);
  nn::DenseNet best = net;
  const std::size_t batch = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle(order, order_rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      grad.zero();
      for (std::size_t k = start; k < end; ++k) {
        const auto& e = examples[order[k]];
        encode(e);
        const auto p = net.forward(input, cache);
        for (std::size_t c = 0; c < num_classes; ++c) dlogits[c] = p[c] - (c == e.target ? 1.0 : 0.0);
        net.backward_from_logits(cache, dlogits, grad);
      }
      grad *= 1.0 / static_cast<double>(end - start);
      nn::adam_step(net, adam, grad);
    }
    if (!held_out.empty()) {
      // Paired comparison with the kept model: switch only when the mean
      // improvement exceeds two standard errors of the per-example differences.
      // Every epoch is another comparison, so one standard error admits noise.
      held_out_losses(losses);
      double mean = 0.0, m2 = 0.0;
      for (std::size_t k = 0; k < losses.size(); ++k) {
        const double diff = best_losses[k] - losses[k];
        const double delta = diff - mean;
        mean += delta / static_cast<double>(k + 1);
        m2 += delta * (diff - mean);
      }
      const double n = static_cast<double>(losses.size());
      if (mean > 2.0 * std::sqrt(m2 / (n - 1.0) / n)) {
        best_losses.swap(losses);
        best = net;
      }
    }
  }
  return held_out.empty() ? net : best;
}

}  // namespace detail

/// Estimated behavior policy, optionally conditioned on the logging expert.
class BehaviorModel {
 public:
  BehaviorModel() = default;

  Conditioning conditioning() const { return conditioning_; }
  std::size_t num_actions() const { return num_actions_; }
  double epsilon() const { return epsilon_; }
  /// Set when the log held a single action and a constant distribution was returned.
  bool degenerate() const { return degenerate_; }

  /// Floored distribution over actions. `expert` is ignored in marginal mode.
  void probabilities(std::span<const double> x, std::size_t expert, std::vector<double>& out) const {
    out.resize(num_actions_);
    if (degenerate_) {
      std::fill(out.begin(), out.end(), 0.0);
      out[constant_action_] = 1.0;
    } else {
      const nn::DenseNet* net = nullptr;
      std::span<const double> input = x;
      std::vector<double> buf;
      switch (conditioning_) {
        case Conditioning::kMarginal:
          net = &nets_.front();
          break;
        case Conditioning::kSharedWithId:
          net = &nets_.front();
          if (expert >= num_experts_) throw DataError("unknown expert id " + std::to_string(expert));
          buf.assign(x.begin(), x.end());
          buf.resize(x.size() + num_experts_, 0.0);
          buf[x.size() + expert] = 1.0;
          input = buf;
          break;
        case Conditioning::kSeparatePerExpert:
          if (expert >= nets_.size()) throw DataError("unknown expert id " + std::to_string(expert));
          net = &nets_[expert];
          break;
      }
      const auto p = net->forward(input);
      std::copy(p.begin(), p.end(), out.begin());
    }
    apply_floor(out, epsilon_);
  }

  double probability(std::span<const double> x, std::size_t expert, std::size_t action) const {
    std::vector<double> p;
    probabilities(x, expert, p);
    return p.at(action);
  }

  /// Mean log-likelihood of the logged actions.
  double log_likelihood(const sim::BanditLog& log) const {
    double total = 0.0;
    std::vector<double> p;
    for (std::size_t i = 0; i < log.size(); ++i) {
      probabilities(log.x(i), log[i].expert, p);
      total += std::log(p[log[i].action]);
    }
    return total / static_cast<double>(log.size());
  }

 private:
  friend BehaviorModel fit_behavior(const sim::BanditLog&, Conditioning, const ClassifierOptions&);

  Conditioning conditioning_ = Conditioning::kMarginal;
  std::size_t num_actions_ = 0;
  std::size_t num_experts_ = 0;
  double epsilon_ = 1e-3;
  bool degenerate_ = false;
  std::size_t constant_action_ = 0;
  std::vector<nn::DenseNet> nets_;
};

inline BehaviorModel fit_behavior(const sim::BanditLog& log, Conditioning conditioning,
                                  const ClassifierOptions& opts = {}) {
  if (log.empty()) throw TrainingError("cannot fit a behavior model on an empty log");
  const std::size_t l = log.num_actions();
  const std::size_t K = log.num_experts();
  if (!(opts.epsilon > 0.0 && opts.epsilon * static_cast<double>(l) < 1.0)) {
    throw std::invalid_argument("propensity floor must satisfy 0 < eps < 1/l");
  }
  BehaviorModel m;
  m.conditioning_ = conditioning;
  m.num_actions_ = l;
  m.num_experts_ = K;
  m.epsilon_ = opts.epsilon;

  std::vector<std::size_t> per_expert(K, 0);
  bool single_action = true;
  for (const auto& r : log.records()) {
    ++per_expert[r.expert];
    single_action = single_action && r.action == log[0].action;
  }
  if (conditioning != Conditioning::kMarginal) {
    for (std::size_t h = 0; h < K; ++h) {
      if (per_expert[h] == 0) throw TrainingError("expert " + std::to_string(h) + " has no logged records");
    }
  }
  if (single_action) {
    std::cerr << "warning: log contains a single action; behavior model is constant\n";
    m.degenerate_ = true;
    m.constant_action_ = log[0].action;
    return m;
  }

  std::vector<detail::Example> examples;
  examples.reserve(log.size());
  for (std::size_t i = 0; i < log.size(); ++i) examples.push_back({log.x(i), log[i].expert, log[i].action});

  switch (conditioning) {
    case Conditioning::kMarginal:
      m.nets_.push_back(detail::fit_softmax_classifier(examples, log.num_features(), 0, l, opts, "behavior"));
      break;
    case Conditioning::kSharedWithId:
      m.nets_.push_back(detail::fit_softmax_classifier(examples, log.num_features(), K, l, opts, "behavior-shared"));
      break;
    case Conditioning::kSeparatePerExpert:
      for (std::size_t h = 0; h < K; ++h) {
        std::vector<detail::Example> mine;
        for (const auto& e : examples) {
          if (e.expert == h) mine.push_back(e);
        }
        ClassifierOptions o = opts;
        o.seed = derive_seed(opts.seed, "behavior-expert", h);
        m.nets_.push_back(detail::fit_softmax_classifier(mine, log.num_features(), 0, l, o, "behavior"));
      }
      break;
  }
  return m;
}

enum class AssignmentMode { kKnownUniform, kEstimated };

/// d_0(h | x): constant 1/K, or a classifier from contexts to expert ids.
class AssignmentModel {
 public:
  AssignmentModel() = default;

  AssignmentMode mode() const { return mode_; }
  std::size_t num_experts() const { return num_experts_; }

  void probabilities(std::span<const double> x, std::vector<double>& out) const {
    out.assign(num_experts_, 1.0 / static_cast<double>(num_experts_));
    if (mode_ == AssignmentMode::kKnownUniform || num_experts_ == 1) return;
    const auto p = net_.forward(x);
    std::copy(p.begin(), p.end(), out.begin());
    apply_floor(out, epsilon_);
  }

  double probability(std::span<const double> x, std::size_t expert) const {
    if (expert >= num_experts_) throw DataError("unknown expert id " + std::to_string(expert));
    if (mode_ == AssignmentMode::kKnownUniform || num_experts_ == 1) return 1.0 / static_cast<double>(num_experts_);
    std::vector<double> p;
    probabilities(x, p);
    return p[expert];
  }

 private:
  friend AssignmentModel assignment_model(std::size_t, AssignmentMode, const sim::BanditLog*,
                                          const ClassifierOptions&);

  AssignmentMode mode_ = AssignmentMode::kKnownUniform;
  std::size_t num_experts_ = 1;
  double epsilon_ = 1e-3;
  nn::DenseNet net_;
};

inline AssignmentModel assignment_model(std::size_t num_experts, AssignmentMode mode,
                                        const sim::BanditLog* log = nullptr, const ClassifierOptions& opts = {}) {
  if (num_experts == 0) throw std::invalid_argument("assignment model needs at least one expert");
  AssignmentModel m;
  m.mode_ = mode;
  m.num_experts_ = num_experts;
  m.epsilon_ = opts.epsilon;
  if (mode == AssignmentMode::kKnownUniform || num_experts == 1) return m;
  if (log == nullptr || log->empty()) throw TrainingError("estimated assignment model needs a log");
  if (log->num_experts() != num_experts) throw DataError("log and pool disagree on the number of experts");
  std::vector<detail::Example> examples;
  for (std::size_t i = 0; i < log->size(); ++i) examples.push_back({log->x(i), 0, (*log)[i].expert});
  m.net_ = detail::fit_softmax_classifier(examples, log->num_features(), 0, num_experts, opts, "assignment");
  return m;
}

/// Everything an importance weight needs in its denominator.
struct PropensityEstimates {
  BehaviorModel behavior;              // pi_0(a | x)
  BehaviorModel behavior_given_expert; // pi_0(a | x, h); unused unless personalizing
  AssignmentModel assignment;          // d_0(h | x)
};

}  // namespace haiblbf::propensity
