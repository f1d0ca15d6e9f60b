#pragma once

// Minibatch Adam training for the five decision systems:
//
//   Human  no models; every case goes to a uniformly drawn expert
//   AO     policy only, trained on truncated IPS
//   TS     the AO policy, frozen, then a router trained on the collaboration objective
//   JC     policy and router trained together on the collaboration objective
//   JCP    policy and a router over {experts..., algorithm} trained on the
//          personalized objective
//
// Each run is fully determined by (config, log, seed): the policy and router
// initializations and the minibatch order come from independent seed streams.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "haiblbf/errors.hpp"
#include "haiblbf/nnkit.hpp"
#include "haiblbf/objectives.hpp"
#include "haiblbf/random.hpp"

namespace haiblbf::train {

enum class SystemKind { kHuman, kAO, kTS, kJC, kJCP };

inline const char* to_string(SystemKind k) {
  switch (k) {
    case SystemKind::kHuman: return "Human";
    case SystemKind::kAO: return "AO";
    case SystemKind::kTS: return "TS";
    case SystemKind::kJC: return "JC";
    case SystemKind::kJCP: return "JCP";
  }
  return "?";
}

inline std::optional<SystemKind> parse_system(std::string_view s) {
  for (auto k : {SystemKind::kHuman, SystemKind::kAO, SystemKind::kTS, SystemKind::kJC, SystemKind::kJCP}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

struct Architecture {
  std::vector<std::size_t> hidden = {8};
  nn::Activation activation = nn::Activation::kIdentity;
};

struct TrainConfig {
  std::size_t epochs = 2000;  // an upper bound; runs usually stop on convergence first
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::vector<double> lambda_grid = {0.0, 0.2, 0.4, 0.6, 0.8};
  double lambda_tie_tolerance = 1e-9;
  /// Early stop once the mean objective over the last `window` epochs beats
  /// the mean over the `window` epochs before it by less than `tolerance`.
  std::size_t convergence_window = 20;
  double convergence_tolerance = 1e-4;
  /// Zero the output layer of every policy and router after Glorot init, so
  /// training starts from the uniform policy and an indifferent router
  /// rather than from a random initial decision.
  bool neutral_init = false;
  /// JC and JCP also train one candidate that starts from the two-stage
  /// solution (the AO policy and the TS router) at lambda = 0, and keep it
  /// when its un-baselined estimate beats the grid's pick. From a random
  /// start, joint training can stall in a basin below the two-stage
  /// solution even though that solution is a point of the same objective.
  bool two_stage_start = true;
  Architecture policy;
  Architecture router;
  objectives::ObjectiveConfig objective;  // baseline is set per grid entry

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (lambda_grid.empty()) throw std::invalid_argument("lambda grid is empty");
    objective.validate();
  }
};

struct TrainedSystem {
  SystemKind kind = SystemKind::kHuman;
  std::optional<nn::DenseNet> policy;
  std::optional<nn::DenseNet> router;
  std::vector<double> history;  // per-epoch objective on the whole log
  double lambda = 0.0;
  std::size_t num_experts = 1;
  bool from_two_stage = false;  // joint systems: the kept candidate started at the TS solution

  // Text format:
  //   haiblbf-system 1
  //   kind <Human|AO|TS|JC|JCP>
  //   experts <K>
  //   lambda <value>
  //   history <n> <v1> ... <vn>
  //   policy <none|present>   followed by a haiblbf-densenet block when present
  //   router <none|present>   likewise
  void write(std::ostream& os) const {
    char buf[64];
    auto num = [&](double v) {
      auto r = std::to_chars(buf, buf + sizeof(buf), v);
      os.write(buf, r.ptr - buf);
    };
    os << "haiblbf-system 1\nkind " << to_string(kind) << "\nexperts " << num_experts << "\nlambda ";
    num(lambda);
    os << "\nhistory " << history.size();
    for (double v : history) {
      os << ' ';
      num(v);
    }
    os << "\npolicy " << (policy ? "present" : "none") << "\n";
    if (policy) policy->write(os);
    os << "router " << (router ? "present" : "none") << "\n";
    if (router) router->write(os);
  }

  static TrainedSystem read(std::istream& is) {
    TrainedSystem s;
    std::string tag, key, value;
    int version = 0;
    if (!(is >> tag >> version) || tag != "haiblbf-system" || version != 1) {
      throw DataError("not a haiblbf-system v1 stream");
    }
    if (!(is >> key >> value) || key != "kind") throw DataError("bad kind line");
    const auto kind = parse_system(value);
    if (!kind) throw DataError("unknown system kind '" + value + "'");
    s.kind = *kind;
    if (!(is >> key >> s.num_experts) || key != "experts" || s.num_experts == 0) throw DataError("bad experts line");
    auto read_num = [&](double& out) {
      std::string tok;
      if (!(is >> tok)) throw DataError("truncated system file");
      auto r = std::from_chars(tok.data(), tok.data() + tok.size(), out);
      if (r.ec != std::errc() || r.ptr != tok.data() + tok.size()) throw DataError("bad number '" + tok + "'");
    };
    if (!(is >> key) || key != "lambda") throw DataError("bad lambda line");
    read_num(s.lambda);
    std::size_t n = 0;
    if (!(is >> key >> n) || key != "history") throw DataError("bad history line");
    s.history.resize(n);
    for (double& v : s.history) read_num(v);
    for (auto* slot : {&s.policy, &s.router}) {
      if (!(is >> key >> value) || (key != "policy" && key != "router")) throw DataError("bad network header");
      if (value == "present") *slot = nn::DenseNet::read(is);
    }
    return s;
  }
};

namespace detail {

inline void zero_output_layer(nn::DenseNet& net) {
  const std::size_t last = net.layers().size() - 1;
  for (std::size_t o = 0; o < net.layers()[last].out; ++o) {
    for (std::size_t i = 0; i < net.layers()[last].in; ++i) net.weight(last, o, i) = 0.0;
  }
}

inline nn::DenseNet make_policy(const objectives::PreparedLog& log, const TrainConfig& cfg) {
  nn::DenseNet net(log.num_features(), cfg.policy.hidden, cfg.policy.activation, log.num_actions(),
                   nn::Head::kSoftmax);
  Rng rng = make_rng(derive_seed(cfg.seed, "policy-init"));
  net.init_glorot(rng);
  if (cfg.neutral_init) zero_output_layer(net);
  return net;
}

inline nn::DenseNet make_router(const objectives::PreparedLog& log, const TrainConfig& cfg, std::size_t outputs,
                                nn::Head head) {
  nn::DenseNet net(log.num_features(), cfg.router.hidden, cfg.router.activation, outputs, head);
  Rng rng = make_rng(derive_seed(cfg.seed, "router-init"));
  net.init_glorot(rng);
  if (cfg.neutral_init) zero_output_layer(net);
  return net;
}

inline bool converged(const std::vector<double>& h, std::size_t window, double tol) {
  if (window == 0 || h.size() < 2 * window) return false;
  double recent = 0.0, before = 0.0;
  for (std::size_t k = 0; k < window; ++k) {
    recent += h[h.size() - 1 - k];
    before += h[h.size() - 1 - window - k];
  }
  return (recent - before) / static_cast<double>(window) < tol;
}

inline void ascend(nn::DenseNet& net, nn::AdamState& adam, nn::Gradient& g) {
  g *= -1.0;
  nn::adam_step(net, adam, g);
}

/// Generic minibatch loop. `objective(batch, trainable)` returns an
/// ObjectiveResult; an empty batch means the whole log.
template <class Objective>
std::vector<double> run(nn::DenseNet* policy, nn::DenseNet* router, objectives::Trainable trainable,
                        std::size_t n, const TrainConfig& cfg, Objective&& objective) {
  using objectives::Trainable;
  std::optional<nn::AdamState> policy_adam, router_adam;
  if (policy && objectives::wants_policy(trainable)) policy_adam.emplace(*policy, cfg.learning_rate);
  if (router && objectives::wants_router(trainable)) router_adam.emplace(*router, cfg.learning_rate);
  Rng rng = make_rng(derive_seed(cfg.seed, "minibatch"));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      auto res = objective(batch, trainable);
      if (!std::isfinite(res.value)) {
        throw DivergenceError("non-finite objective at epoch " + std::to_string(epoch));
      }
      if (policy_adam && res.policy.size() > 0) ascend(*policy, *policy_adam, res.policy);
      if (router_adam && res.router.size() > 0) ascend(*router, *router_adam, res.router);
    }
    const double full = objective(std::span<const std::size_t>{}, Trainable::kNone).value;
    if (!std::isfinite(full)) throw DivergenceError("non-finite objective at epoch " + std::to_string(epoch));
    history.push_back(full);
    if (converged(history, cfg.convergence_window, cfg.convergence_tolerance)) break;
  }
  return history;
}

}  // namespace detail

/// Policy-only training on truncated IPS; the baseline comes from the grid,
/// scored by the un-baselined truncated IPS estimate.
inline TrainedSystem train_ao(const objectives::PreparedLog& log, const TrainConfig& cfg) {
  cfg.validate();
  using objectives::Trainable;
  struct Run {
    nn::DenseNet policy;
    std::vector<double> history;
  };
  auto train = [&](double lambda) {
    Run r{detail::make_policy(log, cfg), {}};
    auto ocfg = cfg.objective;
    ocfg.baseline = lambda;
    r.history = detail::run(&r.policy, nullptr, Trainable::kPolicy, log.size(), cfg,
                            [&](std::span<const std::size_t> batch, Trainable t) {
                              return objectives::ips_objective(r.policy, log, ocfg, batch, t);
                            });
    return r;
  };
  auto estimate = [&](const Run& r) {
    auto ocfg = cfg.objective;
    ocfg.baseline = 0.0;
    return objectives::ips_objective(r.policy, log, ocfg, {}, Trainable::kNone).value;
  };
  auto [sel, best] = objectives::lambda_grid(cfg.lambda_grid, train, estimate, cfg.lambda_tie_tolerance);
  TrainedSystem s;
  s.kind = SystemKind::kAO;
  s.policy = std::move(best.policy);
  s.history = std::move(best.history);
  s.lambda = sel.lambda;
  s.num_experts = log.num_experts();
  return s;
}

/// AO policy, frozen; then a router trained on the collaboration objective.
/// With the policy fixed the router phase runs at lambda = 0.
/// `ao` must come from train_ao on the same log and config.
inline TrainedSystem train_ts(const objectives::PreparedLog& log, const TrainConfig& cfg, TrainedSystem ao) {
  using objectives::Trainable;
  if (ao.kind != SystemKind::kAO || !ao.policy) throw UsageError("two-stage training needs a trained AO system");
  TrainedSystem s = std::move(ao);
  s.kind = SystemKind::kTS;
  nn::DenseNet router = detail::make_router(log, cfg, 1, nn::Head::kSigmoid);
  auto ocfg = cfg.objective;
  ocfg.baseline = 0.0;
  const nn::DenseNet& policy = *s.policy;
  s.history = detail::run(nullptr, &router, Trainable::kRouter, log.size(), cfg,
                          [&](std::span<const std::size_t> batch, Trainable t) {
                            return objectives::collab_objective(policy, &router, log, ocfg, t, batch);
                          });
  s.router = std::move(router);
  return s;
}

inline TrainedSystem train_ts(const objectives::PreparedLog& log, const TrainConfig& cfg) {
  return train_ts(log, cfg, train_ao(log, cfg));
}

namespace detail {

inline const TrainedSystem& check_two_stage(const TrainedSystem& ts, std::size_t num_experts) {
  if (ts.kind != SystemKind::kTS || !ts.policy || !ts.router || ts.num_experts != num_experts) {
    throw UsageError("a two-stage start needs a TS system trained on the same log");
  }
  return ts;
}

/// Personalized router that routes exactly like a TS router: every expert
/// gets the TS human logit minus log K and the algorithm gets zero, so the
/// experts' combined share equals the TS human probability.
inline nn::DenseNet personal_router_from(const nn::DenseNet& ts_router, std::size_t K) {
  const auto& shapes = ts_router.layers();
  std::vector<std::size_t> hidden;
  for (std::size_t L = 0; L + 1 < shapes.size(); ++L) hidden.push_back(shapes[L].out);
  nn::DenseNet out(ts_router.input_dim(), hidden, shapes.front().activation, K + 1, nn::Head::kSoftmax);
  const std::size_t last = shapes.size() - 1;
  for (std::size_t L = 0; L < last; ++L) {
    for (std::size_t o = 0; o < shapes[L].out; ++o) {
      out.bias(L, o) = ts_router.bias(L, o);
      for (std::size_t i = 0; i < shapes[L].in; ++i) out.weight(L, o, i) = ts_router.weight(L, o, i);
    }
  }
  const double shift = std::log(static_cast<double>(K));
  for (std::size_t j = 0; j < K; ++j) {
    out.bias(last, j) = ts_router.bias(last, 0) - shift;
    for (std::size_t i = 0; i < shapes[last].in; ++i) out.weight(last, j, i) = ts_router.weight(last, 0, i);
  }
  return out;
}

/// Joint training shared by JC and JCP. `objective(policy, router, cfg,
/// batch, trainable)` is the collaboration or personalized objective.
template <class Objective>
TrainedSystem train_joint(const objectives::PreparedLog& log, const TrainConfig& cfg, SystemKind kind,
                          const TrainedSystem* two_stage,
                          std::function<nn::DenseNet()> make_router_fn, Objective&& objective) {
  using objectives::Trainable;
  struct Run {
    nn::DenseNet policy;
    std::optional<nn::DenseNet> router;
    std::vector<double> history;
  };
  auto fit = [&](Run r, double lambda) {
    auto ocfg = cfg.objective;
    ocfg.baseline = lambda;
    nn::DenseNet* router = r.router ? &*r.router : nullptr;
    r.history = run(&r.policy, router, Trainable::kJoint, log.size(), cfg,
                    [&](std::span<const std::size_t> batch, Trainable t) {
                      return objective(r.policy, router, ocfg, batch, t);
                    });
    return r;
  };
  auto estimate = [&](const Run& r) {
    auto ocfg = cfg.objective;
    ocfg.baseline = 0.0;
    return objective(r.policy, r.router ? &*r.router : nullptr, ocfg, std::span<const std::size_t>{}, Trainable::kNone)
        .value;
  };
  auto [sel, best] = objectives::lambda_grid(
      cfg.lambda_grid,
      [&](double lambda) {
        Run r{make_policy(log, cfg), std::nullopt, {}};
        if (make_router_fn) r.router = make_router_fn();
        return fit(std::move(r), lambda);
      },
      estimate, cfg.lambda_tie_tolerance);
  TrainedSystem s;
  s.kind = kind;
  s.lambda = sel.lambda;
  if (two_stage != nullptr && cfg.two_stage_start) {
    nn::DenseNet router = kind == SystemKind::kJCP ? personal_router_from(*two_stage->router, log.num_experts())
                                                   : *two_stage->router;
    Run warm = fit(Run{*two_stage->policy, std::move(router), {}}, 0.0);
    if (estimate(warm) > estimate(best) + cfg.lambda_tie_tolerance) {
      best = std::move(warm);
      s.lambda = 0.0;
      s.from_two_stage = true;
    }
  }
  s.policy = std::move(best.policy);
  s.router = std::move(best.router);
  s.history = std::move(best.history);
  s.num_experts = log.num_experts();
  return s;
}

}  // namespace detail

/// Policy and router updated together, one Adam step per minibatch for both.
/// `two_stage` (a TS system on the same log) seeds the extra candidate of
/// TrainConfig::two_stage_start; without it, and with the option on, the TS
/// system is trained here first.
inline TrainedSystem train_jc(const objectives::PreparedLog& log, const TrainConfig& cfg,
                              const TrainedSystem* two_stage) {
  cfg.validate();
  std::optional<TrainedSystem> own;
  if (two_stage == nullptr && cfg.two_stage_start) two_stage = &own.emplace(train_ts(log, cfg));
  if (two_stage != nullptr) detail::check_two_stage(*two_stage, log.num_experts());
  return detail::train_joint(
      log, cfg, SystemKind::kJC, two_stage,
      [&] { return detail::make_router(log, cfg, 1, nn::Head::kSigmoid); },
      [&](const nn::DenseNet& policy, const nn::DenseNet* router, const objectives::ObjectiveConfig& ocfg,
          std::span<const std::size_t> batch, objectives::Trainable t) {
        return objectives::collab_objective(policy, router, log, ocfg, t, batch);
      });
}

/// With `router_clamped` the router is fixed to the algorithm branch and the
/// procedure reduces to train_ao.
inline TrainedSystem train_jc(const objectives::PreparedLog& log, const TrainConfig& cfg,
                              bool router_clamped = false) {
  if (!router_clamped) return train_jc(log, cfg, nullptr);
  cfg.validate();
  return detail::train_joint(
      log, cfg, SystemKind::kAO, nullptr, nullptr,
      [&](const nn::DenseNet& policy, const nn::DenseNet* router, const objectives::ObjectiveConfig& ocfg,
          std::span<const std::size_t> batch, objectives::Trainable t) {
        return objectives::collab_objective(policy, router, log, ocfg, t, batch);
      });
}

/// Joint training on the personalized objective; the router has K + 1
/// outputs, the last one standing for the algorithm.
inline TrainedSystem train_jcp(const objectives::PreparedLog& log, const TrainConfig& cfg,
                               const TrainedSystem* two_stage = nullptr) {
  cfg.validate();
  const std::size_t K = log.num_experts();
  std::optional<TrainedSystem> own;
  if (two_stage == nullptr && cfg.two_stage_start) two_stage = &own.emplace(train_ts(log, cfg));
  if (two_stage != nullptr) detail::check_two_stage(*two_stage, K);
  return detail::train_joint(
      log, cfg, SystemKind::kJCP, two_stage,
      [&] { return detail::make_router(log, cfg, K + 1, nn::Head::kSoftmax); },
      [&](const nn::DenseNet& policy, const nn::DenseNet* router, const objectives::ObjectiveConfig& ocfg,
          std::span<const std::size_t> batch, objectives::Trainable t) {
        return objectives::personalized_objective(policy, router, log, ocfg, t, batch);
      });
}

inline TrainedSystem human_system(std::size_t num_experts) {
  TrainedSystem s;
  s.kind = SystemKind::kHuman;
  s.num_experts = num_experts;
  return s;
}

}  // namespace haiblbf::train
