#pragma once

// Simulated human decision makers and observational bandit logs.
//
// Two behavior models are provided. A noise expert picks one of the true
// labels with probability rho and a non-label otherwise (uniformly within
// each group). A proxy expert is a one-vs-rest scorer fitted on a subset of
// fully labeled data; its action distribution is the normalized scores.
// A rule expert applies a fixed decision function, optionally trembling to a
// uniformly drawn action with a small probability.
//
// Experts behave identically when generating the log and at deployment.

#include <cstddef>
#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "haiblbf/datakit.hpp"
#include "haiblbf/errors.hpp"
#include "haiblbf/nnkit.hpp"
#include "haiblbf/random.hpp"

namespace haiblbf::sim {

using data::MultiLabelDataset;

enum class BehaviorKind { kProxyModel, kUniformNoise, kRule };

/// Instance-dependent cost of querying an expert, in units of reward.
using CostFunction = std::function<double(std::span<const double>)>;
using DecisionRule = std::function<std::size_t(std::span<const double>)>;

/// Full-information reward: 1 iff the action is one of the instance's labels.
class RewardOracle {
 public:
  explicit RewardOracle(const MultiLabelDataset& ds) : ds_(&ds) {}
  double operator()(std::size_t instance, std::size_t action) const {
    if (instance >= ds_->size()) throw DataError("instance " + std::to_string(instance) + " not covered by oracle");
    return ds_->has_label(instance, action) ? 1.0 : 0.0;
  }
  const MultiLabelDataset& dataset() const { return *ds_; }

 private:
  const MultiLabelDataset* ds_;
};

/// One draw of the noise behavior: with probability rho a uniform true
/// label, otherwise a uniform non-label. An empty label set always yields a
/// (uniform) incorrect action; a label set covering every action always
/// yields a correct one.
inline std::size_t noise_expert_decide(double rho, const std::vector<std::size_t>& labels, std::size_t num_actions,
                                       Rng& rng) {
  const std::size_t n_true = labels.size();
  const std::size_t n_false = num_actions - n_true;
  const bool correct = bernoulli(rng, rho);
  if ((correct && n_true > 0) || n_false == 0) return labels[uniform_index(rng, n_true)];
  std::size_t k = uniform_index(rng, n_false);
  // k-th action not in the (sorted) label set
  for (std::size_t a = 0; a < num_actions; ++a) {
    if (std::binary_search(labels.begin(), labels.end(), a)) continue;
    if (k == 0) return a;
    --k;
  }
  return num_actions - 1;
}

/// Closed-form action distribution of a noise expert.
inline void noise_expert_distribution(double rho, const std::vector<std::size_t>& labels, std::size_t num_actions,
                                      std::vector<double>& out) {
  const std::size_t n_true = labels.size();
  const std::size_t n_false = num_actions - n_true;
  out.assign(num_actions, 0.0);
  const double p_true = n_false == 0 ? 1.0 : (n_true == 0 ? 0.0 : rho);
  const double p_false = 1.0 - p_true;
  for (std::size_t a = 0; a < num_actions; ++a) {
    const bool is_label = std::binary_search(labels.begin(), labels.end(), a);
    out[a] = is_label ? p_true / static_cast<double>(n_true) : p_false / static_cast<double>(n_false);
  }
}

class Expert {
 public:
  static Expert uniform_noise(double rho, double cost = 0.0) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0, 1]");
    Expert e;
    e.kind_ = BehaviorKind::kUniformNoise;
    e.rho_ = rho;
    e.set_constant_cost(cost);
    return e;
  }

  static Expert proxy(nn::DenseNet scorer, double cost = 0.0) {
    if (scorer.head() != nn::Head::kSigmoid) throw std::invalid_argument("proxy scorer needs a one-vs-rest head");
    Expert e;
    e.kind_ = BehaviorKind::kProxyModel;
    e.scorer_ = std::make_shared<const nn::DenseNet>(std::move(scorer));
    e.set_constant_cost(cost);
    return e;
  }

  static Expert rule(DecisionRule rule, double cost = 0.0, double tremble = 0.0) {
    if (!(tremble >= 0.0 && tremble <= 1.0)) throw std::invalid_argument("tremble must lie in [0, 1]");
    Expert e;
    e.kind_ = BehaviorKind::kRule;
    e.rule_ = std::move(rule);
    e.tremble_ = tremble;
    e.set_constant_cost(cost);
    return e;
  }

  BehaviorKind kind() const { return kind_; }
  double rho() const { return rho_; }
  double tremble() const { return tremble_; }
  const nn::DenseNet* scorer() const { return scorer_.get(); }

  void set_constant_cost(double c) {
    if (!(c >= 0.0)) throw std::invalid_argument("expert cost must be non-negative");
    constant_cost_ = c;
    cost_fn_ = nullptr;
  }
  void set_cost_function(CostFunction fn) { cost_fn_ = std::move(fn); }
  double cost(std::span<const double> x) const {
    if (!cost_fn_) return constant_cost_;
    const double c = cost_fn_(x);
    if (!(c >= 0.0)) throw NumericError("cost function returned a negative or NaN cost");
    return c;
  }
  /// Cost reported in result files when no cost function is attached.
  double constant_cost() const { return constant_cost_; }

  /// Probability of each action given the context (and, for noise experts,
  /// the true label set).
  void action_distribution(std::span<const double> x, const std::vector<std::size_t>& labels,
                           std::size_t num_actions, std::vector<double>& out) const {
    switch (kind_) {
      case BehaviorKind::kUniformNoise:
        noise_expert_distribution(rho_, labels, num_actions, out);
        return;
      case BehaviorKind::kProxyModel: {
        const auto scores = scorer_->forward(x);
        if (scores.size() != num_actions) throw ShapeError("proxy scorer output does not match action space");
        double total = 0.0;
        for (double s : scores) total += s;
        out.resize(num_actions);
        for (std::size_t a = 0; a < num_actions; ++a) out[a] = scores[a] / total;
        return;
      }
      case BehaviorKind::kRule: {
        out.assign(num_actions, tremble_ / static_cast<double>(num_actions));
        const std::size_t a = rule_(x);
        if (a >= num_actions) throw DataError("decision rule returned an action outside the action space");
        out[a] += 1.0 - tremble_;
        return;
      }
    }
  }

  std::size_t decide(std::span<const double> x, const std::vector<std::size_t>& labels, std::size_t num_actions,
                     Rng& rng) const {
    if (kind_ == BehaviorKind::kUniformNoise) return noise_expert_decide(rho_, labels, num_actions, rng);
    if (kind_ == BehaviorKind::kRule) {
      if (tremble_ > 0.0 && bernoulli(rng, tremble_)) return uniform_index(rng, num_actions);
      const std::size_t a = rule_(x);
      if (a >= num_actions) throw DataError("decision rule returned an action outside the action space");
      return a;
    }
    std::vector<double> dist;
    action_distribution(x, labels, num_actions, dist);
    return sample_categorical(rng, dist);
  }

 private:
  Expert() = default;

  BehaviorKind kind_ = BehaviorKind::kUniformNoise;
  double rho_ = 1.0;
  std::shared_ptr<const nn::DenseNet> scorer_;
  DecisionRule rule_;
  double tremble_ = 0.0;
  double constant_cost_ = 0.0;
  CostFunction cost_fn_;
};

/// K experts and the distribution that assigned them to historical cases.
class ExpertPool {
 public:
  ExpertPool() = default;
  explicit ExpertPool(std::vector<Expert> experts) : experts_(std::move(experts)) {
    if (experts_.empty()) throw std::invalid_argument("an expert pool needs at least one expert");
    assignment_.assign(experts_.size(), 1.0 / static_cast<double>(experts_.size()));
  }

  std::size_t size() const { return experts_.size(); }
  const Expert& operator[](std::size_t j) const { return experts_.at(j); }
  Expert& operator[](std::size_t j) { return experts_.at(j); }
  const std::vector<Expert>& experts() const { return experts_; }

  /// Historical assignment weights (constant in x); uniform by default.
  void set_assignment(std::vector<double> weights) {
    if (weights.size() != experts_.size()) throw ShapeError("assignment weights must have one entry per expert");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("assignment weights must be non-negative");
      total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("assignment weights sum to zero");
    for (double& w : weights) w /= total;
    assignment_ = std::move(weights);
  }
  const std::vector<double>& assignment() const { return assignment_; }

  void set_constant_cost(double c) {
    for (auto& e : experts_) e.set_constant_cost(c);
  }

  /// Cost of a uniformly drawn expert.
  double mean_cost(std::span<const double> x) const {
    double total = 0.0;
    for (const auto& e : experts_) total += e.cost(x);
    return total / static_cast<double>(experts_.size());
  }

 private:
  std::vector<Expert> experts_;
  std::vector<double> assignment_;
};

// ---------------------------------------------------------------------------
// Proxy behavior model

struct ProxyOptions {
  double subset_fraction = 0.30;
  std::vector<std::size_t> hidden = {16};
  nn::Activation activation = nn::Activation::kRelu;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
};

/// Fits a one-vs-rest scorer with binary cross-entropy on fully labeled data.
inline nn::DenseNet fit_ovr_scorer(const MultiLabelDataset& ds, std::uint64_t seed, const ProxyOptions& opts) {
  if (ds.size() < 10) throw TrainingError("proxy behavior model needs at least 10 instances");
  nn::DenseNet net(ds.num_features(), opts.hidden, opts.activation, ds.num_actions(), nn::Head::kSigmoid);
  Rng init = make_rng(derive_seed(seed, "proxy-init"));
  net.init_glorot(init);
  nn::AdamState adam(net, opts.learning_rate);
  Rng order_rng = make_rng(derive_seed(seed, "proxy-order"));
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  nn::ForwardCache cache;
  nn::Gradient grad(net.num_params());
  std::vector<double> dlogits(ds.num_actions());
  const std::size_t batch = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle(order, order_rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      grad.zero();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const auto s = net.forward(ds.features(i), cache);
        for (std::size_t a = 0; a < s.size(); ++a) dlogits[a] = s[a] - (ds.has_label(i, a) ? 1.0 : 0.0);
        net.backward_from_logits(cache, dlogits, grad);
      }
      grad *= 1.0 / static_cast<double>(end - start);
      nn::adam_step(net, adam, grad);
    }
  }
  return net;
}

/// Draws a `subset_fraction` sample of the labeled data (seeded) and fits a
/// proxy expert on it. Different seeds give different subsets.
inline Expert fit_proxy_hbm(const MultiLabelDataset& ds, std::uint64_t seed, const ProxyOptions& opts = {},
                            double cost = 0.0) {
  if (ds.empty()) throw TrainingError("proxy behavior model needs a non-empty dataset");
  if (!(opts.subset_fraction > 0.0 && opts.subset_fraction <= 1.0)) {
    throw std::invalid_argument("subset_fraction must lie in (0, 1]");
  }
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = make_rng(derive_seed(seed, "proxy-subset"));
  shuffle(idx, rng);
  const auto n = static_cast<std::size_t>(std::llround(opts.subset_fraction * static_cast<double>(ds.size())));
  idx.resize(std::max<std::size_t>(n, 1));
  std::sort(idx.begin(), idx.end());
  return Expert::proxy(fit_ovr_scorer(ds.subset(idx), seed, opts), cost);
}

// ---------------------------------------------------------------------------
// Bandit logs

struct LogRecord {
  std::size_t instance = 0;  // row in the contexts dataset
  std::size_t expert = 0;
  std::size_t action = 0;
  double reward = 0.0;
  std::optional<double> propensity;           // pi_0(a | x, h) when known
  std::optional<double> marginal_propensity;  // sum_h d_0(h) pi_0(a | x, h) when known
};

/// Logged decisions with their contexts. Rewards lie in [0, 1].
class BanditLog {
 public:
  BanditLog() = default;
  BanditLog(std::shared_ptr<const MultiLabelDataset> contexts, std::size_t num_experts)
      : contexts_(std::move(contexts)), num_experts_(num_experts) {}

  void add(const LogRecord& r) {
    if (r.instance >= contexts_->size()) throw DataError("log record refers to unknown instance");
    if (r.action >= contexts_->num_actions()) throw DataError("log record action outside action space");
    if (r.expert >= num_experts_) throw DataError("log record refers to unknown expert " + std::to_string(r.expert));
    if (!(r.reward >= 0.0 && r.reward <= 1.0)) throw DataError("reward outside [0, 1]");
    records_.push_back(r);
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const LogRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<LogRecord>& records() const { return records_; }
  std::span<const double> x(std::size_t i) const { return contexts_->features(records_[i].instance); }
  const MultiLabelDataset& contexts() const { return *contexts_; }
  std::shared_ptr<const MultiLabelDataset> contexts_ptr() const { return contexts_; }
  std::size_t num_actions() const { return contexts_->num_actions(); }
  std::size_t num_features() const { return contexts_->num_features(); }
  std::size_t num_experts() const { return num_experts_; }

  double mean_reward() const {
    double total = 0.0;
    for (const auto& r : records_) total += r.reward;
    return records_.empty() ? 0.0 : total / static_cast<double>(records_.size());
  }

 private:
  std::shared_ptr<const MultiLabelDataset> contexts_;
  std::size_t num_experts_ = 0;
  std::vector<LogRecord> records_;
};

/// For every labeled instance: draw an expert from the assignment
/// distribution, draw that expert's action, record the oracle reward and the
/// closed-form behavior propensities. Unlabeled instances are skipped.
inline BanditLog generate_log(std::shared_ptr<const MultiLabelDataset> ds, const ExpertPool& pool,
                              std::uint64_t seed) {
  if (pool.size() == 0) throw std::invalid_argument("expert pool is empty");
  BanditLog log(ds, pool.size());
  const RewardOracle oracle(*ds);
  Rng rng = make_rng(derive_seed(seed, "bandit-log"));
  const std::size_t l = ds->num_actions();
  std::vector<double> dist;
  std::vector<std::vector<double>> per_expert(pool.size());
  for (std::size_t i = 0; i < ds->size(); ++i) {
    if (ds->unlabeled(i)) continue;
    const auto x = ds->features(i);
    const std::size_t h = sample_categorical(rng, pool.assignment());
    const std::size_t a = pool[h].decide(x, ds->labels(i), l, rng);
    LogRecord rec;
    rec.instance = i;
    rec.expert = h;
    rec.action = a;
    rec.reward = oracle(i, a);
    double marginal = 0.0;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      pool[j].action_distribution(x, ds->labels(i), l, per_expert[j]);
      marginal += pool.assignment()[j] * per_expert[j][a];
    }
    rec.propensity = per_expert[h][a];
    rec.marginal_propensity = marginal;
    log.add(rec);
  }
  return log;
}

/// CSV with header `instance_id,expert_id,action,reward,propensity`;
/// the propensity column is blank when unknown.
inline void write_log_csv(std::ostream& os, const BanditLog& log) {
  os << "instance_id,expert_id,action,reward,propensity\n";
  char buf[64];
  for (const auto& r : log.records()) {
    os << r.instance << ',' << r.expert << ',' << r.action << ',';
    auto res = std::to_chars(buf, buf + sizeof(buf), r.reward);
    os.write(buf, res.ptr - buf);
    os << ',';
    if (r.propensity) {
      res = std::to_chars(buf, buf + sizeof(buf), *r.propensity);
      os.write(buf, res.ptr - buf);
    }
    os << '\n';
  }
}

/// Reads a log written by write_log_csv; contexts come from `ds`.
inline BanditLog read_log_csv(std::istream& is, std::shared_ptr<const MultiLabelDataset> ds, std::size_t num_experts) {
  BanditLog log(ds, num_experts);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("instance_id", 0) == 0) continue;
    std::vector<std::string_view> cols;
    std::string_view sv(line);
    std::size_t start = 0;
    while (true) {
      const auto comma = sv.find(',', start);
      cols.push_back(sv.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (cols.size() != 5) throw ParseError(line_no, "expected 5 columns");
    LogRecord r;
    if (!data::detail::parse_number(cols[0], r.instance) || !data::detail::parse_number(cols[1], r.expert) ||
        !data::detail::parse_number(cols[2], r.action) || !data::detail::parse_number(cols[3], r.reward)) {
      throw ParseError(line_no, "malformed log record");
    }
    if (!cols[4].empty()) {
      double p = 0.0;
      if (!data::detail::parse_number(cols[4], p)) throw ParseError(line_no, "malformed propensity");
      r.propensity = p;
    }
    try {
      log.add(r);
    } catch (const DataError& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Deployment-time queries

struct Decision {
  std::size_t action = 0;
  double reward = 0.0;
  double cost = 0.0;
};

inline Decision expert_decide_at_test(const ExpertPool& pool, std::size_t j, const RewardOracle& oracle,
                                      std::size_t instance, Rng& rng) {
  if (j >= pool.size()) throw DataError("expert " + std::to_string(j) + " not in pool");
  const auto& ds = oracle.dataset();
  if (instance >= ds.size()) throw DataError("instance not covered by oracle");
  const auto x = ds.features(instance);
  Decision d;
  d.action = pool[j].decide(x, ds.labels(instance), ds.num_actions(), rng);
  d.reward = oracle(instance, d.action);
  d.cost = pool[j].cost(x);
  return d;
}

}  // namespace haiblbf::sim
