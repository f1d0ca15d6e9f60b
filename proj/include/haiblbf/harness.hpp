#pragma once

// Experiment runner: JSON configuration, per-repetition pipelines, result
// tables.
//
// Seeding: repetition r runs with seed_r = master_seed XOR r. Every random
// component of the repetition draws from its own stream derived from seed_r
// (dataset, split, hbm, log, propensity, train, deploy), so adding a system
// or a cost to a config never changes the numbers of the others.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "haiblbf/datakit.hpp"
#include "haiblbf/errors.hpp"
#include "haiblbf/evalkit.hpp"
#include "haiblbf/objectives.hpp"
#include "haiblbf/propensity.hpp"
#include "haiblbf/simkit.hpp"
#include "haiblbf/trainkit.hpp"

namespace haiblbf::harness {

using json = nlohmann::ordered_json;
using train::SystemKind;

enum class DatasetSource { kSynthetic, kFile, kCompliance };
enum class HbmKind { kNoise, kProxy, kRule };

struct DatasetConfig {
  DatasetSource source = DatasetSource::kSynthetic;
  std::string path;
  std::size_t num_features = 0;  // file source; 0 infers
  std::size_t num_actions = 0;
  data::SyntheticSpec synthetic;  // seed is replaced per repetition
  std::size_t compliance_n = 400;
  bool standardize = true;  // z-score fitted on the training split
};

struct ExpertConfig {
  HbmKind kind = HbmKind::kNoise;
  std::vector<double> rho = {0.6, 0.7, 0.8};
  std::size_t count = 3;  // proxy and rule experts
  sim::ProxyOptions proxy;
  double tremble = 0.1;             // rule experts
  std::vector<double> assignment;   // historical assignment weights; empty = uniform

  std::size_t num_experts() const { return kind == HbmKind::kNoise ? rho.size() : count; }
};

struct PropensityConfig {
  objectives::PropensitySource source = objectives::PropensitySource::kLogged;
  propensity::Conditioning expert_conditioning = propensity::Conditioning::kSeparatePerExpert;
  propensity::AssignmentMode assignment = propensity::AssignmentMode::kKnownUniform;
  propensity::ClassifierOptions classifier;
};

struct Capacity {
  std::string label;
  train::Architecture policy;
  train::Architecture router;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  std::size_t repetitions = 10;
  std::size_t threads = 1;
  std::string output_dir = "results";
  bool save_systems = false;
  DatasetConfig dataset;
  double test_fraction = 0.25;
  ExpertConfig experts;
  std::vector<double> costs = {0.3};
  PropensityConfig propensity;
  train::TrainConfig train;
  std::vector<Capacity> capacities;  // empty: a single capacity from `train`
  std::vector<SystemKind> systems = {SystemKind::kHuman, SystemKind::kAO, SystemKind::kTS, SystemKind::kJC,
                                     SystemKind::kJCP};

  std::vector<Capacity> resolved_capacities() const {
    if (!capacities.empty()) return capacities;
    return {Capacity{"default", train.policy, train.router}};
  }
};

// ---------------------------------------------------------------------------
// Names

inline const char* to_string(DatasetSource s) {
  switch (s) {
    case DatasetSource::kSynthetic: return "synthetic";
    case DatasetSource::kFile: return "file";
    case DatasetSource::kCompliance: return "compliance-2d";
  }
  return "?";
}

inline const char* to_string(HbmKind k) {
  switch (k) {
    case HbmKind::kNoise: return "noise";
    case HbmKind::kProxy: return "proxy";
    case HbmKind::kRule: return "rule";
  }
  return "?";
}


inline const char* to_string(propensity::Conditioning c) {
  switch (c) {
    case propensity::Conditioning::kMarginal: return "marginal";
    case propensity::Conditioning::kSharedWithId: return "shared";
    case propensity::Conditioning::kSeparatePerExpert: return "separate";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// JSON <-> config

namespace detail {

/// Walks one JSON object, reporting problems with their dotted field path and
/// rejecting keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key), "wrong type");
    }
  }

  template <class Fn>
  void get_enum(const std::string& key, Fn&& parse) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError(field(key), "expected a string");
    const auto s = j_.at(key).get<std::string>();
    if (!parse(s)) throw ConfigError(field(key), "unknown value '" + s + "'");
  }

  Reader child(const std::string& key) {
    seen_.push_back(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  const json* raw(const std::string& key) {
    seen_.push_back(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) throw ConfigError(field(k), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline bool parse_activation(const std::string& s, nn::Activation& out) {
  if (s == "identity") out = nn::Activation::kIdentity;
  else if (s == "relu") out = nn::Activation::kRelu;
  else return false;
  return true;
}

inline void read_architecture(Reader r, train::Architecture& a) {
  r.get("hidden", a.hidden);
  r.get_enum("activation", [&](const std::string& s) { return parse_activation(s, a.activation); });
  r.finish();
  for (std::size_t k = 0; k < a.hidden.size(); ++k) {
    if (a.hidden[k] == 0) throw ConfigError(r.field("hidden"), "hidden widths must be positive");
  }
}

inline json architecture_json(const train::Architecture& a) {
  return json{{"hidden", a.hidden}, {"activation", nn::to_string(a.activation)}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  using detail::Reader;
  ExperimentConfig c;
  Reader root(j, "");
  root.get("name", c.name);
  root.get("seed", c.seed);
  root.get("repetitions", c.repetitions);
  root.get("threads", c.threads);
  root.get("output_dir", c.output_dir);
  root.get("save_systems", c.save_systems);
  root.get("test_fraction", c.test_fraction);
  root.get("costs", c.costs);

  {
    Reader d = root.child("dataset");
    d.get_enum("source", [&](const std::string& s) {
      if (s == "synthetic") c.dataset.source = DatasetSource::kSynthetic;
      else if (s == "file") c.dataset.source = DatasetSource::kFile;
      else if (s == "compliance-2d") c.dataset.source = DatasetSource::kCompliance;
      else return false;
      return true;
    });
    d.get("path", c.dataset.path);
    d.get("num_features", c.dataset.num_features);
    d.get("num_actions", c.dataset.num_actions);
    d.get("standardize", c.dataset.standardize);
    {
      Reader s = d.child("synthetic");
      s.get("n", c.dataset.synthetic.n);
      s.get("d", c.dataset.synthetic.d);
      s.get("l", c.dataset.synthetic.l);
      s.get("label_noise", c.dataset.synthetic.label_noise);
      s.get("center_scale", c.dataset.synthetic.center_scale);
      s.get("cluster_spread", c.dataset.synthetic.cluster_spread);
      s.get("ambiguous_fraction", c.dataset.synthetic.ambiguous_fraction);
      s.finish();
    }
    {
      Reader s = d.child("compliance");
      s.get("n", c.dataset.compliance_n);
      s.finish();
    }
    d.finish();
    if (c.dataset.source == DatasetSource::kFile && c.dataset.path.empty()) {
      throw ConfigError(d.field("path"), "file source needs a path");
    }
    if (c.dataset.source == DatasetSource::kCompliance && c.dataset.compliance_n < 4) {
      throw ConfigError(d.field("compliance.n"), "must be at least 4");
    }
  }

  {
    Reader e = root.child("experts");
    e.get_enum("kind", [&](const std::string& s) {
      if (s == "noise") c.experts.kind = HbmKind::kNoise;
      else if (s == "proxy") c.experts.kind = HbmKind::kProxy;
      else if (s == "rule") c.experts.kind = HbmKind::kRule;
      else return false;
      return true;
    });
    e.get("rho", c.experts.rho);
    e.get("count", c.experts.count);
    e.get("tremble", c.experts.tremble);
    e.get("assignment", c.experts.assignment);
    {
      Reader p = e.child("proxy");
      p.get("subset_fraction", c.experts.proxy.subset_fraction);
      p.get("hidden", c.experts.proxy.hidden);
      p.get_enum("activation",
                 [&](const std::string& s) { return detail::parse_activation(s, c.experts.proxy.activation); });
      p.get("epochs", c.experts.proxy.epochs);
      p.get("batch_size", c.experts.proxy.batch_size);
      p.get("learning_rate", c.experts.proxy.learning_rate);
      p.finish();
    }
    e.finish();
    if (c.experts.kind == HbmKind::kNoise) {
      if (c.experts.rho.empty()) throw ConfigError(e.field("rho"), "noise experts need at least one rho");
      for (double r : c.experts.rho) {
        if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(e.field("rho"), "rho must lie in [0, 1]");
      }
      if (e.has("count") && c.experts.count != c.experts.rho.size()) {
        throw ConfigError(e.field("count"), "must equal the length of rho for noise experts");
      }
      c.experts.count = c.experts.rho.size();
    }
    if (c.experts.num_experts() == 0) throw ConfigError(e.field("count"), "need at least one expert");
    if (!c.experts.assignment.empty() && c.experts.assignment.size() != c.experts.num_experts()) {
      throw ConfigError(e.field("assignment"), "needs one weight per expert");
    }
    if (!(c.experts.tremble >= 0.0 && c.experts.tremble <= 1.0)) {
      throw ConfigError(e.field("tremble"), "must lie in [0, 1]");
    }
    if (c.experts.kind == HbmKind::kRule) {
      if (c.dataset.source != DatasetSource::kCompliance) {
        throw ConfigError(e.field("kind"), "rule experts are defined on compliance-2d data only");
      }
      if (c.dataset.standardize) {
        throw ConfigError("dataset.standardize", "rule experts read raw coordinates; set it to false");
      }
    }
  }

  {
    Reader p = root.child("propensity");
    p.get_enum("source", [&](const std::string& s) {
      if (s == "logged") c.propensity.source = objectives::PropensitySource::kLogged;
      else if (s == "estimated") c.propensity.source = objectives::PropensitySource::kEstimated;
      else return false;
      return true;
    });
    p.get_enum("expert_conditioning", [&](const std::string& s) {
      if (s == "shared") c.propensity.expert_conditioning = propensity::Conditioning::kSharedWithId;
      else if (s == "separate") c.propensity.expert_conditioning = propensity::Conditioning::kSeparatePerExpert;
      else return false;
      return true;
    });
    p.get_enum("assignment", [&](const std::string& s) {
      if (s == "known-uniform") c.propensity.assignment = propensity::AssignmentMode::kKnownUniform;
      else if (s == "estimated") c.propensity.assignment = propensity::AssignmentMode::kEstimated;
      else return false;
      return true;
    });
    p.get("hidden", c.propensity.classifier.hidden);
    p.get("epochs", c.propensity.classifier.epochs);
    p.get("learning_rate", c.propensity.classifier.learning_rate);
    p.get("epsilon", c.propensity.classifier.epsilon);
    p.finish();
  }

  {
    Reader t = root.child("train");
    auto& tc = c.train;
    t.get("epochs", tc.epochs);
    t.get("batch_size", tc.batch_size);
    t.get("learning_rate", tc.learning_rate);
    t.get("lambda_grid", tc.lambda_grid);
    t.get("convergence_window", tc.convergence_window);
    t.get("convergence_tolerance", tc.convergence_tolerance);
    t.get("neutral_init", tc.neutral_init);
    t.get("two_stage_start", tc.two_stage_start);
    t.get("truncation", tc.objective.truncation);
    t.get("baseline_human_branch", tc.objective.baseline_human_branch);
    t.get("assignment_weight_on_algorithm_branch", tc.objective.assignment_weight_on_algorithm_branch);
    detail::read_architecture(t.child("policy"), tc.policy);
    detail::read_architecture(t.child("router"), tc.router);
    t.finish();
    if (tc.epochs < 1) throw ConfigError(t.field("epochs"), "must be at least 1");
    if (tc.batch_size < 1) throw ConfigError(t.field("batch_size"), "must be at least 1");
    if (!(tc.learning_rate > 0.0)) throw ConfigError(t.field("learning_rate"), "must be positive");
    if (tc.lambda_grid.empty()) throw ConfigError(t.field("lambda_grid"), "must not be empty");
    for (double l : tc.lambda_grid) {
      if (!(l >= 0.0 && l <= 1.0)) throw ConfigError(t.field("lambda_grid"), "entries must lie in [0, 1]");
    }
    if (!(tc.objective.truncation >= 1.0)) throw ConfigError(t.field("truncation"), "must be at least 1");
  }

  if (const json* caps = root.raw("capacities")) {
    if (!caps->is_array()) throw ConfigError("capacities", "expected an array");
    for (std::size_t k = 0; k < caps->size(); ++k) {
      const std::string path = "capacities[" + std::to_string(k) + "]";
      Reader r((*caps)[k], path);
      Capacity cap{"", c.train.policy, c.train.router};
      r.get("label", cap.label);
      detail::read_architecture(r.child("policy"), cap.policy);
      detail::read_architecture(r.child("router"), cap.router);
      r.finish();
      if (cap.label.empty()) throw ConfigError(path + ".label", "must not be empty");
      c.capacities.push_back(std::move(cap));
    }
  }

  if (const json* sys = root.raw("systems")) {
    if (!sys->is_array() || sys->empty()) throw ConfigError("systems", "expected a non-empty array");
    c.systems.clear();
    for (std::size_t k = 0; k < sys->size(); ++k) {
      const std::string path = "systems[" + std::to_string(k) + "]";
      if (!(*sys)[k].is_string()) throw ConfigError(path, "expected a string");
      const auto kind = train::parse_system((*sys)[k].get<std::string>());
      if (!kind) throw ConfigError(path, "unknown system '" + (*sys)[k].get<std::string>() + "'");
      if (std::find(c.systems.begin(), c.systems.end(), *kind) != c.systems.end()) {
        throw ConfigError(path, "duplicate system");
      }
      c.systems.push_back(*kind);
    }
  }
  root.finish();

  if (c.repetitions < 1) throw ConfigError("repetitions", "must be at least 1");
  if (c.threads < 1) throw ConfigError("threads", "must be at least 1");
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) throw ConfigError("test_fraction", "must lie in (0, 1)");
  if (c.costs.empty()) throw ConfigError("costs", "must not be empty");
  for (double v : c.costs) {
    if (!(v >= 0.0)) throw ConfigError("costs", "costs must be non-negative");
  }
  return c;
}

/// Every field with its effective value.
inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["repetitions"] = c.repetitions;
  j["threads"] = c.threads;
  j["output_dir"] = c.output_dir;
  j["save_systems"] = c.save_systems;
  j["dataset"] = {
      {"source", to_string(c.dataset.source)},
      {"path", c.dataset.path},
      {"num_features", c.dataset.num_features},
      {"num_actions", c.dataset.num_actions},
      {"standardize", c.dataset.standardize},
      {"synthetic",
       {{"n", c.dataset.synthetic.n},
        {"d", c.dataset.synthetic.d},
        {"l", c.dataset.synthetic.l},
        {"label_noise", c.dataset.synthetic.label_noise},
        {"center_scale", c.dataset.synthetic.center_scale},
        {"cluster_spread", c.dataset.synthetic.cluster_spread},
        {"ambiguous_fraction", c.dataset.synthetic.ambiguous_fraction}}},
      {"compliance", {{"n", c.dataset.compliance_n}}},
  };
  j["test_fraction"] = c.test_fraction;
  j["experts"] = {
      {"kind", to_string(c.experts.kind)},
      {"rho", c.experts.rho},
      {"count", c.experts.num_experts()},
      {"tremble", c.experts.tremble},
      {"assignment", c.experts.assignment},
      {"proxy",
       {{"subset_fraction", c.experts.proxy.subset_fraction},
        {"hidden", c.experts.proxy.hidden},
        {"activation", nn::to_string(c.experts.proxy.activation)},
        {"epochs", c.experts.proxy.epochs},
        {"batch_size", c.experts.proxy.batch_size},
        {"learning_rate", c.experts.proxy.learning_rate}}},
  };
  j["costs"] = c.costs;
  j["propensity"] = {
      {"source", c.propensity.source == objectives::PropensitySource::kLogged ? "logged" : "estimated"},
      {"expert_conditioning", to_string(c.propensity.expert_conditioning)},
      {"assignment",
       c.propensity.assignment == propensity::AssignmentMode::kKnownUniform ? "known-uniform" : "estimated"},
      {"hidden", c.propensity.classifier.hidden},
      {"epochs", c.propensity.classifier.epochs},
      {"learning_rate", c.propensity.classifier.learning_rate},
      {"epsilon", c.propensity.classifier.epsilon},
  };
  const auto& t = c.train;
  j["train"] = {
      {"epochs", t.epochs},
      {"batch_size", t.batch_size},
      {"learning_rate", t.learning_rate},
      {"lambda_grid", t.lambda_grid},
      {"convergence_window", t.convergence_window},
      {"convergence_tolerance", t.convergence_tolerance},
      {"neutral_init", t.neutral_init},
      {"two_stage_start", t.two_stage_start},
      {"truncation", t.objective.truncation},
      {"baseline_human_branch", t.objective.baseline_human_branch},
      {"assignment_weight_on_algorithm_branch", t.objective.assignment_weight_on_algorithm_branch},
      {"policy", detail::architecture_json(t.policy)},
      {"router", detail::architecture_json(t.router)},
  };
  json caps = json::array();
  for (const auto& cap : c.capacities) {
    caps.push_back({{"label", cap.label},
                    {"policy", detail::architecture_json(cap.policy)},
                    {"router", detail::architecture_json(cap.router)}});
  }
  j["capacities"] = caps;
  json sys = json::array();
  for (auto s : c.systems) sys.push_back(train::to_string(s));
  j["systems"] = sys;
  return j;
}

/// Applies `a.b.c=value`. The value is read as JSON when it parses as JSON
/// and as a plain string otherwise.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError(path, "empty path component");
    if (!node->is_object()) throw ConfigError(path, "cannot descend into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path, std::string("malformed JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Pipeline

struct ResultRow {
  std::size_t repetition = 0;
  std::uint64_t seed = 0;
  std::string dataset;
  std::string capacity;
  double cost = 0.0;
  double lambda = 0.0;
  std::size_t epochs = 0;
  bool from_two_stage = false;
  eval::DeploymentResult result;
};

/// The inputs shared by every system in one repetition.
struct RepetitionData {
  std::uint64_t seed = 0;
  std::shared_ptr<const data::MultiLabelDataset> train;
  std::shared_ptr<const data::MultiLabelDataset> test;
  sim::ExpertPool pool;
  sim::BanditLog log;
  std::optional<propensity::PropensityEstimates> estimates;
};

inline std::uint64_t repetition_seed(std::uint64_t master, std::size_t r) { return master ^ static_cast<std::uint64_t>(r); }

inline data::MultiLabelDataset load_dataset_file(const DatasetConfig& d) {
  std::ifstream in(d.path);
  if (!in) throw std::runtime_error("cannot open dataset file '" + d.path + "'");
  return data::parse_libsvm_multilabel(in, data::ParseOptions{d.num_features, d.num_actions});
}

inline std::string dataset_label(const DatasetConfig& d) {
  if (d.source == DatasetSource::kFile) return std::filesystem::path(d.path).stem().string();
  return to_string(d.source);
}

/// Split, experts, log and propensities for repetition r. `file_data` is the
/// loaded dataset for the file source (null otherwise).
inline RepetitionData prepare_repetition(const ExperimentConfig& c, std::size_t r,
                                         const data::MultiLabelDataset* file_data = nullptr) {
  RepetitionData rep;
  rep.seed = repetition_seed(c.seed, r);
  const std::uint64_t s = rep.seed;

  data::MultiLabelDataset full;
  switch (c.dataset.source) {
    case DatasetSource::kSynthetic: {
      auto spec = c.dataset.synthetic;
      spec.seed = derive_seed(s, "dataset");
      full = data::make_synthetic_multilabel(spec);
      break;
    }
    case DatasetSource::kCompliance:
      full = data::make_compliance_2d(c.dataset.compliance_n, derive_seed(s, "dataset")).dataset;
      break;
    case DatasetSource::kFile:
      if (file_data == nullptr) throw UsageError("file dataset not loaded");
      full = *file_data;
      break;
  }
  auto [train_set, test_set] = data::split(full, data::SplitSpec{c.test_fraction, derive_seed(s, "split")});
  if (c.dataset.standardize) {
    const auto st = data::Standardizer::fit(train_set);
    train_set = st.apply(train_set);
    test_set = st.apply(test_set);
  }
  rep.train = std::make_shared<const data::MultiLabelDataset>(std::move(train_set));
  rep.test = std::make_shared<const data::MultiLabelDataset>(std::move(test_set));

  std::vector<sim::Expert> experts;
  const std::size_t K = c.experts.num_experts();
  for (std::size_t j = 0; j < K; ++j) {
    switch (c.experts.kind) {
      case HbmKind::kNoise:
        experts.push_back(sim::Expert::uniform_noise(c.experts.rho[j]));
        break;
      case HbmKind::kProxy:
        experts.push_back(sim::fit_proxy_hbm(*rep.train, derive_seed(s, "hbm", j), c.experts.proxy));
        break;
      case HbmKind::kRule:
        if (rep.train->num_features() != 2) throw ConfigError("experts.kind", "rule experts need 2-d compliance data");
        experts.push_back(sim::Expert::rule(data::compliance_expert_action, 0.0, c.experts.tremble));
        break;
    }
  }
  rep.pool = sim::ExpertPool(std::move(experts));
  if (!c.experts.assignment.empty()) rep.pool.set_assignment(c.experts.assignment);
  rep.log = sim::generate_log(rep.train, rep.pool, derive_seed(s, "log"));
  if (rep.log.empty()) throw EmptyDatasetError("the training split has no labeled instances");

  if (c.propensity.source == objectives::PropensitySource::kEstimated) {
    auto opts = c.propensity.classifier;
    opts.seed = derive_seed(s, "propensity");
    propensity::PropensityEstimates est;
    est.behavior = propensity::fit_behavior(rep.log, propensity::Conditioning::kMarginal, opts);
    const bool personalized =
        std::find(c.systems.begin(), c.systems.end(), SystemKind::kJCP) != c.systems.end();
    if (personalized) est.behavior_given_expert = propensity::fit_behavior(rep.log, c.propensity.expert_conditioning, opts);
    est.assignment = propensity::assignment_model(K, c.propensity.assignment, &rep.log, opts);
    rep.estimates = std::move(est);
  }
  return rep;
}

inline bool wants(const ExperimentConfig& c, SystemKind k) {
  return std::find(c.systems.begin(), c.systems.end(), k) != c.systems.end();
}

inline std::string system_file_name(std::size_t r, const std::string& capacity, double cost, SystemKind k) {
  std::ostringstream os;
  os << "rep" << r << "_" << capacity << "_c" << cost << "_" << train::to_string(k) << ".txt";
  return os.str();
}

/// Trains and deploys every requested system for one repetition. Rows come
/// out ordered by capacity, cost, then system as listed in the config.
/// `on_system` (optional) sees each trained system.
template <class OnSystem>
std::vector<ResultRow> run_repetition(const ExperimentConfig& c, std::size_t r, const data::MultiLabelDataset* file_data,
                                      OnSystem&& on_system) {
  RepetitionData rep = prepare_repetition(c, r, file_data);
  const std::uint64_t s = rep.seed;
  const sim::RewardOracle oracle(*rep.test);
  const std::uint64_t deploy_seed = derive_seed(s, "deploy");
  const std::string dataset = dataset_label(c.dataset);
  const propensity::PropensityEstimates* est = rep.estimates ? &*rep.estimates : nullptr;

  std::vector<ResultRow> rows;
  for (const auto& cap : c.resolved_capacities()) {
    train::TrainConfig tc = c.train;
    tc.policy = cap.policy;
    tc.router = cap.router;
    tc.seed = derive_seed(s, "train");

    // AO ignores costs, so it is trained once per capacity. TS is trained
    // once per cost and also seeds the joint systems' two-stage start.
    const bool joint = wants(c, SystemKind::kJC) || wants(c, SystemKind::kJCP);
    const bool need_ts = wants(c, SystemKind::kTS) || (joint && tc.two_stage_start);
    std::optional<train::TrainedSystem> ao;
    if (wants(c, SystemKind::kAO) || need_ts) {
      rep.pool.set_constant_cost(c.costs.front());
      const auto prepared = objectives::prepare_log(rep.log, rep.pool, c.propensity.source, est);
      ao = train::train_ao(prepared, tc);
    }
    for (double cost : c.costs) {
      rep.pool.set_constant_cost(cost);
      const auto prepared = objectives::prepare_log(rep.log, rep.pool, c.propensity.source, est);
      std::optional<train::TrainedSystem> ts;
      if (need_ts) ts = train::train_ts(prepared, tc, *ao);
      const train::TrainedSystem* ts_ptr = ts ? &*ts : nullptr;
      for (SystemKind kind : c.systems) {
        train::TrainedSystem sys;
        switch (kind) {
          case SystemKind::kHuman: sys = train::human_system(rep.pool.size()); break;
          case SystemKind::kAO: sys = *ao; break;
          case SystemKind::kTS: sys = *ts; break;
          case SystemKind::kJC: sys = train::train_jc(prepared, tc, ts_ptr); break;
          case SystemKind::kJCP: sys = train::train_jcp(prepared, tc, ts_ptr); break;
        }
        ResultRow row;
        row.repetition = r;
        row.seed = s;
        row.dataset = dataset;
        row.capacity = cap.label;
        row.cost = cost;
        row.lambda = sys.lambda;
        row.epochs = sys.history.size();
        row.from_two_stage = sys.from_two_stage;
        row.result = eval::evaluate(sys, rep.pool, oracle, deploy_seed);
        on_system(row, sys);
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

inline std::vector<ResultRow> run_repetition(const ExperimentConfig& c, std::size_t r,
                                             const data::MultiLabelDataset* file_data = nullptr) {
  return run_repetition(c, r, file_data, [](const ResultRow&, const train::TrainedSystem&) {});
}

/// Runs every repetition (in parallel when threads > 1) and returns rows
/// sorted by repetition.
inline std::vector<ResultRow> run_experiment(const ExperimentConfig& c) {
  std::optional<data::MultiLabelDataset> file_data;
  if (c.dataset.source == DatasetSource::kFile) file_data = load_dataset_file(c.dataset);
  const data::MultiLabelDataset* fd = file_data ? &*file_data : nullptr;

  std::vector<std::vector<ResultRow>> per_rep(c.repetitions);
  auto job = [&](std::size_t r) {
    if (!c.save_systems) return run_repetition(c, r, fd);
    const auto dir = std::filesystem::path(c.output_dir) / "systems";
    std::filesystem::create_directories(dir);
    return run_repetition(c, r, fd, [&](const ResultRow& row, const train::TrainedSystem& sys) {
      std::ofstream out(dir / system_file_name(r, row.capacity, row.cost, sys.kind));
      sys.write(out);
    });
  };
  if (c.threads <= 1) {
    for (std::size_t r = 0; r < c.repetitions; ++r) per_rep[r] = job(r);
  } else {
    std::size_t next = 0;
    while (next < c.repetitions) {
      std::vector<std::future<std::vector<ResultRow>>> batch;
      const std::size_t first = next;
      for (; next < c.repetitions && next - first < c.threads; ++next) {
        batch.push_back(std::async(std::launch::async, job, next));
      }
      for (std::size_t k = 0; k < batch.size(); ++k) per_rep[first + k] = batch[k].get();
    }
  }
  std::vector<ResultRow> rows;
  for (auto& v : per_rep) {
    for (auto& row : v) rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Tables

namespace detail {

inline std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace detail

inline std::string results_csv(const std::vector<ResultRow>& rows) {
  std::size_t K = 0;
  for (const auto& r : rows) K = std::max(K, r.result.routed.size() - 1);
  std::ostringstream os;
  os << "system,dataset,capacity,cost,repetition,seed,lambda,epochs,start,total,raw,cost_paid,human_reward,"
        "algorithm_reward,human_fraction";
  for (std::size_t j = 0; j < K; ++j) os << ",routed_expert_" << j;
  os << ",routed_algorithm\n";
  for (const auto& r : rows) {
    const auto& d = r.result;
    os << train::to_string(d.system) << ',' << r.dataset << ',' << r.capacity << ',' << detail::num(r.cost) << ','
       << r.repetition << ',' << r.seed << ',' << detail::num(r.lambda) << ',' << r.epochs << ','
       << (r.from_two_stage ? "two-stage" : "random") << ','
       << detail::num(d.total) << ',' << detail::num(d.raw) << ',' << detail::num(d.cost_paid) << ','
       << detail::num(d.human_reward) << ',' << detail::num(d.algorithm_reward) << ','
       << detail::num(d.human_fraction());
    for (std::size_t j = 0; j + 1 < d.routed.size(); ++j) os << ',' << d.routed[j];
    for (std::size_t j = d.routed.size() - 1; j < K; ++j) os << ',';
    os << ',' << d.routed.back() << '\n';
  }
  return os.str();
}

/// One summary cell: a system's repetitions at one (capacity, cost).
struct SummaryCell {
  std::string capacity;
  double cost = 0.0;
  SystemKind system = SystemKind::kHuman;
  std::vector<double> total, raw, human_fraction;
};

/// Groups rows by (capacity, cost, system) in first-appearance order.
inline std::vector<SummaryCell> group_rows(const std::vector<ResultRow>& rows) {
  std::vector<SummaryCell> cells;
  for (const auto& r : rows) {
    auto it = std::find_if(cells.begin(), cells.end(), [&](const SummaryCell& c) {
      return c.capacity == r.capacity && c.cost == r.cost && c.system == r.result.system;
    });
    if (it == cells.end()) {
      cells.push_back(SummaryCell{r.capacity, r.cost, r.result.system, {}, {}, {}});
      it = cells.end() - 1;
    }
    it->total.push_back(r.result.total);
    it->raw.push_back(r.result.raw);
    it->human_fraction.push_back(r.result.human_fraction());
  }
  return cells;
}

namespace detail {

inline std::pair<double, std::optional<double>> mean_se(const std::vector<double>& v) {
  if (v.size() < 2) return {v.empty() ? 0.0 : v.front(), std::nullopt};
  const auto s = eval::summarize(v);
  return {s.mean, s.stderr_};
}

inline std::string cell_text(const std::vector<double>& v) {
  const auto [m, se] = mean_se(v);
  return se ? eval::format_mean_se(m, *se) : fixed(m, 1);
}

}  // namespace detail

inline std::string summary_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << "capacity,cost,system,repetitions,mean_total,stderr_total,mean_raw,stderr_raw,mean_human_fraction\n";
  for (const auto& c : group_rows(rows)) {
    const auto [mt, st] = detail::mean_se(c.total);
    const auto [mr, sr] = detail::mean_se(c.raw);
    const auto [mh, sh] = detail::mean_se(c.human_fraction);
    (void)sh;
    os << c.capacity << ',' << detail::num(c.cost) << ',' << train::to_string(c.system) << ',' << c.total.size()
       << ',' << detail::fixed(mt, 4) << ',' << (st ? detail::fixed(*st, 4) : "") << ',' << detail::fixed(mr, 4)
       << ',' << (sr ? detail::fixed(*sr, 4) : "") << ',' << detail::fixed(mh, 4) << '\n';
  }
  return os.str();
}

/// Plain-text tables, one per capacity: a row per cost, a column per
/// system, cells "mean±stderr" of the cost-adjusted total.
inline std::string summary_text(const std::vector<ResultRow>& rows) {
  const auto cells = group_rows(rows);
  std::vector<std::string> capacities;
  std::vector<double> costs;
  std::vector<SystemKind> systems;
  for (const auto& c : cells) {
    if (std::find(capacities.begin(), capacities.end(), c.capacity) == capacities.end()) capacities.push_back(c.capacity);
    if (std::find(costs.begin(), costs.end(), c.cost) == costs.end()) costs.push_back(c.cost);
    if (std::find(systems.begin(), systems.end(), c.system) == systems.end()) systems.push_back(c.system);
  }
  std::ostringstream os;
  for (const auto& cap : capacities) {
    os << "capacity " << cap << " (total reward, mean±stderr)\n";
    std::vector<std::vector<std::string>> table;
    std::vector<std::string> header{"cost"};
    for (auto s : systems) header.push_back(train::to_string(s));
    table.push_back(header);
    for (double cost : costs) {
      std::vector<std::string> line{detail::num(cost)};
      for (auto s : systems) {
        auto it = std::find_if(cells.begin(), cells.end(), [&](const SummaryCell& c) {
          return c.capacity == cap && c.cost == cost && c.system == s;
        });
        line.push_back(it == cells.end() ? "-" : detail::cell_text(it->total));
      }
      table.push_back(line);
    }
    // Column widths in code points; "±" is two bytes but one column.
    auto width = [](const std::string& s) {
      std::size_t w = 0;
      for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
      return w;
    };
    std::vector<std::size_t> widths(header.size(), 0);
    for (const auto& line : table) {
      for (std::size_t k = 0; k < line.size(); ++k) widths[k] = std::max(widths[k], width(line[k]));
    }
    for (const auto& line : table) {
      for (std::size_t k = 0; k < line.size(); ++k) {
        if (k > 0) os << "  ";
        os << std::string(widths[k] - width(line[k]), ' ') << line[k];
      }
      os << '\n';
    }
    os << '\n';
  }
  return os.str();
}

/// Writes results.csv, summary.csv, summary.txt and resolved_config.json.
inline void emit_tables(const ExperimentConfig& c, const std::vector<ResultRow>& rows) {
  if (rows.empty()) throw UsageError("no result rows to emit");
  const std::filesystem::path dir(c.output_dir);
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << text;
  };
  write("results.csv", results_csv(rows));
  write("summary.csv", summary_csv(rows));
  write("summary.txt", summary_text(rows));
  write("resolved_config.json", config_to_json(c).dump(2) + "\n");
}

/// HAIBLBF_OUTPUT_DIR, when set and non-empty, replaces the configured
/// output directory.
inline void apply_environment(ExperimentConfig& c) {
  if (const char* env = std::getenv("HAIBLBF_OUTPUT_DIR"); env != nullptr && *env != '\0') c.output_dir = env;
}

}  // namespace haiblbf::harness
