// haiblbf: command-line front end.
//
//   haiblbf run <config.json> [--set key.path=value ...] [--output-dir DIR]
//   haiblbf gen-data --kind synthetic|compliance-2d --out FILE [...]
//   haiblbf eval <system.txt> --data FILE --rho 0.6,0.7,0.8 [--cost C] [--seed S]
//   haiblbf grid-lambda <config.json> [--set ...] [--repetition R]

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "haiblbf/harness.hpp"

namespace {

using namespace haiblbf;
using harness::json;

harness::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = harness::load_json_file(path);
  for (const auto& o : overrides) harness::apply_override(j, o);
  auto c = harness::config_from_json(j);
  harness::apply_environment(c);
  return c;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& out_dir,
            bool quiet) {
  auto c = load_config(config_path, overrides);
  if (!out_dir.empty()) c.output_dir = out_dir;
  const auto rows = harness::run_experiment(c);
  harness::emit_tables(c, rows);
  if (!quiet) std::cout << harness::summary_text(rows);
  std::cerr << "wrote " << rows.size() << " rows to " << c.output_dir << "\n";
  return 0;
}

int cmd_gen_data(const std::string& kind, const std::string& out, data::SyntheticSpec spec) {
  data::MultiLabelDataset ds;
  if (kind == "synthetic") {
    ds = data::make_synthetic_multilabel(spec);
  } else if (kind == "compliance-2d") {
    ds = data::make_compliance_2d(spec.n, spec.seed).dataset;
  } else {
    throw UsageError("unknown dataset kind '" + kind + "'");
  }
  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot write " + out);
  data::write_libsvm_multilabel(os, ds, true);
  std::cerr << "wrote " << ds.size() << " instances to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& system_path, const std::string& data_path, const std::vector<double>& rho,
             double cost, std::uint64_t seed) {
  std::ifstream sys_in(system_path);
  if (!sys_in) throw std::runtime_error("cannot open " + system_path);
  const auto sys = train::TrainedSystem::read(sys_in);
  std::ifstream data_in(data_path);
  if (!data_in) throw std::runtime_error("cannot open " + data_path);
  const auto ds = data::parse_libsvm_multilabel(data_in);
  std::vector<sim::Expert> experts;
  for (double r : rho) experts.push_back(sim::Expert::uniform_noise(r, cost));
  if (experts.size() != sys.num_experts) {
    throw UsageError("system was trained with " + std::to_string(sys.num_experts) + " experts, --rho lists " +
                     std::to_string(experts.size()));
  }
  const sim::ExpertPool pool(std::move(experts));
  const sim::RewardOracle oracle(ds);
  const auto res = eval::evaluate(sys, pool, oracle, seed);
  std::cout << "system " << train::to_string(res.system) << "\n"
            << "instances " << res.instances() << "\n"
            << "total " << res.total << "\nraw " << res.raw << "\ncost_paid " << res.cost_paid << "\n"
            << "human_fraction " << res.human_fraction() << "\n";
  return 0;
}

int cmd_grid_lambda(const std::string& config_path, const std::vector<std::string>& overrides, std::size_t r) {
  auto c = load_config(config_path, overrides);
  const auto file_data = c.dataset.source == harness::DatasetSource::kFile
                             ? std::optional<data::MultiLabelDataset>(harness::load_dataset_file(c.dataset))
                             : std::nullopt;
  auto rep = harness::prepare_repetition(c, r, file_data ? &*file_data : nullptr);
  rep.pool.set_constant_cost(c.costs.front());
  const auto prepared = objectives::prepare_log(rep.log, rep.pool, c.propensity.source,
                                                rep.estimates ? &*rep.estimates : nullptr);
  const sim::RewardOracle oracle(*rep.test);
  auto cfg = c.train;
  cfg.seed = derive_seed(rep.seed, "train");
  std::printf("%-8s %-14s %-12s %-8s\n", "lambda", "ips_estimate", "test_value", "epochs");
  for (double lambda : c.train.lambda_grid) {
    cfg.lambda_grid = {lambda};
    const auto ao = train::train_ao(prepared, cfg);
    auto ocfg = cfg.objective;
    ocfg.baseline = 0.0;
    const double estimate = objectives::ips_objective(*ao.policy, prepared, ocfg, {}, objectives::Trainable::kNone).value;
    const double test_value = eval::exact_policy_value(*ao.policy, *rep.test, true);
    std::printf("%-8.2f %-14.6f %-12.6f %-8zu\n", lambda, estimate, test_value, ao.history.size());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Human-machine collaborative decision making from logged bandit feedback"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
  run->add_option("config", config_path, "config file")->required()->check(CLI::ExistingFile);
  run->add_option("--set", overrides, "override a config key, e.g. train.epochs=50");
  run->add_option("--output-dir", out_dir, "output directory (overrides config and environment)");
  run->add_flag("--quiet", quiet, "do not print the summary table");

  std::string kind = "synthetic", out;
  data::SyntheticSpec spec;
  spec.label_noise = 0.3;
  spec.seed = 1;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset in LIBSVM multilabel format");
  gen->add_option("--kind", kind, "synthetic or compliance-2d")->capture_default_str();
  gen->add_option("--out", out, "output file")->required();
  gen->add_option("--n", spec.n, "instances")->capture_default_str();
  gen->add_option("--d", spec.d, "features (synthetic)")->capture_default_str();
  gen->add_option("--l", spec.l, "labels (synthetic)")->capture_default_str();
  gen->add_option("--label-noise", spec.label_noise, "chance of an extra label")->capture_default_str();
  gen->add_option("--center-scale", spec.center_scale, "spread of cluster centers")->capture_default_str();
  gen->add_option("--spread", spec.cluster_spread, "within-cluster spread")->capture_default_str();
  gen->add_option("--ambiguous-fraction", spec.ambiguous_fraction, "share of unpredictable instances")
      ->capture_default_str();
  gen->add_option("--seed", spec.seed, "seed")->capture_default_str();

  std::string system_path, data_path;
  std::vector<double> rho;
  double cost = 0.0;
  std::uint64_t eval_seed = 1;
  auto* ev = app.add_subcommand("eval", "deploy a saved system on a labeled dataset with noise experts");
  ev->add_option("system", system_path, "saved system file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_path, "LIBSVM multilabel test set")->required()->check(CLI::ExistingFile);
  ev->add_option("--rho", rho, "expert accuracies")->required()->delimiter(',');
  ev->add_option("--cost", cost, "cost per expert query")->capture_default_str();
  ev->add_option("--seed", eval_seed, "deployment seed")->capture_default_str();

  std::string grid_config;
  std::vector<std::string> grid_overrides;
  std::size_t repetition = 0;
  auto* grid = app.add_subcommand("grid-lambda", "train AO once per baseline value and report each");
  grid->add_option("config", grid_config, "config file")->required()->check(CLI::ExistingFile);
  grid->add_option("--set", grid_overrides, "override a config key");
  grid->add_option("--repetition", repetition, "repetition index")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config_path, overrides, out_dir, quiet);
    if (*gen) return cmd_gen_data(kind, out, spec);
    if (*ev) return cmd_eval(system_path, data_path, rho, cost, eval_seed);
    if (*grid) return cmd_grid_lambda(grid_config, grid_overrides, repetition);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
