#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "haiblbf/datakit.hpp"
#include "haiblbf/random.hpp"
#include "haiblbf/simkit.hpp"

namespace data = haiblbf::data;
namespace sim = haiblbf::sim;
using haiblbf::derive_seed;
using haiblbf::make_rng;

namespace {

std::shared_ptr<const data::MultiLabelDataset> synthetic(std::size_t n, std::uint64_t seed, double noise = 0.3) {
  data::SyntheticSpec spec;
  spec.n = n;
  spec.d = 6;
  spec.l = 5;
  spec.label_noise = noise;
  spec.seed = seed;
  return std::make_shared<const data::MultiLabelDataset>(data::make_synthetic_multilabel(spec));
}

sim::ExpertPool noise_pool(std::vector<double> rhos, double cost = 0.3) {
  std::vector<sim::Expert> ex;
  for (double r : rhos) ex.push_back(sim::Expert::uniform_noise(r, cost));
  return sim::ExpertPool(std::move(ex));
}

bool contains(const std::vector<std::size_t>& v, std::size_t a) {
  return std::find(v.begin(), v.end(), a) != v.end();
}

}  // namespace

// ---------------------------------------------------------------------------
// Noise behavior

TEST(NoiseExpert, PerfectExpertAlwaysPicksALabel) {
  auto rng = make_rng(1);
  const std::vector<std::size_t> y = {1, 3};
  for (int t = 0; t < 2000; ++t) EXPECT_TRUE(contains(y, sim::noise_expert_decide(1.0, y, 5, rng)));
}

TEST(NoiseExpert, ZeroAccuracyNeverPicksALabel) {
  auto rng = make_rng(2);
  const std::vector<std::size_t> y = {0, 4};
  for (int t = 0; t < 2000; ++t) EXPECT_FALSE(contains(y, sim::noise_expert_decide(0.0, y, 5, rng)));
}

TEST(NoiseExpert, EmptyAndFullLabelSets) {
  auto rng = make_rng(3);
  for (int t = 0; t < 500; ++t) {
    EXPECT_LT(sim::noise_expert_decide(0.9, {}, 4, rng), 4u);
    EXPECT_TRUE(contains({0, 1, 2}, sim::noise_expert_decide(0.1, {0, 1, 2}, 3, rng)));
  }
}

TEST(NoiseExpert, AccuracyMatchesRhoForEachPoolMember) {
  const auto ds = synthetic(10000, 11);
  const sim::RewardOracle oracle(*ds);
  for (double rho : {0.6, 0.7, 0.8}) {
    const auto e = sim::Expert::uniform_noise(rho);
    auto rng = make_rng(derive_seed(5, "acc", static_cast<std::uint64_t>(rho * 10)));
    double hits = 0.0;
    for (std::size_t i = 0; i < ds->size(); ++i) hits += oracle(i, e.decide(ds->features(i), ds->labels(i), 5, rng));
    const double m = static_cast<double>(ds->size());
    const double acc = hits / m;
    EXPECT_NEAR(acc, rho, 0.02);
    EXPECT_NEAR(acc, rho, 3.0 * std::sqrt(rho * (1.0 - rho) / m));
  }
}

TEST(NoiseExpert, ClosedFormDistributionMatchesSampling) {
  const std::vector<std::size_t> y = {2};
  std::vector<double> dist;
  sim::noise_expert_distribution(0.7, y, 4, dist);
  EXPECT_NEAR(std::accumulate(dist.begin(), dist.end(), 0.0), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(dist[2], 0.7);
  EXPECT_DOUBLE_EQ(dist[0], 0.1);

  auto rng = make_rng(9);
  std::vector<double> freq(4, 0.0);
  const int draws = 40000;
  for (int t = 0; t < draws; ++t) freq[sim::noise_expert_decide(0.7, y, 4, rng)] += 1.0 / draws;
  for (std::size_t a = 0; a < 4; ++a) EXPECT_NEAR(freq[a], dist[a], 0.01) << "action " << a;
}

TEST(Expert, RejectsInvalidParameters) {
  EXPECT_THROW(sim::Expert::uniform_noise(1.1), std::invalid_argument);
  EXPECT_THROW(sim::Expert::uniform_noise(-0.1), std::invalid_argument);
  EXPECT_THROW(sim::Expert::uniform_noise(0.5, -1.0), std::invalid_argument);
  EXPECT_THROW(sim::ExpertPool(std::vector<sim::Expert>{}), std::invalid_argument);
}

TEST(Expert, CostFunctionIsCheckedAtUse) {
  auto e = sim::Expert::uniform_noise(0.5, 0.3);
  const std::vector<double> x = {1.0, -2.0};
  EXPECT_DOUBLE_EQ(e.cost(x), 0.3);
  e.set_cost_function([](std::span<const double> v) { return std::abs(v[0]) * 0.1; });
  EXPECT_DOUBLE_EQ(e.cost(x), 0.1);
  e.set_cost_function([](std::span<const double> v) { return v[1]; });
  EXPECT_THROW(e.cost(x), haiblbf::NumericError);
}

TEST(Expert, RuleExpertTremblesUniformly) {
  const auto e = sim::Expert::rule([](std::span<const double> x) { return x[0] > 0 ? std::size_t{1} : 0; }, 0.2, 0.1);
  const std::vector<double> x = {1.0};
  std::vector<double> dist;
  e.action_distribution(x, {}, 2, dist);
  EXPECT_DOUBLE_EQ(dist[0], 0.05);
  EXPECT_DOUBLE_EQ(dist[1], 0.95);
  auto rng = make_rng(4);
  double ones = 0.0;
  for (int t = 0; t < 20000; ++t) ones += static_cast<double>(e.decide(x, {}, 2, rng));
  EXPECT_NEAR(ones / 20000.0, 0.95, 0.01);
}

TEST(ExpertPool, AssignmentIsNormalized) {
  auto pool = noise_pool({0.6, 0.7, 0.8});
  for (double w : pool.assignment()) EXPECT_DOUBLE_EQ(w, 1.0 / 3.0);
  pool.set_assignment({1.0, 1.0, 2.0});
  EXPECT_DOUBLE_EQ(pool.assignment()[2], 0.5);
  EXPECT_THROW(pool.set_assignment({1.0, 1.0}), haiblbf::ShapeError);
  EXPECT_THROW(pool.set_assignment({0.0, 0.0, 0.0}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Proxy behavior model

TEST(ProxyExpert, HighCapacityFitIsAccurateOnItsTrainingData) {
  data::SyntheticSpec spec;
  spec.n = 600;
  spec.d = 4;
  spec.l = 3;
  spec.label_noise = 0.0;
  spec.center_scale = 4.0;
  spec.cluster_spread = 0.3;
  spec.seed = 21;
  const auto ds = data::make_synthetic_multilabel(spec);
  sim::ProxyOptions opts;
  opts.subset_fraction = 1.0;
  opts.hidden = {32};
  opts.epochs = 300;
  const auto e = sim::fit_proxy_hbm(ds, 3, opts);
  const sim::RewardOracle oracle(ds);
  auto rng = make_rng(8);
  double hits = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) hits += oracle(i, e.decide(ds.features(i), ds.labels(i), 3, rng));
  EXPECT_GT(hits / static_cast<double>(ds.size()), 0.95);
}

TEST(ProxyExpert, DifferentSeedsGiveDifferentExperts) {
  const auto ds = synthetic(500, 31, 0.5);
  sim::ProxyOptions opts;
  opts.epochs = 40;
  const auto a = sim::fit_proxy_hbm(*ds, 1, opts);
  const auto b = sim::fit_proxy_hbm(*ds, 2, opts);
  std::size_t disagreements = 0;
  for (std::size_t i = 0; i < ds->size(); ++i) {
    auto ra = make_rng(derive_seed(77, "d", i));
    auto rb = make_rng(derive_seed(77, "d", i));
    if (a.decide(ds->features(i), ds->labels(i), 5, ra) != b.decide(ds->features(i), ds->labels(i), 5, rb)) {
      ++disagreements;
    }
  }
  EXPECT_GE(disagreements, 1u);
}

TEST(ProxyExpert, TinySubsetIsATrainingError) {
  const auto ds = synthetic(20, 1);
  sim::ProxyOptions opts;
  opts.subset_fraction = 0.3;  // 6 instances
  EXPECT_THROW(sim::fit_proxy_hbm(*ds, 1, opts), haiblbf::TrainingError);
}

// ---------------------------------------------------------------------------
// Logs

TEST(GenerateLog, PerfectSingleExpertEarnsEveryReward) {
  const auto ds = synthetic(300, 4);
  const auto log = sim::generate_log(ds, noise_pool({1.0}), 1);
  ASSERT_EQ(log.size(), ds->size());
  for (const auto& r : log.records()) EXPECT_EQ(r.reward, 1.0);
}

TEST(GenerateLog, UniformAssignmentAndMeanReward) {
  const auto ds = synthetic(9000, 5);
  const auto log = sim::generate_log(ds, noise_pool({0.6, 0.7, 0.8}), 2);
  std::vector<double> counts(3, 0.0);
  for (const auto& r : log.records()) counts[r.expert] += 1.0;
  const double n = static_cast<double>(log.size());
  for (double c : counts) EXPECT_NEAR(c, n / 3.0, 3.0 * std::sqrt(n));
  EXPECT_NEAR(log.mean_reward(), 0.70, 0.02);
}

TEST(GenerateLog, StoredPropensitiesAreTheClosedForm) {
  const auto ds = synthetic(200, 6);
  const auto pool = noise_pool({0.6, 0.9});
  const auto log = sim::generate_log(ds, pool, 3);
  std::vector<double> d0, d1;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& r = log[i];
    sim::noise_expert_distribution(pool[0].rho(), ds->labels(r.instance), 5, d0);
    sim::noise_expert_distribution(pool[1].rho(), ds->labels(r.instance), 5, d1);
    EXPECT_DOUBLE_EQ(*r.propensity, (r.expert == 0 ? d0 : d1)[r.action]);
    EXPECT_NEAR(*r.marginal_propensity, 0.5 * d0[r.action] + 0.5 * d1[r.action], 1e-15);
    EXPECT_EQ(r.reward, ds->has_label(r.instance, r.action) ? 1.0 : 0.0);
  }
}

TEST(GenerateLog, SkipsUnlabeledInstances) {
  auto ds = std::make_shared<data::MultiLabelDataset>(2, 3);
  ds->add(std::vector<double>{1, 0}, {0});
  ds->add(std::vector<double>{0, 1}, {});
  ds->add(std::vector<double>{1, 1}, {2});
  const auto log = sim::generate_log(ds, noise_pool({0.7}), 1);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log[0].instance, 0u);
  EXPECT_EQ(log[1].instance, 2u);
}

TEST(GenerateLog, IsBitReproducible) {
  const auto ds = synthetic(500, 7);
  const auto pool = noise_pool({0.6, 0.7, 0.8});
  std::ostringstream a, b, c;
  sim::write_log_csv(a, sim::generate_log(ds, pool, 42));
  sim::write_log_csv(b, sim::generate_log(ds, pool, 42));
  sim::write_log_csv(c, sim::generate_log(ds, pool, 43));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str(), c.str());
}

TEST(BanditLog, RejectsInvalidRecords) {
  const auto ds = synthetic(10, 8);
  sim::BanditLog log(ds, 2);
  EXPECT_THROW(log.add({.instance = 10}), haiblbf::DataError);
  EXPECT_THROW(log.add({.action = 5}), haiblbf::DataError);
  EXPECT_THROW(log.add({.expert = 2}), haiblbf::DataError);
  EXPECT_THROW(log.add({.reward = 1.5}), haiblbf::DataError);
  EXPECT_NO_THROW(log.add({.instance = 9, .expert = 1, .action = 4, .reward = 1.0}));
}

TEST(BanditLog, CsvRoundTrip) {
  const auto ds = synthetic(300, 9);
  const auto log = sim::generate_log(ds, noise_pool({0.6, 0.7, 0.8}), 5);
  std::ostringstream os;
  sim::write_log_csv(os, log);
  std::istringstream is(os.str());
  const auto back = sim::read_log_csv(is, ds, 3);
  ASSERT_EQ(back.size(), log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    EXPECT_EQ(back[i].instance, log[i].instance);
    EXPECT_EQ(back[i].expert, log[i].expert);
    EXPECT_EQ(back[i].action, log[i].action);
    EXPECT_EQ(back[i].reward, log[i].reward);
    EXPECT_EQ(back[i].propensity, log[i].propensity);
  }
}

TEST(BanditLog, CsvErrorsCarryLineNumbers) {
  const auto ds = synthetic(10, 10);
  std::istringstream is("instance_id,expert_id,action,reward,propensity\n0,0,1,1,\n0,7,1,1,0.5\n");
  try {
    sim::read_log_csv(is, ds, 2);
    FAIL() << "expected a parse error";
  } catch (const haiblbf::ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

// ---------------------------------------------------------------------------
// Deployment queries

TEST(DecideAtTest, PerfectExpertNetsOneMinusCost) {
  const auto ds = synthetic(100, 12);
  const sim::RewardOracle oracle(*ds);
  const auto pool = noise_pool({1.0, 0.5}, 0.3);
  auto rng = make_rng(1);
  for (std::size_t i = 0; i < ds->size(); ++i) {
    const auto d = sim::expert_decide_at_test(pool, 0, oracle, i, rng);
    EXPECT_EQ(d.reward, 1.0);
    EXPECT_DOUBLE_EQ(d.reward - d.cost, 0.7);
  }
  EXPECT_THROW(sim::expert_decide_at_test(pool, 2, oracle, 0, rng), haiblbf::DataError);
  EXPECT_THROW(sim::expert_decide_at_test(pool, 0, oracle, 100, rng), haiblbf::DataError);
}

TEST(DecideAtTest, ZeroCostIsSupported) {
  const auto ds = synthetic(10, 13);
  const sim::RewardOracle oracle(*ds);
  const auto pool = noise_pool({0.8}, 0.0);
  auto rng = make_rng(2);
  EXPECT_EQ(sim::expert_decide_at_test(pool, 0, oracle, 3, rng).cost, 0.0);
}

TEST(RewardOracle, IsOneExactlyOnLabels) {
  const auto ds = synthetic(200, 14);
  const sim::RewardOracle oracle(*ds);
  for (std::size_t i = 0; i < ds->size(); ++i) {
    for (std::size_t a = 0; a < 5; ++a) EXPECT_EQ(oracle(i, a), contains(ds->labels(i), a) ? 1.0 : 0.0);
  }
}
