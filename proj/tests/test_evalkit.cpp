#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "haiblbf/evalkit.hpp"

namespace data = haiblbf::data;
namespace sim = haiblbf::sim;
namespace train = haiblbf::train;
namespace eval = haiblbf::eval;
namespace nn = haiblbf::nn;

namespace {

data::MultiLabelDataset test_set(std::size_t n, std::uint64_t seed) {
  data::SyntheticSpec spec;
  spec.n = n;
  spec.d = 4;
  spec.l = 5;
  spec.label_noise = 0.3;
  spec.seed = seed;
  return data::make_synthetic_multilabel(spec);
}

sim::ExpertPool table_pool(double cost = 0.3) {
  return sim::ExpertPool({sim::Expert::uniform_noise(0.6, cost), sim::Expert::uniform_noise(0.7, cost),
                          sim::Expert::uniform_noise(0.8, cost)});
}

nn::DenseNet random_net(std::size_t out, nn::Head head, std::uint64_t seed) {
  nn::DenseNet net(4, {6}, nn::Activation::kRelu, out, head);
  auto rng = haiblbf::make_rng(seed);
  net.init_glorot(rng);
  for (std::size_t o = 0; o < out; ++o) net.bias(1, o) = haiblbf::uniform(rng, -0.3, 0.3);
  return net;
}

train::TrainedSystem system_of(train::SystemKind kind, std::uint64_t seed, std::size_t K = 3) {
  train::TrainedSystem s;
  s.kind = kind;
  s.num_experts = K;
  if (kind == train::SystemKind::kHuman) return s;
  s.policy = random_net(5, nn::Head::kSoftmax, seed);
  if (kind == train::SystemKind::kTS || kind == train::SystemKind::kJC) {
    s.router = random_net(1, nn::Head::kSigmoid, seed + 100);
  } else if (kind == train::SystemKind::kJCP) {
    s.router = random_net(K + 1, nn::Head::kSoftmax, seed + 100);
  }
  return s;
}

void scale_output_layer(nn::DenseNet& net, double c) {
  const std::size_t last = net.layers().size() - 1;
  for (std::size_t o = 0; o < net.layers()[last].out; ++o) {
    net.bias(last, o) *= c;
    for (std::size_t i = 0; i < net.layers()[last].in; ++i) net.weight(last, o, i) *= c;
  }
}

}  // namespace

TEST(Evaluate, HumanSystemEarnsMeanAccuracyMinusCost) {
  const auto ds = test_set(1000, 1);
  const sim::RewardOracle oracle(ds);
  const auto res = eval::evaluate(train::human_system(3), table_pool(), oracle, 17);
  // Each decision is Bernoulli(0.7) whatever the label set; 3 sd of the sum is about 43.
  EXPECT_NEAR(res.total, 1000.0 * (0.7 - 0.3), 45.0);
  EXPECT_NEAR(res.cost_paid, 300.0, 1e-9);
  EXPECT_EQ(res.human_routed(), 1000u);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(static_cast<double>(res.routed[j]), 1000.0 / 3.0, 50.0);
}

TEST(Evaluate, AlgorithmOnlyMatchesTheDeterministicPolicyValue) {
  const auto ds = test_set(500, 2);
  const sim::RewardOracle oracle(ds);
  const auto ao = system_of(train::SystemKind::kAO, 3);
  const auto res = eval::evaluate(ao, table_pool(), oracle, 1);
  EXPECT_EQ(res.cost_paid, 0.0);
  EXPECT_EQ(res.routed.back(), 500u);
  EXPECT_DOUBLE_EQ(res.total, 500.0 * eval::exact_policy_value(*ao.policy, ds, true));
  EXPECT_EQ(res.raw, res.algorithm_reward);
}

TEST(Evaluate, RouterThatNeverDefersEqualsAlgorithmOnly) {
  const auto ds = test_set(400, 3);
  const sim::RewardOracle oracle(ds);
  auto jc = system_of(train::SystemKind::kJC, 4);
  nn::DenseNet never(4, {}, nn::Activation::kIdentity, 1, nn::Head::kSigmoid);
  never.bias(0, 0) = -50.0;
  jc.router = never;
  auto ao = jc;
  ao.kind = train::SystemKind::kAO;
  ao.router.reset();
  EXPECT_EQ(eval::evaluate(jc, table_pool(), oracle, 5).total, eval::evaluate(ao, table_pool(), oracle, 5).total);
}

TEST(Evaluate, TiesGoToTheAlgorithmAndTheLowestAction) {
  const auto ds = test_set(50, 4);
  const sim::RewardOracle oracle(ds);
  train::TrainedSystem jc;
  jc.kind = train::SystemKind::kJC;
  jc.num_experts = 3;
  jc.policy = nn::DenseNet(4, {}, nn::Activation::kIdentity, 5, nn::Head::kSoftmax);  // uniform
  jc.router = nn::DenseNet(4, {}, nn::Activation::kIdentity, 1, nn::Head::kSigmoid);   // exactly 0.5
  const auto res = eval::evaluate(jc, table_pool(), oracle, 1);
  EXPECT_EQ(res.human_routed(), 0u);
  double expected = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) expected += ds.has_label(i, 0) ? 1.0 : 0.0;
  EXPECT_EQ(res.total, expected);

  auto jcp = jc;
  jcp.kind = train::SystemKind::kJCP;
  jcp.router = nn::DenseNet(4, {}, nn::Activation::kIdentity, 4, nn::Head::kSoftmax);  // all four tied
  EXPECT_EQ(eval::evaluate(jcp, table_pool(), oracle, 1).human_routed(), 0u);
  jcp.router->bias(0, 2) = 1.0;  // expert 2 strictly best
  const auto r2 = eval::evaluate(jcp, table_pool(), oracle, 1);
  EXPECT_EQ(r2.routed[2], ds.size());
}

TEST(Evaluate, AccountingIdentitiesHold) {
  const auto ds = test_set(300, 5);
  const sim::RewardOracle oracle(ds);
  for (auto kind : {train::SystemKind::kHuman, train::SystemKind::kAO, train::SystemKind::kTS,
                    train::SystemKind::kJC, train::SystemKind::kJCP}) {
    const auto res = eval::evaluate(system_of(kind, 6), table_pool(), oracle, 2);
    EXPECT_EQ(res.instances(), ds.size());
    EXPECT_DOUBLE_EQ(res.total, res.raw - res.cost_paid);
    EXPECT_DOUBLE_EQ(res.raw, res.human_reward + res.algorithm_reward);
    EXPECT_EQ(res.seed, 2u);
  }
}

TEST(Evaluate, RaisingTheCostByDeltaCostsDeltaPerHumanCase) {
  const auto ds = test_set(400, 6);
  const sim::RewardOracle oracle(ds);
  for (auto kind : {train::SystemKind::kHuman, train::SystemKind::kTS, train::SystemKind::kJCP}) {
    const auto sys = system_of(kind, 7);
    const auto base = eval::evaluate(sys, table_pool(0.3), oracle, 9);
    for (double delta : {0.05, 0.2}) {
      const auto more = eval::evaluate(sys, table_pool(0.3 + delta), oracle, 9);
      EXPECT_EQ(more.routed, base.routed);
      EXPECT_EQ(more.raw, base.raw);
      EXPECT_NEAR(base.total - more.total, delta * static_cast<double>(base.human_routed()), 1e-9);
    }
  }
}

TEST(Evaluate, ArgmaxDecisionsIgnorePositiveRescalingOfLogits) {
  const auto ds = test_set(300, 7);
  const sim::RewardOracle oracle(ds);
  for (auto kind : {train::SystemKind::kAO, train::SystemKind::kJC, train::SystemKind::kJCP}) {
    const auto sys = system_of(kind, 8);
    const auto base = eval::evaluate(sys, table_pool(), oracle, 3);
    for (double c : {0.25, 4.0}) {
      auto scaled = sys;
      scale_output_layer(*scaled.policy, c);
      if (scaled.router) scale_output_layer(*scaled.router, c);
      const auto res = eval::evaluate(scaled, table_pool(), oracle, 3);
      EXPECT_EQ(res.routed, base.routed);
      EXPECT_EQ(res.total, base.total);
    }
  }
}

TEST(Evaluate, SubsetAndErrors) {
  const auto ds = test_set(20, 8);
  const sim::RewardOracle oracle(ds);
  const auto ao = system_of(train::SystemKind::kAO, 1);
  const std::vector<std::size_t> some = {0, 3, 5};
  EXPECT_EQ(eval::evaluate(ao, some, table_pool(), oracle, 1).instances(), 3u);
  const std::vector<std::size_t> outside = {0, 20};
  EXPECT_THROW(eval::evaluate(ao, outside, table_pool(), oracle, 1), haiblbf::DataError);

  auto broken = ao;
  broken.policy.reset();
  EXPECT_THROW(eval::evaluate(broken, table_pool(), oracle, 1), haiblbf::UsageError);
  auto no_router = system_of(train::SystemKind::kTS, 1);
  no_router.router.reset();
  EXPECT_THROW(eval::evaluate(no_router, table_pool(), oracle, 1), haiblbf::UsageError);
  const auto jcp_for_two = system_of(train::SystemKind::kJCP, 1, 2);
  EXPECT_THROW(eval::evaluate(jcp_for_two, table_pool(), oracle, 1), haiblbf::ShapeError);
}

TEST(ExactPolicyValue, UniformPolicyOverFourActionsWithOneLabel) {
  data::MultiLabelDataset ds(2, 4);
  for (std::size_t i = 0; i < 8; ++i) ds.add(std::vector<double>{1.0 * i, -1.0}, {i % 4});
  const nn::DenseNet uniform(2, {}, nn::Activation::kIdentity, 4, nn::Head::kSoftmax);
  EXPECT_DOUBLE_EQ(eval::exact_policy_value(uniform, ds), 0.25);
  EXPECT_THROW(eval::exact_policy_value(uniform, data::MultiLabelDataset(2, 4)), haiblbf::EmptyDatasetError);
}

TEST(Summarize, MeanAndStandardError) {
  const std::vector<double> v = {1.0, 2.0, 3.0};
  const auto s = eval::summarize(v);
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_NEAR(s.stderr_, 1.0 / std::sqrt(3.0), 1e-15);
  EXPECT_EQ(s.count, 3u);
  const std::vector<double> same(10, 4.2);
  EXPECT_EQ(eval::summarize(same).stderr_, 0.0);
  EXPECT_EQ(eval::summarize(same).mean, 4.2);
  EXPECT_THROW(eval::summarize(std::vector<double>{1.0}), haiblbf::UsageError);
}

TEST(Summarize, FormatsOneDecimal) {
  EXPECT_EQ(eval::format_mean_se(423.3, 5.2), "423.3±5.2");
  EXPECT_EQ(eval::format_mean_se(391.94, 8.36), "391.9±8.4");
  EXPECT_EQ(eval::format_mean_se(0.0, 0.0), "0.0±0.0");
}
