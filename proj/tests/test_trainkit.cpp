#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "haiblbf/evalkit.hpp"
#include "haiblbf/trainkit.hpp"

namespace data = haiblbf::data;
namespace sim = haiblbf::sim;
namespace obj = haiblbf::objectives;
namespace train = haiblbf::train;
namespace nn = haiblbf::nn;

namespace {

/// Synthetic contexts, a pool, its log, and the prepared log, kept together.
struct Setup {
  std::shared_ptr<const data::MultiLabelDataset> ds;
  sim::ExpertPool pool;
  std::unique_ptr<sim::BanditLog> log;
  obj::PreparedLog prepared;
};

Setup make_setup(std::vector<sim::Expert> experts, std::size_t n = 600, std::uint64_t seed = 1,
                 double spread = 0.6) {
  data::SyntheticSpec spec;
  spec.n = n;
  spec.d = 4;
  spec.l = 3;
  spec.label_noise = 0.0;
  spec.center_scale = 2.0;
  spec.cluster_spread = spread;
  spec.seed = seed;
  Setup s;
  s.ds = std::make_shared<const data::MultiLabelDataset>(data::make_synthetic_multilabel(spec));
  s.pool = sim::ExpertPool(std::move(experts));
  s.log = std::make_unique<sim::BanditLog>(sim::generate_log(s.ds, s.pool, seed));
  s.prepared = obj::prepare_log(*s.log, s.pool, obj::PropensitySource::kLogged);
  return s;
}

sim::Expert uniform_random_expert(double cost = 0.0) {
  return sim::Expert::rule([](std::span<const double>) { return std::size_t{0}; }, cost, 1.0);
}

train::TrainConfig quick_config(std::size_t epochs = 60) {
  train::TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.learning_rate = 1e-2;
  c.seed = 7;
  c.lambda_grid = {0.0};
  return c;
}

double training_human_fraction(const train::TrainedSystem& s, const data::MultiLabelDataset& ds) {
  std::size_t human = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) human += haiblbf::eval::route(s, ds.features(i)).human ? 1 : 0;
  return static_cast<double>(human) / static_cast<double>(ds.size());
}

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  const train::TrainConfig c;
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.epochs, 2000u);
  EXPECT_FALSE(c.neutral_init);
  EXPECT_TRUE(c.two_stage_start);
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_EQ(c.lambda_grid, (std::vector<double>{0.0, 0.2, 0.4, 0.6, 0.8}));
  auto bad = c;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.lambda_grid.clear();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(TrainConfig, NeutralInitStartsUniformAndIndifferent) {
  auto s = make_setup({sim::Expert::uniform_noise(0.7), sim::Expert::uniform_noise(0.9)}, 200);
  auto c = quick_config();
  c.neutral_init = true;
  const auto policy = train::detail::make_policy(s.prepared, c);
  const auto router = train::detail::make_router(s.prepared, c, 1, nn::Head::kSigmoid);
  const auto personal = train::detail::make_router(s.prepared, c, 3, nn::Head::kSoftmax);
  for (std::size_t i = 0; i < s.ds->size(); i += 13) {
    for (double p : policy.forward(s.ds->features(i))) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(router.forward(s.ds->features(i))[0], 0.5);
    for (double p : personal.forward(s.ds->features(i))) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
  }
  // Hidden layers keep their random init, so training still breaks symmetry.
  c.policy.hidden = {4};
  const auto deep = train::detail::make_policy(s.prepared, c);
  double hidden_norm = 0.0;
  for (std::size_t o = 0; o < 4; ++o) hidden_norm += std::abs(deep.weight(0, o, 0));
  EXPECT_GT(hidden_norm, 0.0);
}

TEST(Convergence, StopsWhenTheMovingAverageFlattens) {
  std::vector<double> rising(40);
  std::iota(rising.begin(), rising.end(), 0.0);
  EXPECT_FALSE(train::detail::converged(rising, 20, 1e-4));
  const std::vector<double> flat(40, 1.0);
  EXPECT_TRUE(train::detail::converged(flat, 20, 1e-4));
  EXPECT_FALSE(train::detail::converged(std::vector<double>(39, 1.0), 20, 1e-4));
  EXPECT_FALSE(train::detail::converged(flat, 0, 1e-4));
}

TEST(Training, NonFiniteObjectiveAborts) {
  train::TrainConfig c = quick_config(5);
  EXPECT_THROW(train::detail::run(nullptr, nullptr, obj::Trainable::kNone, 10, c,
                                  [](std::span<const std::size_t>, obj::Trainable) {
                                    obj::ObjectiveResult r;
                                    r.value = std::nan("");
                                    return r;
                                  }),
               haiblbf::DivergenceError);
}

TEST(TrainAo, IsDeterministicGivenTheSeed) {
  const auto s = make_setup({sim::Expert::uniform_noise(0.6)});
  const auto c = quick_config(20);
  const auto a = train::train_ao(s.prepared, c);
  const auto b = train::train_ao(s.prepared, c);
  EXPECT_EQ(a.history, b.history);
  EXPECT_TRUE(*a.policy == *b.policy);
  auto c2 = c;
  c2.seed = 8;
  EXPECT_FALSE(*train::train_ao(s.prepared, c2).policy == *a.policy);
}

TEST(TrainAo, BeatsTheUniformLoggingPolicy) {
  const auto s = make_setup({uniform_random_expert()}, 900);
  const auto ao = train::train_ao(s.prepared, quick_config(80));
  const double logging_value = s.log->mean_reward();
  EXPECT_NEAR(logging_value, 1.0 / 3.0, 0.05);
  EXPECT_GT(haiblbf::eval::exact_policy_value(*ao.policy, *s.ds, true), logging_value + 0.3);
  EXPECT_EQ(ao.kind, train::SystemKind::kAO);
  EXPECT_FALSE(ao.router.has_value());
}

TEST(TrainAo, HistoryTrendsUpward) {
  const auto s = make_setup({sim::Expert::uniform_noise(0.6)}, 900);
  auto c = quick_config(120);
  c.learning_rate = 1e-3;
  c.convergence_window = 0;
  const auto ao = train::train_ao(s.prepared, c);
  const std::size_t w = 20;
  ASSERT_GE(ao.history.size(), 2 * w);
  std::vector<double> ma;
  for (std::size_t e = w; e <= ao.history.size(); ++e) {
    ma.push_back(std::accumulate(ao.history.begin() + static_cast<std::ptrdiff_t>(e - w),
                                 ao.history.begin() + static_cast<std::ptrdiff_t>(e), 0.0) /
                 static_cast<double>(w));
  }
  for (std::size_t k = 1; k < ma.size(); ++k) EXPECT_GE(ma[k], ma[k - 1] - 1e-3) << "window ending at " << k + w;
  EXPECT_GT(ma.back(), ma.front());
}

TEST(TrainTs, PhaseOnePolicyIsTheAoPolicy) {
  const auto s = make_setup({sim::Expert::uniform_noise(0.6), sim::Expert::uniform_noise(0.8)});
  const auto c = quick_config(15);
  const auto ao = train::train_ao(s.prepared, c);
  const auto ts = train::train_ts(s.prepared, c);
  EXPECT_TRUE(*ts.policy == *ao.policy);
  EXPECT_EQ(ts.kind, train::SystemKind::kTS);
  ASSERT_TRUE(ts.router.has_value());
  EXPECT_EQ(ts.router->output_dim(), 1u);
  EXPECT_THROW(train::train_ts(s.prepared, c, train::human_system(2)), haiblbf::UsageError);
}

TEST(TrainTs, FreeAndPerfectHumansTakeEverything) {
  const auto s = make_setup({sim::Expert::uniform_noise(1.0, 0.0)}, 600, 2, 1.5);
  const auto ts = train::train_ts(s.prepared, quick_config(60));
  EXPECT_GT(training_human_fraction(ts, *s.ds), 0.95);
}

TEST(TrainTs, ExpensiveHumansAndAStrongPolicyLeaveHumansOut) {
  const auto s = make_setup({uniform_random_expert(0.5)}, 900, 3, 0.4);
  auto c = quick_config(80);
  const auto ao = train::train_ao(s.prepared, c);
  ASSERT_GT(haiblbf::eval::exact_policy_value(*ao.policy, *s.ds, true), 0.9);
  // The deploy-time expert must be worth something for the test to mean anything.
  sim::ExpertPool pool({sim::Expert::uniform_noise(0.7, 0.5)});
  auto log = sim::generate_log(s.ds, pool, 4);
  const auto prepared = obj::prepare_log(log, pool, obj::PropensitySource::kLogged);
  const auto ts = train::train_ts(prepared, c);
  EXPECT_LT(training_human_fraction(ts, *s.ds), 0.05);
}

TEST(TrainJc, ClampedRouterReducesToAoBitwise) {
  const auto s = make_setup({sim::Expert::uniform_noise(0.6), sim::Expert::uniform_noise(0.8)});
  auto c = quick_config(25);
  c.lambda_grid = {0.0, 0.4};
  const auto ao = train::train_ao(s.prepared, c);
  const auto jc = train::train_jc(s.prepared, c, /*router_clamped=*/true);
  EXPECT_TRUE(*jc.policy == *ao.policy);
  EXPECT_EQ(jc.history, ao.history);
  EXPECT_EQ(jc.lambda, ao.lambda);
  EXPECT_FALSE(jc.router.has_value());
}

TEST(TrainJc, IsDeterministicAndTrainsBothNetworks) {
  const auto s = make_setup({sim::Expert::uniform_noise(0.7)});
  const auto c = quick_config(20);
  const auto a = train::train_jc(s.prepared, c);
  const auto b = train::train_jc(s.prepared, c);
  EXPECT_TRUE(*a.policy == *b.policy);
  EXPECT_TRUE(*a.router == *b.router);
  EXPECT_EQ(a.kind, train::SystemKind::kJC);
  EXPECT_FALSE(*a.policy == *train::train_ao(s.prepared, c).policy);
}

TEST(TwoStageStart, KeepsWhicheverCandidateScoresHigher) {
  const auto s = make_setup({sim::Expert::uniform_noise(0.6, 0.1), sim::Expert::uniform_noise(0.8, 0.1)}, 600, 3, 1.2);
  auto off = quick_config(40);
  off.two_stage_start = false;
  auto on = off;
  on.two_stage_start = true;
  obj::ObjectiveConfig oc;
  auto value = [&](const train::TrainedSystem& t, bool personal) {
    return personal ? obj::personalized_objective(*t.policy, &*t.router, s.prepared, oc, obj::Trainable::kNone).value
                    : obj::collab_objective(*t.policy, &*t.router, s.prepared, oc, obj::Trainable::kNone).value;
  };
  const auto ts = train::train_ts(s.prepared, on);
  for (bool personal : {false, true}) {
    const auto random_only = personal ? train::train_jcp(s.prepared, off) : train::train_jc(s.prepared, off);
    const auto both = personal ? train::train_jcp(s.prepared, on, &ts) : train::train_jc(s.prepared, on, &ts);
    EXPECT_FALSE(random_only.from_two_stage);
    EXPECT_GE(value(both, personal), value(random_only, personal));
    if (!both.from_two_stage) {
      EXPECT_TRUE(*both.policy == *random_only.policy);
    } else {
      EXPECT_EQ(both.lambda, 0.0);
    }
    // Without an explicit TS system the same one is trained internally.
    const auto internal = personal ? train::train_jcp(s.prepared, on) : train::train_jc(s.prepared, on);
    EXPECT_TRUE(*internal.policy == *both.policy);
  }
  auto ao = train::train_ao(s.prepared, on);
  EXPECT_THROW(train::train_jc(s.prepared, on, &ao), haiblbf::UsageError);
}

TEST(TwoStageStart, PersonalRouterRoutesLikeTheTsRouter) {
  auto rng = haiblbf::make_rng(12);
  for (std::size_t K : {1u, 3u}) {
    for (auto act : {nn::Activation::kIdentity, nn::Activation::kRelu}) {
      nn::DenseNet ts(4, {5}, act, 1, nn::Head::kSigmoid);
      ts.init_glorot(rng);
      ts.bias(1, 0) = 0.7;
      const auto personal = train::detail::personal_router_from(ts, K);
      ASSERT_EQ(personal.output_dim(), K + 1);
      for (int t = 0; t < 20; ++t) {
        std::vector<double> x(4);
        for (double& v : x) v = haiblbf::standard_normal(rng);
        const auto q = personal.forward(x);
        const double human = ts.forward(x)[0];
        EXPECT_NEAR(1.0 - q[K], human, 1e-12);
        for (std::size_t j = 0; j < K; ++j) EXPECT_NEAR(q[j], human / static_cast<double>(K), 1e-12);
      }
    }
  }
}

TEST(TrainJcp, SingleExpertRouterHasTwoOutputsAndMatchesCollabValue) {
  const auto s = make_setup({sim::Expert::uniform_noise(0.7, 0.2)});
  const auto jcp = train::train_jcp(s.prepared, quick_config(10));
  EXPECT_EQ(jcp.router->output_dim(), 2u);
  // A two-way softmax with logits (z, 0) routes like a sigmoid of z, and with
  // K = 1 the personalized objective is the collaboration objective.
  nn::DenseNet sig(4, {}, nn::Activation::kIdentity, 1, nn::Head::kSigmoid);
  nn::DenseNet soft(4, {}, nn::Activation::kIdentity, 2, nn::Head::kSoftmax);
  for (std::size_t i = 0; i < 4; ++i) sig.weight(0, 0, i) = soft.weight(0, 0, i) = 0.3 * static_cast<double>(i) - 0.4;
  obj::ObjectiveConfig oc;
  oc.truncation = 1e6;
  const double collab = obj::collab_objective(*jcp.policy, &sig, s.prepared, oc, obj::Trainable::kNone).value;
  const double personal = obj::personalized_objective(*jcp.policy, &soft, s.prepared, oc, obj::Trainable::kNone).value;
  EXPECT_NEAR(collab, personal, 1e-12);
}

TEST(TrainJcp, AvoidsTheWeakestExpertWhenHumansAreFree) {
  data::SyntheticSpec spec;
  spec.n = 1500;
  spec.d = 6;
  spec.l = 5;
  spec.label_noise = 0.3;
  spec.seed = 5;
  const auto ds = std::make_shared<const data::MultiLabelDataset>(data::make_synthetic_multilabel(spec));
  const sim::ExpertPool pool({sim::Expert::uniform_noise(0.6, 0.0), sim::Expert::uniform_noise(0.7, 0.0),
                              sim::Expert::uniform_noise(0.8, 0.0)});
  const auto log = sim::generate_log(ds, pool, 5);
  const auto prepared = obj::prepare_log(log, pool, obj::PropensitySource::kLogged);
  auto c = quick_config(100);
  const auto jcp = train::train_jcp(prepared, c);
  const sim::RewardOracle oracle(*ds);
  const auto res = haiblbf::eval::evaluate(jcp, pool, oracle, 11);
  ASSERT_GT(res.human_routed(), 0u);
  EXPECT_LT(static_cast<double>(res.routed[0]) / static_cast<double>(ds->size()), 0.05);
}

TEST(TrainedSystem, TextRoundTrip) {
  const auto s = make_setup({sim::Expert::uniform_noise(0.6), sim::Expert::uniform_noise(0.8)});
  const auto jcp = train::train_jcp(s.prepared, quick_config(3));
  std::stringstream ss;
  jcp.write(ss);
  const auto back = train::TrainedSystem::read(ss);
  EXPECT_EQ(back.kind, jcp.kind);
  EXPECT_EQ(back.num_experts, 2u);
  EXPECT_EQ(back.history, jcp.history);
  EXPECT_TRUE(*back.policy == *jcp.policy);
  EXPECT_TRUE(*back.router == *jcp.router);

  std::stringstream human;
  train::human_system(3).write(human);
  const auto h = train::TrainedSystem::read(human);
  EXPECT_EQ(h.kind, train::SystemKind::kHuman);
  EXPECT_FALSE(h.policy || h.router);

  std::stringstream bad("haiblbf-system 1\nkind Robot\n");
  EXPECT_THROW(train::TrainedSystem::read(bad), haiblbf::DataError);
  std::stringstream wrong("something else");
  EXPECT_THROW(train::TrainedSystem::read(wrong), haiblbf::DataError);
}

TEST(SystemKind, NamesRoundTrip) {
  for (auto k : {train::SystemKind::kHuman, train::SystemKind::kAO, train::SystemKind::kTS, train::SystemKind::kJC,
                 train::SystemKind::kJCP}) {
    EXPECT_EQ(train::parse_system(train::to_string(k)), k);
  }
  EXPECT_FALSE(train::parse_system("jc").has_value());
}
