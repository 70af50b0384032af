#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "emcomm/trainer.hpp"

using namespace emcomm;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.d_h = 16;
  c.d_g = 8;
  c.t_max = 12;
  c.episodes = 240;
  c.eval_every = 80;
  c.heldout_episodes = 2;
  c.disc_every = 40;
  c.disc_batches = 2;
  c.disc_batch_size = 16;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("emcomm_trainer_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

Trajectory one_episode(Agents& a, uint64_t seed, EpisodeOptions opt = {}) {
  Rng rng(seed);
  const auto split = make_split(a.cfg.split);
  const auto s0 = generate_episode(rng, split, EpisodeMode::train, std::nullopt, a.cfg.t_max);
  diff::Tape tape;
  return run_episode(tape, a, s0, opt, rng);
}

}  // namespace

TEST(Returns, DiscountedSumFixture) {
  const std::vector<double> r{0.0, 1.0, 0.5};
  const auto g = discounted_returns(r, 0.5);
  EXPECT_DOUBLE_EQ(g[2], 0.5);
  EXPECT_DOUBLE_EQ(g[1], 1.25);
  EXPECT_DOUBLE_EQ(g[0], 0.625);
}

TEST(Returns, StoredReturnsRecompute) {
  auto cfg = small_config();
  Agents a(cfg);
  for (uint64_t s = 0; s < 20; ++s) {
    const auto tr = one_episode(a, s);
    ASSERT_LE(tr.steps.size(), static_cast<std::size_t>(cfg.t_max));
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      double g = 0.0, w = 1.0;
      for (std::size_t u = t; u < tr.steps.size(); ++u, w *= cfg.gamma) g += w * tr.steps[u].reward;
      EXPECT_NEAR(tr.steps[t].ret, g, 1e-9);
    }
  }
}

TEST(Episode, SimpleSpeakerSeesOnlyEnvironmentRewards) {
  auto cfg = small_config();
  cfg.lambda1 = 0.0;
  cfg.lambda3 = 0.0;
  Agents a(cfg);
  for (uint64_t s = 0; s < 20; ++s) {
    const auto tr = one_episode(a, s);
    EXPECT_EQ(tr.r_cov, 0.0);
    EXPECT_EQ(tr.r_inf_sum, 0.0);
    for (const auto& st : tr.steps) {
      EXPECT_EQ(st.reward, st.r_env);
      EXPECT_TRUE(st.r_env == 0.0 || st.r_env == 1.0);
    }
    EXPECT_EQ(tr.symbol_log_probs.size(), static_cast<std::size_t>(cfg.n_m));
  }
}

TEST(Episode, IntrinsicRewardsAreAttached) {
  auto cfg = small_config();
  Agents a(cfg);
  const auto tr = one_episode(a, 3);
  double inf = 0.0;
  for (std::size_t t = 0; t + 1 < tr.steps.size(); ++t) {
    EXPECT_DOUBLE_EQ(tr.steps[t].reward, tr.steps[t].r_env + tr.steps[t].r_inf);
    EXPECT_GE(tr.steps[t].r_inf, 0.0);
    inf += tr.steps[t].r_inf;
  }
  const auto& last = tr.steps.back();
  EXPECT_DOUBLE_EQ(last.reward, last.r_env + last.r_inf + tr.r_cov);
  EXPECT_NEAR(inf + last.r_inf, tr.r_inf_sum, 1e-12);
  EXPECT_EQ(tr.r_cov, coverage_reward(tr.instruction, tr.message, a.disc, cfg.lambda1));
}

TEST(Episode, IntrinsicOnlyDropsEnvironmentReward) {
  auto cfg = small_config();
  cfg.env_reward = false;
  Agents a(cfg);
  for (uint64_t s = 0; s < 10; ++s) {
    const auto tr = one_episode(a, s);
    double total = 0.0;
    for (const auto& st : tr.steps) total += st.reward;
    EXPECT_NEAR(total, tr.r_inf_sum + tr.r_cov, 1e-12);
  }
}

TEST(Episode, PerfectSpeakerUsesFixedCode) {
  auto cfg = small_config();
  cfg.speaker = SpeakerKind::perfect;
  Agents a(cfg);
  EXPECT_FALSE(a.speaker.has_value());
  for (uint64_t s = 0; s < 10; ++s) {
    const auto tr = one_episode(a, s);
    EXPECT_EQ(tr.message, perfect_speak(tr.instruction, a.channel));
    EXPECT_TRUE(tr.symbol_log_probs.empty());
    EXPECT_EQ(tr.r_inf_sum, 0.0);
    EXPECT_EQ(tr.r_cov, 0.0);
  }
}

TEST(Episode, OracleListenerGetsTargetPlaneAndNoMessage) {
  auto cfg = small_config();
  cfg.speaker = SpeakerKind::none;
  cfg.oracle_listener = true;
  Agents a(cfg);
  EXPECT_EQ(a.listener.config().planes, kOraclePlanes);
  const auto tr = one_episode(a, 1);
  for (int sym : tr.message.symbols) EXPECT_EQ(sym, 0);
  EXPECT_TRUE(tr.symbol_log_probs.empty());

  // zero message bits: the listener's query is its bias alone
  diff::Tape t;
  const auto z = message_summary(a.listener, t.zeros(1, a.channel.width()));
  for (int i = 0; i < cfg.d_g; ++i) EXPECT_EQ(z.value(i), a.listener.message_layer().bias->value[i]);
}

// Two-armed bandit, reward 1 for arm 0, trained with the same surrogate the
// trainer uses.
TEST(Reinforce, BanditConverges) {
  diff::ParamStore store({.learning_rate = 0.01});
  auto& theta = store.add("bandit", 1, 2);
  Rng rng(4);
  double baseline = 0.0;
  diff::Tape t;
  for (int u = 0; u < 2000; ++u) {
    t.reset();
    const auto ls = diff::log_softmax(t.param(theta));
    const int a = rng.categorical(std::vector<double>{std::exp(ls.value(0)), std::exp(ls.value(1))});
    const double r = a == 0 ? 1.0 : 0.0;
    const std::vector<PolicyTerm> terms{{diff::pick(ls, 0, a), r - baseline}};
    t.backward(reinforce_loss(terms, 1.0));
    store.optimize_step();
    baseline = 0.9 * baseline + 0.1 * r;
  }
  const double p0 = 1.0 / (1.0 + std::exp(theta.value[1] - theta.value[0]));
  EXPECT_GT(p0, 0.95);
}

TEST(Reinforce, ZeroAdvantageLeavesParametersUnchanged) {
  auto cfg = small_config();
  cfg.env_reward = false;
  cfg.lambda1 = 0.0;
  cfg.lambda3 = 0.0;
  Agents a(cfg);
  const auto before_s = a.speaker->store();
  const auto before_l = a.listener.store();
  diff::Tape tape;
  Rng rng(9);
  const auto split = make_split(cfg.split);
  std::vector<Trajectory> batch;
  for (int i = 0; i < 4; ++i)
    batch.push_back(run_episode(tape, a, generate_episode(rng, split, EpisodeMode::train, std::nullopt, cfg.t_max), {}, rng));
  Baselines b(cfg.t_max);
  reinforce_update(tape, batch, a, b);
  double change = 0.0;
  auto compare = [&](const diff::ParamStore& x, const diff::ParamStore& y) {
    for (std::size_t k = 0; k < x.size(); ++k)
      for (std::size_t i = 0; i < x.at(k).value.size(); ++i)
        change = std::max(change, std::abs(x.at(k).value[i] - y.at(k).value[i]));
  };
  compare(before_l, a.listener.store());
  compare(before_s, a.speaker->store());
  EXPECT_LT(change, 1e-12);
}

// Two decisions: a0 from theta0, then a1 from row a0 of theta1. The surrogate
// is built over every trajectory weighted by its probability, which makes the
// estimator's expectation exact; it must equal the closed-form gradient.
TEST(Reinforce, TwoStepMdpMatchesClosedForm) {
  const double r0[2] = {0.2, 0.0};
  const double r1[2][2] = {{0.0, 1.0}, {0.5, 0.3}};
  for (double gamma : {1.0, 0.9}) {
    for (double baseline : {0.0, 0.37}) {
      diff::Parameter th0("th0", 1, 2), th1("th1", 2, 2);
      th0.value = {0.3, -0.2};
      th1.value = {0.1, 0.4, -0.5, 0.2};
      diff::Tape t;
      const auto l0 = diff::log_softmax(t.param(th0));
      const auto p1 = t.param(th1);
      const diff::Tensor l1[2] = {diff::log_softmax(diff::row(p1, 0)), diff::log_softmax(diff::row(p1, 1))};
      std::vector<PolicyTerm> terms;
      for (int a0 = 0; a0 < 2; ++a0)
        for (int a1 = 0; a1 < 2; ++a1) {
          const double w = std::exp(l0.value(a0)) * std::exp(l1[a0].value(a1));
          const std::vector<double> rew{r0[a0], r1[a0][a1]};
          const auto g = discounted_returns(rew, gamma);
          // return-to-go weighted by gamma^t gives the gradient of the discounted objective
          terms.push_back({diff::scale(diff::pick(l0, 0, a0), w), g[0] - baseline});
          terms.push_back({diff::scale(diff::pick(l1[a0], 0, a1), w * gamma), g[1] - baseline});
        }
      t.backward(reinforce_loss(terms, 1.0));

      // closed form for softmax policies
      double pi0[2], pi1[2][2], q0[2], v1[2];
      for (int a = 0; a < 2; ++a) pi0[a] = std::exp(l0.value(a));
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) pi1[a][b] = std::exp(l1[a].value(b));
        v1[a] = pi1[a][0] * r1[a][0] + pi1[a][1] * r1[a][1];
        q0[a] = r0[a] + gamma * v1[a];
      }
      const double v0 = pi0[0] * q0[0] + pi0[1] * q0[1];
      for (int k = 0; k < 2; ++k) EXPECT_NEAR(-th0.grad[k], pi0[k] * (q0[k] - v0), 1e-12) << gamma << " " << baseline;
      for (int a = 0; a < 2; ++a)
        for (int k = 0; k < 2; ++k)
          EXPECT_NEAR(-th1.grad[a * 2 + k], pi0[a] * gamma * pi1[a][k] * (r1[a][k] - v1[a]), 1e-12);
    }
  }
}

TEST(Baselines, FirstValueThenEma) {
  Baselines b(4);
  const auto c = TaskClass::from_index(3);
  EXPECT_EQ(b.get(c, 1), 0.0);
  b.update(c, 1, 2.0, 0.9);
  EXPECT_EQ(b.get(c, 1), 2.0);
  b.update(c, 1, 0.0, 0.9);
  EXPECT_DOUBLE_EQ(b.get(c, 1), 1.8);
  EXPECT_EQ(b.get(TaskClass::from_index(2), 1), 0.0);
  // the episode baseline is separate from every per-step one
  b.update_episode(c, 5.0, 0.9);
  EXPECT_EQ(b.get_episode(c), 5.0);
  for (int t = 0; t < 4; ++t) EXPECT_NE(b.get(c, t), 5.0);
}

// Speaker terms: discounted return from step 0 or the plain episode sum;
// the master and listener terms do not change.
TEST(Reinforce, SpeakerReturnModes) {
  auto cfg = small_config();
  cfg.lambda3 = 0.0;
  Agents a(cfg);
  diff::Tape tape;
  Rng rng(12);
  const auto split = make_split(cfg.split);
  Trajectory tr;
  do {
    tape.reset();
    tr = run_episode(tape, a, generate_episode(rng, split, EpisodeMode::train, std::nullopt, cfg.t_max), {}, rng);
  } while (tr.steps.size() < 3);
  double sum = 0.0;
  for (const auto& st : tr.steps) sum += st.reward;
  EXPECT_DOUBLE_EQ(tr.episode_return, sum);

  Baselines b(cfg.t_max);
  b.update(tr.task, 0, 0.25, 0.9);
  b.update_episode(tr.task, 0.5, 0.9);
  std::vector<PolicyTerm> disc, ep;
  append_policy_terms(tr, b, disc, SpeakerReturn::discounted);
  append_policy_terms(tr, b, ep, SpeakerReturn::episode);
  ASSERT_EQ(disc.size(), ep.size());
  const std::size_t n_sym = tr.symbol_log_probs.size();
  ASSERT_EQ(n_sym, static_cast<std::size_t>(cfg.n_m));
  for (std::size_t i = 0; i < n_sym; ++i) {
    EXPECT_DOUBLE_EQ(disc[i].advantage, tr.steps[0].ret - 0.25);
    EXPECT_DOUBLE_EQ(ep[i].advantage, sum - 0.5);
  }
  for (std::size_t i = n_sym; i < disc.size(); ++i) EXPECT_EQ(disc[i].advantage, ep[i].advantage);
  EXPECT_DOUBLE_EQ(ep[n_sym].advantage, tr.steps[0].ret - 0.25);  // master
}

TEST(Train, IdenticalRunsWriteIdenticalFiles) {
  auto cfg = small_config();
  const auto d1 = scratch_dir("det1"), d2 = scratch_dir("det2");
  cfg.out_dir = d1.string();
  Agents a1(cfg);
  const auto r1 = train(a1, {nullptr, true});
  cfg.out_dir = d2.string();
  Agents a2(cfg);
  const auto r2 = train(a2, {nullptr, true});

  const auto csv1 = slurp(d1 / files::metrics);
  EXPECT_FALSE(csv1.empty());
  EXPECT_EQ(csv1, slurp(d2 / files::metrics));
  EXPECT_EQ(slurp(d1 / files::checkpoint), slurp(d2 / files::checkpoint));
  EXPECT_EQ(slurp(d1 / files::language), slurp(d2 / files::language));
  EXPECT_EQ(r1.topsim.value, r2.topsim.value);

  std::istringstream lines(csv1);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header.rfind("episode,task_class,r_env,r_cov,r_inf_sum,success,heldout_success_", 0), 0u);
  EXPECT_NE(header.find(",topsim,lp_"), std::string::npos);
  int rows = 0;
  for (std::string l; std::getline(lines, l);) ++rows;
  EXPECT_EQ(rows, cfg.episodes);

  cfg.seed = 2;
  cfg.out_dir = scratch_dir("det3").string();
  Agents a3(cfg);
  train(a3, {nullptr, true});
  EXPECT_NE(csv1, slurp(std::filesystem::path(cfg.out_dir) / files::metrics));
  for (const auto& d : {d1, d2, std::filesystem::path(cfg.out_dir)}) std::filesystem::remove_all(d);
}

TEST(Train, CheckpointRoundTripsBitExactly) {
  auto cfg = small_config();
  cfg.episodes = 60;
  Agents a(cfg);
  train(a, {nullptr, false});
  const auto bytes = diff::serialize(make_checkpoint(a));

  Agents fresh(cfg);
  restore_checkpoint(fresh, diff::deserialize(bytes));
  EXPECT_EQ(diff::serialize(make_checkpoint(fresh)), bytes);
  EXPECT_EQ(fresh.listener.store(), a.listener.store());
  EXPECT_EQ(fresh.speaker->store(), a.speaker->store());
  EXPECT_EQ(fresh.disc.store(), a.disc.store());
  EXPECT_EQ(agent_language(fresh), agent_language(a));

  auto other = cfg;
  other.lambda1 = 0.2;
  Agents mismatched(other);
  try {
    restore_checkpoint(mismatched, diff::deserialize(bytes));
    FAIL() << "expected CorruptCheckpoint";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptCheckpoint);
  }
  EXPECT_THROW(diff::deserialize(bytes.substr(0, bytes.size() - 3)), Error);
}

TEST(Train, RejectsInvalidConfig) {
  auto cfg = small_config();
  cfg.d_m = 1;
  EXPECT_THROW(
      {
        Agents a(cfg);
        train(a, {nullptr, false});
      },
      Error);
}

TEST(ZeroShot, NeedsATestSet) {
  auto cfg = small_config();
  Agents a(cfg);
  try {
    evaluate_zero_shot(a, make_split(SplitKind::none), 10, 1);
    FAIL() << "expected EmptyTestSet";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyTestSet);
  }
  const auto acc = evaluate_zero_shot(a, make_split(SplitKind::numeral), 10, 1);
  ASSERT_EQ(acc.size(), 1u);
  EXPECT_EQ(acc[0].task, (TaskClass{Verb::pull, Weight::heavy}));
  EXPECT_EQ(acc[0].episodes, 10);
}

// Untrained listener sampling its actions vs a scripted policy that picks
// an arm uniformly and then local actions uniformly.
TEST(ZeroShot, UntrainedMatchesRandomPolicyBaseRate) {
  auto cfg = small_config();
  cfg.t_max = 30;
  cfg.d_h = 64;
  cfg.d_g = 32;
  Agents a(cfg);
  const auto split = make_split(SplitKind::visual);
  const auto acc = evaluate(a, split, EpisodeMode::test, test_classes(split), 400, 17, true);

  Rng rng(99);
  for (const auto& r : acc) {
    int hits = 0;
    const int n = 4000;
    for (int e = 0; e < n; ++e) {
      auto s = generate_episode(rng, split, EpisodeMode::test, r.task, cfg.t_max);
      const auto arm = static_cast<Arm>(rng.below(kNumArms));
      while (!s.done) s = step(s, arm_action(arm, static_cast<int>(rng.below(kArmActions)))).state;
      hits += s.reward_last;
    }
    const double base = static_cast<double>(hits) / n;
    EXPECT_NEAR(r.accuracy, base, 0.12) << r.task.label();
  }
}
