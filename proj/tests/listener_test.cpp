#include "emcomm/listener.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "emcomm/speaker.hpp"
#include "emcomm/verify.hpp"
#include "stats.hpp"

namespace emcomm {
namespace {

GridState sample_state(uint64_t seed) {
  Rng rng(seed);
  return generate_episode(rng, make_split(SplitKind::none), EpisodeMode::train);
}

void zero(diff::Parameter* p) { std::fill(p->value.begin(), p->value.end(), 0.0); }

TEST(Listener, CellsWithSameContentDifferByCoordinates) {
  Rng init(1);
  ListenerModel model({}, init);
  GridState s = sample_state(3);
  diff::Tape t;
  const auto f = encode_grid_features(t, model, encode_grid(s, false));
  ASSERT_EQ(f.rows(), 16);
  ASSERT_EQ(f.cols(), 32);
  // find two empty, non-agent cells
  std::vector<int> empty;
  for (int i = 0; i < 16; ++i) {
    const Cell c{i / 4, i % 4};
    if (s.object_at(c) < 0 && c != s.agent) empty.push_back(i);
  }
  ASSERT_GE(empty.size(), 2u);
  bool differs = false;
  for (int j = 0; j < 32; ++j) differs |= f.at(empty[0], j) != f.at(empty[1], j);
  EXPECT_TRUE(differs);
}

TEST(Listener, CellInputsCarryPositionAndAgentOffset) {
  GridState s = sample_state(4);
  s.agent = {1, 2};
  const auto g = encode_grid(s, false);
  const auto x = cell_inputs(g);
  const int w = kGridPlanes + 4;
  ASSERT_EQ(x.size(), static_cast<std::size_t>(16 * w));
  EXPECT_DOUBLE_EQ(x[(1 * 4 + 2) * w + kGridPlanes], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(x[(1 * 4 + 2) * w + kGridPlanes + 1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(x[(1 * 4 + 2) * w + kGridPlanes + 2], 0.0);
  EXPECT_DOUBLE_EQ(x[(3 * 4 + 0) * w + kGridPlanes], 1.0);
  EXPECT_DOUBLE_EQ(x[(3 * 4 + 0) * w + kGridPlanes + 1], 0.0);
  EXPECT_DOUBLE_EQ(x[(3 * 4 + 0) * w + kGridPlanes + 2], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(x[(3 * 4 + 0) * w + kGridPlanes + 3], -2.0 / 3.0);
}

TEST(Listener, PlaneCountMismatchIsRejected) {
  Rng init(1);
  ListenerModel model(ListenerConfig{kOraclePlanes}, init);
  diff::Tape t;
  try {
    encode_grid_features(t, model, encode_grid(sample_state(1), false));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Listener, ZeroQueryGivesUniformAttention) {
  Rng rng(6);
  diff::Tape t;
  const auto cells = t.constant(16, 8, verify::random_values(rng, 128));
  const auto out = attend(t.zeros(1, 8), cells);
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(out.weights.value(i), 1.0 / 16, 1e-15);
  for (int j = 0; j < 8; ++j) {
    double mean = 0.0;
    for (int i = 0; i < 16; ++i) mean += cells.at(i, j) / 16;
    EXPECT_NEAR(out.attended.value(j), mean, 1e-12);
  }
}

TEST(Listener, DominantScoreTakesAllAttention) {
  const int d = 32;
  std::vector<double> cells(16 * d, 0.0), z(d, 0.0);
  z[0] = 1.0;
  cells[5 * d + 0] = 20.0 * std::sqrt(static_cast<double>(d));
  diff::Tape t;
  const auto out = attend(t.constant(1, d, z), t.constant(16, d, cells));
  EXPECT_GT(out.weights.value(5), 0.999);
}

TEST(Listener, AttentionIsConvexCombination) {
  Rng rng(7);
  diff::Tape t;
  for (int k = 0; k < 200; ++k) {
    t.reset();
    const auto cells = t.constant(16, 6, verify::random_values(rng, 96, 3.0));
    const auto out = attend(t.constant(1, 6, verify::random_values(rng, 6, 3.0)), cells);
    double s = 0.0;
    for (int i = 0; i < 16; ++i) {
      ASSERT_GE(out.weights.value(i), 0.0);
      s += out.weights.value(i);
    }
    ASSERT_NEAR(s, 1.0, 1e-12);
    for (int j = 0; j < 6; ++j) {
      double a = 0.0;
      for (int i = 0; i < 16; ++i) a += out.weights.value(i) * cells.at(i, j);
      ASSERT_NEAR(out.attended.value(j), a, 1e-12);
    }
  }
  EXPECT_THROW(attend(t.zeros(1, 5), t.zeros(16, 6)), Error);
}

TEST(Listener, OracleTargetPlaneDrawsAttention) {
  Rng init(2);
  ListenerModel model(ListenerConfig{kOraclePlanes, 20, 32, 16}, init);
  auto grid = model.grid_layer();
  zero(grid.weight);
  zero(grid.bias);
  grid.weight->value[0 * model.config().cell_width() + plane::target] = 3.0;
  auto msg = model.message_layer();
  zero(msg.weight);
  zero(msg.bias);
  msg.bias->value[0] = 100.0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = sample_state(seed);
    diff::Tape t;
    const auto cells = encode_grid_features(t, model, encode_grid(s, true));
    const auto z = message_summary(model, t.zeros(1, 20));
    const auto att = attend(z, cells);
    const Cell p = s.objects[s.target_index()].position;
    ASSERT_GT(att.weights.value(p.row * 4 + p.col), 0.99);
  }
}

TEST(Listener, NullArmNeverInteracts) {
  for (int i = 0; i < kArmActions; ++i) {
    const auto a = arm_action(Arm::null, i);
    EXPECT_NE(a, Action::push);
    EXPECT_NE(a, Action::pull);
  }
  EXPECT_EQ(arm_action(Arm::push, 4), Action::push);
  EXPECT_EQ(arm_action(Arm::pull, 4), Action::pull);

  Rng init(3);
  ListenerModel model({}, init);
  auto out = model.master_out();
  zero(out.weight);
  out.bias->value = {-1000.0, -1000.0, 1000.0};
  const auto g = encode_grid(sample_state(9), false);
  const std::vector<double> bits(20, 0.0);
  const auto p = action_distribution(model, g, g, bits);
  EXPECT_EQ(p[static_cast<int>(Action::push)], 0.0);
  EXPECT_EQ(p[static_cast<int>(Action::pull)], 0.0);
  double s = 0.0;
  for (double x : p) s += x;
  EXPECT_NEAR(s, 1.0, 1e-12);

  Rng rng(1);
  diff::Tape t;
  for (int k = 0; k < 200; ++k) {
    t.reset();
    ListenerEpisode ep(t, model, t.constant(1, 20, bits));
    const auto a = ep.act(g, rng, ActMode::train);
    ASSERT_EQ(a.arm, Arm::null);
    ASSERT_NE(a.primitive, Action::push);
    ASSERT_NE(a.primitive, Action::pull);
  }
}

TEST(Listener, EvalModeIsDeterministic) {
  Rng init(4);
  ListenerModel model({}, init);
  const auto g = encode_grid(sample_state(2), false);
  Rng mr(5);
  const auto bits = verify::random_values(mr, 20);
  Rng a(1), b(2);
  diff::Tape t;
  ListenerEpisode e1(t, model, t.constant(1, 20, bits));
  ListenerEpisode e2(t, model, t.constant(1, 20, bits));
  const auto x = e1.act(g, a, ActMode::eval);
  const auto y = e2.act(g, b, ActMode::eval);
  EXPECT_EQ(x.primitive, y.primitive);
  EXPECT_EQ(x.arm, y.arm);
}

TEST(Listener, MasterDecisionIsFixedWithinEpisode) {
  Rng init(5);
  ListenerModel model({}, init);
  Rng rng(3);
  for (uint64_t seed = 0; seed < 30; ++seed) {
    GridState s = sample_state(seed);
    diff::Tape t;
    ListenerEpisode ep(t, model, t.constant(1, 20, Message{{0, 1, 2, 3, 0}, 4}.bits()));
    std::optional<Arm> arm;
    while (!s.done) {
      const auto out = ep.act(encode_grid(s, false), rng, ActMode::train);
      if (arm) {
        ASSERT_EQ(*arm, out.arm);
      }
      arm = out.arm;
      double sum = 0.0;
      for (double p : out.action) sum += p;
      ASSERT_NEAR(sum, 1.0, 1e-9);
      s = step(s, out.primitive).state;
    }
  }
}

TEST(Listener, MarginalMatchesSampledActions) {
  Rng init(6);
  ListenerModel model({}, init);
  // make the master and arms noticeably non-uniform
  for (std::size_t i = 0; i < model.store().size(); ++i)
    for (auto& v : model.store().at(i).value) v *= 3.0;
  const auto s0 = sample_state(11);
  const auto s1 = step(s0, Action::left).state;
  const auto g0 = encode_grid(s0, false);
  const auto g1 = encode_grid(s1, false);
  const auto bits = Message{{1, 0, 3, 2, 1}, 4}.bits();
  const auto p = action_distribution(model, g0, g1, bits);

  std::vector<long> counts(kNumActions, 0);
  Rng rng(9);
  diff::Tape t;
  t.set_grad_enabled(false);
  for (int i = 0; i < 10000; ++i) {
    t.reset();
    ListenerEpisode ep(t, model, t.constant(1, 20, bits));
    ep.act(g0, rng, ActMode::train);
    ++counts[static_cast<int>(ep.act(g1, rng, ActMode::train).primitive)];
  }
  EXPECT_TRUE(test::passes_chi_square(counts, p));
}

TEST(Listener, PolicyGradientsMatchFiniteDifferences) {
  Rng init(8);
  ListenerModel model(ListenerConfig{kGridPlanes, 20, 8, 6}, init);
  Rng rng(10);
  verify::GradReport rep;
  const int w = model.config().cell_width();
  for (auto arm : {Arm::push, Arm::pull, Arm::null}) {
    verify::gradient_check(
        "listener", [&](diff::Tape&, const std::vector<diff::Tensor>& v) {
          const auto cells = diff::forward_dense(v[0], model.grid_layer());
          const auto z = message_summary(model, v[1]);
          const auto att = attend(z, cells);
          const auto master = diff::log_softmax(master_logits(model, att.attended, z));
          const auto act = diff::log_softmax(arm_logits(model, arm, att.attended, z));
          return diff::add(diff::pick(master, 0, static_cast<int>(arm)), diff::pick(act, 0, 2));
        },
        {{16, w, verify::random_values(rng, 16 * w)}, {1, 20, verify::random_values(rng, 20)}}, rep);
  }
  EXPECT_EQ(rep.failures, 0) << rep.first_failure;
}

}  // namespace
}  // namespace emcomm
