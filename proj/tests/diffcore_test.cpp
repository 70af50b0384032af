#include "emcomm/diffcore.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "emcomm/params.hpp"
#include "emcomm/verify.hpp"

namespace emcomm::diff {
namespace {

TEST(Diffcore, DenseIdentityAndBiasOnly) {
  ParamStore store;
  Rng rng(1);
  auto layer = Dense::create(store, "d", 3, 3, rng, Activation::linear);
  std::fill(layer.weight->value.begin(), layer.weight->value.end(), 0.0);
  for (int i = 0; i < 3; ++i) layer.weight->value[i * 3 + i] = 1.0;
  Tape t;
  const std::vector<double> x{0.3, -1.2, 2.5};
  auto y = forward_dense(t.constant(1, 3, x), layer);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.value(i), x[i]);

  std::fill(layer.weight->value.begin(), layer.weight->value.end(), 0.0);
  layer.bias->value = {0.5, -0.25, 0.0};
  layer.activation = Activation::tanh;
  t.reset();
  y = forward_dense(t.constant(1, 3, x), layer);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.value(i), std::tanh(layer.bias->value[i]));
}

TEST(Diffcore, DenseInputGradientMatchesFiniteDifferences) {
  verify::GradReport rep;
  Rng rng(4);
  const auto w = verify::random_values(rng, 20);
  const auto b = verify::random_values(rng, 4);
  verify::gradient_check("dense", [&](Tape& t, const std::vector<Tensor>& v) {
    return sum(tanh(affine(v[0], t.constant(4, 5, w), t.constant(1, 4, b))));
  }, {{2, 5, verify::random_values(rng, 10)}}, rep);
  EXPECT_EQ(rep.failures, 0) << rep.first_failure;
  EXPECT_LT(rep.worst_rel_error, 1e-4);
}

TEST(Diffcore, RandomizedGraphsMatchFiniteDifferences) {
  const auto rep = verify::gradient_suite(100, 2024);
  EXPECT_EQ(rep.failures, 0) << rep.first_failure;
  EXPECT_GT(rep.checks, 1000);
}

TEST(Diffcore, StraightThroughForwardIsOneHotAndBackwardIsSoftPath) {
  const auto rep = verify::straight_through_suite(200, 8);
  EXPECT_EQ(rep.non_one_hot, 0);
  EXPECT_LT(rep.worst_abs_error, 1e-6);
}

TEST(Diffcore, StraightThroughSamplingFrequency) {
  Rng rng(12);
  Tape t;
  const std::vector<double> logits{10, -10, -10, -10};
  int first = 0;
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) {
    t.reset();
    const auto y = categorical_straight_through(t.constant(1, 4, logits), rng, SampleMode::sample);
    first += y.value(0) == 1.0 ? 1 : 0;
  }
  EXPECT_GT(static_cast<double>(first) / kDraws, 0.999);
}

TEST(Diffcore, ArgmaxTiesBreakToLowestIndex) {
  Rng rng(1);
  Tape t;
  const auto y = categorical_straight_through(t.constant(1, 4, std::vector<double>{0.5, 0.5, 0.5, 0.5}), rng,
                                              SampleMode::argmax);
  EXPECT_EQ(one_hot_index(y), 0);
  EXPECT_EQ(y.value(0), 1.0);
}

TEST(Diffcore, StraightThroughRejectsNonFiniteLogits) {
  Rng rng(1);
  Tape t;
  try {
    categorical_straight_through(t.constant(1, 2, std::vector<double>{0.0, NAN}), rng, SampleMode::sample);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteLogits);
  }
}

TEST(Diffcore, AnalyticLossValues) {
  Tape t;
  EXPECT_NEAR(cross_entropy(t.constant(1, 4, std::vector<double>{0.3, 0.3, 0.3, 0.3}), 2).value(), std::log(4.0), 1e-12);
  const std::vector<double> p{1.0, 0.0};
  const std::vector<double> q{0.5, 0.5};
  EXPECT_NEAR(kl_divergence(p, q), std::log(2.0), 1e-12);
  EXPECT_NEAR(kl_divergence(p, q), 0.6931, 1e-4);
  const std::vector<double> r{0.2, 0.3, 0.5};
  EXPECT_EQ(kl_divergence(r, r), 0.0);
}

TEST(Diffcore, SoftmaxSumsToOneAndKlIsNonNegative) {
  Rng rng(77);
  for (int i = 0; i < 500; ++i) {
    const auto logits = verify::random_values(rng, 2 + rng.below(10), 20.0);
    const auto p = softmax(logits);
    double s = 0.0;
    for (double x : p) s += x;
    EXPECT_NEAR(s, 1.0, 1e-9);
    const auto q = verify::random_distribution(rng, p.size());
    EXPECT_GE(kl_divergence(p, q), 0.0);
  }
}

TEST(Diffcore, KlRejectsUnnormalizedInput) {
  const std::vector<double> p{0.6, 0.6};
  const std::vector<double> q{0.5, 0.5};
  try {
    kl_divergence(p, q);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonNormalizedDistribution);
  }
}

TEST(Diffcore, ShapeMismatchIsReported) {
  Tape t;
  const auto x = t.constant(1, 3, std::vector<double>{1, 2, 3});
  const auto w = t.constant(2, 4, std::vector<double>(8, 0.0));
  const auto b = t.constant(1, 2, std::vector<double>(2, 0.0));
  try {
    affine(x, w, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  EXPECT_THROW(add(x, b), Error);
  EXPECT_THROW(cross_entropy(x, 3), Error);
}

TEST(Diffcore, ParameterGradientsAccumulateAcrossTapes) {
  ParamStore store;
  auto& p = store.add("p", 1, 2);
  p.value = {1.0, 2.0};
  for (int k = 0; k < 2; ++k) {
    Tape t;
    t.backward(sum(mul(t.param(p), t.param(p))));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 8.0);
  Tape frozen;
  frozen.set_grad_enabled(false);
  frozen.backward(sum(frozen.param(p)));
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
}

TEST(Diffcore, AdamMovesAgainstGradient) {
  ParamStore store(AdamConfig{0.1});
  auto& p = store.add("x", 1, 1);
  p.value = {3.0};
  for (int i = 0; i < 200; ++i) {
    Tape t;
    const auto x = t.param(p);
    t.backward(sum(mul(x, x)));
    store.optimize_step();
  }
  EXPECT_LT(std::abs(p.value[0]), 0.1);
  EXPECT_EQ(store.step_count(), 200);
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(Diffcore, AdamFirstStepHasLearningRateMagnitude) {
  ParamStore store;
  auto& p = store.add("x", 1, 2);
  p.grad = {0.5, -2.0};
  store.optimize_step();
  EXPECT_NEAR(p.value[0], -1e-3, 1e-9);
  EXPECT_NEAR(p.value[1], 1e-3, 1e-9);
}

TEST(Diffcore, CheckpointRoundTripIsBitExact) {
  Rng rng(9);
  ParamStore store;
  Dense::create(store, "enc", 15, 8, rng);
  Dense::create(store, "out", 8, 20, rng, Activation::linear);
  for (int s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i < store.size(); ++i)
      for (auto& g : store.at(i).grad) g = rng.uniform() - 0.5;
    store.optimize_step();
  }
  store.at(0).value[3] = -0.0;
  store.at(0).value[4] = 1e-310;

  Checkpoint ck;
  ck.config_hash = 0x1234abcd5678ef01ULL;
  StoreCodec::append(store, "speaker", ck.blocks);
  const auto bytes = serialize(ck);
  const auto back = deserialize(bytes);
  EXPECT_EQ(back.config_hash, ck.config_hash);
  EXPECT_EQ(serialize(back), bytes);

  ParamStore fresh;
  Rng other(1000);
  Dense::create(fresh, "enc", 15, 8, other);
  Dense::create(fresh, "out", 8, 20, other, Activation::linear);
  StoreCodec::load(fresh, "speaker", back);
  EXPECT_TRUE(fresh == store);
  EXPECT_TRUE(std::signbit(fresh.at(0).value[3]));
}

TEST(Diffcore, CorruptCheckpointsAreRejected) {
  Checkpoint ck;
  ck.blocks.push_back({"a", 1, 2, {1.0, 2.0}});
  auto bytes = serialize(ck);
  auto code_of = [](const std::string& b) {
    try {
      deserialize(b);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::ConfigInvalid;
  };
  EXPECT_EQ(code_of(bytes.substr(0, bytes.size() - 3)), ErrorCode::CorruptCheckpoint);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of(bad_magic), ErrorCode::CorruptCheckpoint);
  auto bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_EQ(code_of(bad_version), ErrorCode::CorruptCheckpoint);
}

}  // namespace
}  // namespace emcomm::diff
