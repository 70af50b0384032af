#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emcomm/diffcore.hpp"
#include "emcomm/gridworld.hpp"
#include "emcomm/params.hpp"
#include "emcomm/random.hpp"

namespace emcomm {

inline constexpr int kNumCells = kGridSize * kGridSize;

// Master arms: A drives push, B drives pull, Null only navigates.
enum class Arm : uint8_t { push, pull, null };
inline constexpr int kNumArms = 3;
inline constexpr int kArmActions = 5;
inline constexpr std::array<std::string_view, kNumArms> kArmNames{"A", "B", "Null"};

// Arm-local index -> primitive action. Indices 0-3 are the moves.
inline Action arm_action(Arm arm, int local) {
  if (local < 4) return static_cast<Action>(local);
  switch (arm) {
    case Arm::push: return Action::push;
    case Arm::pull: return Action::pull;
    case Arm::null: return Action::noop;
  }
  return Action::noop;
}

struct ListenerConfig {
  int planes = kGridPlanes;
  int message_width = 20;
  int d_g = 32;
  int d_h = 64;
  // Scale of the initial message projection. With small queries the
  // attention starts uniform and never receives a consistent gradient.
  double query_init = 3.0;

  // Per-cell input: grid bits, the cell's (row, col), and its offset from the agent.
  int cell_width() const { return planes + 4; }
};

// Cell rows in row-major order, each [bits | (row - agent.row) / 3, (col - agent.col) / 3].
inline std::vector<double> cell_inputs(const GridEncoding& g) {
  const int width = g.planes + 4;
  Cell agent;
  for (int r = 0; r < kGridSize; ++r)
    for (int c = 0; c < kGridSize; ++c)
      if (g.at(plane::agent, r, c)) agent = {r, c};
  std::vector<double> x(static_cast<std::size_t>(kNumCells) * width, 0.0);
  const double norm = 1.0 / (kGridSize - 1);
  for (int r = 0; r < kGridSize; ++r)
    for (int c = 0; c < kGridSize; ++c) {
      double* row = x.data() + static_cast<std::size_t>(r * kGridSize + c) * width;
      for (int p = 0; p < g.planes; ++p) row[p] = g.at(p, r, c);
      row[g.planes] = r * norm;
      row[g.planes + 1] = c * norm;
      row[g.planes + 2] = (r - agent.row) * norm;
      row[g.planes + 3] = (c - agent.col) * norm;
    }
  return x;
}

class ListenerModel {
 public:
  ListenerModel(ListenerConfig cfg, Rng& rng, diff::AdamConfig adam = {}) : cfg_(cfg), store_(adam) {
    using diff::Activation;
    using diff::Dense;
    Dense::create(store_, "listener.grid", cfg.cell_width(), cfg.d_g, rng, Activation::tanh);
    auto msg = Dense::create(store_, "listener.message", cfg.message_width, cfg.d_g, rng, Activation::linear);
    for (double& w : msg.weight->value) w *= cfg.query_init;
    for (double& b : msg.bias->value) b = (2.0 * rng.uniform() - 1.0) * cfg.query_init;
    Dense::create(store_, "listener.master.hidden", 2 * cfg.d_g, cfg.d_h, rng, Activation::tanh);
    Dense::create(store_, "listener.master.out", cfg.d_h, kNumArms, rng, Activation::linear);
    for (int a = 0; a < kNumArms; ++a) {
      Dense::create(store_, arm_name(a) + ".hidden", 2 * cfg.d_g, cfg.d_h, rng, Activation::tanh);
      Dense::create(store_, arm_name(a) + ".out", cfg.d_h, kArmActions, rng, Activation::linear);
    }
    bind();
  }
  ListenerModel(const ListenerModel& o) : cfg_(o.cfg_), store_(o.store_) { bind(); }
  ListenerModel& operator=(const ListenerModel& o) {
    cfg_ = o.cfg_;
    store_ = o.store_;
    bind();
    return *this;
  }

  const ListenerConfig& config() const { return cfg_; }
  diff::ParamStore& store() { return store_; }
  const diff::ParamStore& store() const { return store_; }

  const diff::Dense& grid_layer() const { return grid_; }
  const diff::Dense& message_layer() const { return message_; }
  const diff::Dense& master_hidden() const { return master_hidden_; }
  const diff::Dense& master_out() const { return master_out_; }
  const diff::Dense& arm_hidden(Arm a) const { return arm_hidden_[static_cast<int>(a)]; }
  const diff::Dense& arm_out(Arm a) const { return arm_out_[static_cast<int>(a)]; }

 private:
  static std::string arm_name(int a) { return "listener.arm" + std::to_string(a); }

  void bind() {
    using diff::Activation;
    grid_ = diff::Dense::bind(store_, "listener.grid", Activation::tanh);
    message_ = diff::Dense::bind(store_, "listener.message", Activation::linear);
    master_hidden_ = diff::Dense::bind(store_, "listener.master.hidden", Activation::tanh);
    master_out_ = diff::Dense::bind(store_, "listener.master.out", Activation::linear);
    for (int a = 0; a < kNumArms; ++a) {
      arm_hidden_[a] = diff::Dense::bind(store_, arm_name(a) + ".hidden", Activation::tanh);
      arm_out_[a] = diff::Dense::bind(store_, arm_name(a) + ".out", Activation::linear);
    }
  }

  ListenerConfig cfg_;
  diff::ParamStore store_;
  diff::Dense grid_;
  diff::Dense message_;
  diff::Dense master_hidden_;
  diff::Dense master_out_;
  std::array<diff::Dense, kNumArms> arm_hidden_;
  std::array<diff::Dense, kNumArms> arm_out_;
};

// 16 x d_G cell features.
inline diff::Tensor encode_grid_features(diff::Tape& tape, const ListenerModel& model, const GridEncoding& g) {
  if (g.planes != model.config().planes)
    throw Error(ErrorCode::ShapeMismatch, "grid has " + std::to_string(g.planes) + " planes, listener expects " +
                                              std::to_string(model.config().planes));
  const auto x = cell_inputs(g);
  return diff::forward_dense(tape.constant(kNumCells, model.config().cell_width(), x), model.grid_layer());
}

// z = dense(message bits), 1 x d_G.
inline diff::Tensor message_summary(const ListenerModel& model, diff::Tensor message_bits) {
  return diff::forward_dense(message_bits, model.message_layer());
}

struct AttentionOutput {
  diff::Tensor weights;   // 1 x 16
  diff::Tensor attended;  // 1 x d_G
};

// alpha = softmax_i(z . cell_i / sqrt(d_G)); attended = sum_i alpha_i cell_i.
inline AttentionOutput attend(diff::Tensor z, diff::Tensor cells) {
  if (z.rows() != 1 || z.cols() != cells.cols())
    throw Error(ErrorCode::ShapeMismatch, "attend: z " + std::to_string(z.rows()) + "x" + std::to_string(z.cols()) +
                                              " vs cells " + std::to_string(cells.rows()) + "x" + std::to_string(cells.cols()));
  const double inv = 1.0 / std::sqrt(static_cast<double>(cells.cols()));
  const auto scores = diff::scale(diff::matmul_bt(z, cells), inv);
  const auto alpha = diff::softmax(scores);
  return {alpha, diff::matmul(alpha, cells)};
}

inline diff::Tensor master_logits(const ListenerModel& model, diff::Tensor attended0, diff::Tensor z) {
  const auto h = diff::forward_dense(diff::concat_cols({attended0, z}), model.master_hidden());
  return diff::forward_dense(h, model.master_out());
}

inline diff::Tensor arm_logits(const ListenerModel& model, Arm arm, diff::Tensor attended, diff::Tensor z) {
  const auto h = diff::forward_dense(diff::concat_cols({attended, z}), model.arm_hidden(arm));
  return diff::forward_dense(h, model.arm_out(arm));
}

enum class ActMode : uint8_t { train, eval };

inline int choose(std::span<const double> log_probs, Rng& rng, ActMode mode) {
  if (mode == ActMode::eval) return diff::argmax(log_probs);
  std::vector<double> p(log_probs.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_probs[i]);
  return rng.categorical(p);
}

struct MasterDecision {
  Arm arm = Arm::null;
  std::array<double, kNumArms> probs{};
  diff::Tensor log_prob;     // 1 x 1
  diff::Tensor log_softmax;  // 1 x 3
};

struct PolicyOutput {
  std::array<double, kNumArms> master{};
  std::array<double, kArmActions> action{};  // over the active arm's local actions
  diff::Tensor action_log_prob;              // 1 x 1
  diff::Tensor action_log_softmax;           // 1 x 5
  AttentionOutput attention;
  Arm arm = Arm::null;
  Action primitive = Action::noop;
};

// Per-episode listener state: the message summary and the master decision,
// which is taken once from the first observation and then held fixed.
class ListenerEpisode {
 public:
  ListenerEpisode(diff::Tape& tape, ListenerModel& model, diff::Tensor message_bits)
      : tape_(&tape), model_(&model), z_(message_summary(model, message_bits)) {}

  diff::Tensor z() const { return z_; }
  bool started() const { return master_.log_prob.valid(); }
  const MasterDecision& master() const { return master_; }

  PolicyOutput act(const GridEncoding& obs, Rng& rng, ActMode mode) {
    const auto cells = encode_grid_features(*tape_, *model_, obs);
    const auto att = attend(z_, cells);
    if (!started()) {
      const auto ls = diff::log_softmax(master_logits(*model_, att.attended, z_));
      const int arm = choose(ls.values(), rng, mode);
      master_.arm = static_cast<Arm>(arm);
      for (int i = 0; i < kNumArms; ++i) master_.probs[i] = std::exp(ls.value(i));
      master_.log_prob = diff::pick(ls, 0, arm);
      master_.log_softmax = ls;
    }
    PolicyOutput out;
    out.master = master_.probs;
    out.arm = master_.arm;
    out.attention = att;
    out.action_log_softmax = diff::log_softmax(arm_logits(*model_, master_.arm, att.attended, z_));
    for (int i = 0; i < kArmActions; ++i) out.action[i] = std::exp(out.action_log_softmax.value(i));
    const int local = choose(out.action_log_softmax.values(), rng, mode);
    out.action_log_prob = diff::pick(out.action_log_softmax, 0, local);
    out.primitive = arm_action(master_.arm, local);
    return out;
  }

 private:
  diff::Tape* tape_;
  ListenerModel* model_;
  diff::Tensor z_;
  MasterDecision master_;
};

// sum p log p for a 1 x n row of log-probabilities; minimizing it raises entropy.
inline diff::Tensor neg_entropy(diff::Tensor log_probs) {
  return diff::sum(diff::mul(diff::softmax(log_probs), log_probs));
}

using ActionDistribution = std::array<double, kNumActions>;

// Grid features of one observation, computed without gradients so that
// several messages can be evaluated against them.
struct FrozenFeatures {
  std::vector<double> cells;  // 16 x d_G
};

inline FrozenFeatures freeze_features(ListenerModel& model, const GridEncoding& obs, diff::Tape& scratch) {
  scratch.reset();
  scratch.set_grad_enabled(false);
  const auto f = encode_grid_features(scratch, model, obs);
  return {std::vector<double>(f.values().begin(), f.values().end())};
}

inline FrozenFeatures freeze_features(ListenerModel& model, const GridEncoding& obs) {
  diff::Tape scratch;
  return freeze_features(model, obs, scratch);
}

using MasterDistribution = std::array<double, kNumArms>;

// Master distribution for a message against the episode's first observation.
inline MasterDistribution master_distribution(ListenerModel& model, const FrozenFeatures& first,
                                              std::span<const double> message_bits, diff::Tape& scratch) {
  scratch.reset();
  scratch.set_grad_enabled(false);
  const auto z = message_summary(model, scratch.constant(1, static_cast<int>(message_bits.size()), message_bits));
  const auto cells0 = scratch.constant(kNumCells, model.config().d_g, first.cells);
  const auto p = diff::softmax(master_logits(model, attend(z, cells0).attended, z));
  return {p.value(0), p.value(1), p.value(2)};
}

// p(a) = sum_arm master(arm) p(a | arm) at the current observation.
inline ActionDistribution compose_actions(ListenerModel& model, const MasterDistribution& master,
                                          const FrozenFeatures& current, std::span<const double> message_bits,
                                          diff::Tape& scratch) {
  scratch.reset();
  scratch.set_grad_enabled(false);
  const auto z = message_summary(model, scratch.constant(1, static_cast<int>(message_bits.size()), message_bits));
  const auto attended = attend(z, scratch.constant(kNumCells, model.config().d_g, current.cells)).attended;
  ActionDistribution p{};
  for (int a = 0; a < kNumArms; ++a) {
    if (master[a] == 0.0) continue;
    const auto probs = diff::softmax(arm_logits(model, static_cast<Arm>(a), attended, z));
    for (int i = 0; i < kArmActions; ++i)
      p[static_cast<int>(arm_action(static_cast<Arm>(a), i))] += master[a] * probs.value(i);
  }
  return p;
}

// Marginal over primitive actions: p(a) = sum_arm p(arm) p(a | arm), with the
// master distribution taken from the episode's first observation.
inline ActionDistribution action_distribution(ListenerModel& model, const FrozenFeatures& first,
                                              const FrozenFeatures& current, std::span<const double> message_bits,
                                              diff::Tape& scratch) {
  const auto master = master_distribution(model, first, message_bits, scratch);
  return compose_actions(model, master, current, message_bits, scratch);
}

inline ActionDistribution action_distribution(ListenerModel& model, const GridEncoding& first, const GridEncoding& current,
                                              std::span<const double> message_bits) {
  diff::Tape scratch;
  const auto f0 = freeze_features(model, first, scratch);
  const auto ft = freeze_features(model, current, scratch);
  return action_distribution(model, f0, ft, message_bits, scratch);
}

}  // namespace emcomm
