#pragma once

// Self-checks shared by the test suites and `emcomm verify`: differential
// testing of the grid dynamics against reference_step, state invariants,
// and central finite-difference gradient checks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "emcomm/diffcore.hpp"
#include "emcomm/gridworld.hpp"
#include "emcomm/reference_dynamics.hpp"

namespace emcomm::verify {

// Returns a description of the first violated invariant, if any.
inline std::optional<std::string> check_state(const GridState& s) {
  std::set<Cell> cells;
  if (!s.in_bounds(s.agent)) return "agent out of bounds";
  cells.insert(s.agent);
  int targets = 0;
  for (const auto& o : s.objects) {
    if (!s.in_bounds(o.position)) return "object out of bounds";
    if (!cells.insert(o.position).second) return "two entities share a cell";
    targets += o.is_target ? 1 : 0;
  }
  if (targets != 1) return "expected exactly one target, found " + std::to_string(targets);
  if (s.step > s.t_max) return "step exceeds t_max";
  return std::nullopt;
}

inline std::optional<std::string> check_distractors(const GridState& s) {
  const auto& t = s.objects[s.target_index()];
  if (t.color != s.task.color || t.size != s.task.size || t.weight != s.task.weight || t.shape != s.task.shape)
    return "target does not match task concept";
  for (const auto& o : s.objects) {
    if (o.is_target) continue;
    if (o.color != t.color && o.shape != t.shape) return "distractor shares neither color nor shape";
    if (o.color == t.color && o.size == t.size && o.weight == t.weight && o.shape == t.shape)
      return "distractor identical to target";
  }
  return std::nullopt;
}

struct DiffReport {
  uint64_t transitions = 0;
  uint64_t mismatches = 0;
  std::string first_mismatch;
};

inline bool same_result(const StepResult& a, const StepResult& b) {
  return a.reward == b.reward && a.done == b.done && a.state == b.state;
}

inline void record(DiffReport& rep, const GridState& s, Action a, const StepResult& x, const StepResult& y) {
  ++rep.transitions;
  if (same_result(x, y)) return;
  if (rep.mismatches++ == 0)
    rep.first_mismatch = "action " + std::string(name(a)) + " from agent (" + std::to_string(s.agent.row) + "," +
                         std::to_string(s.agent.col) + "): step gives '" + format_transition(x.state, a, x.reward, x.done) +
                         "', reference gives '" + format_transition(y.state, a, y.reward, y.done) + "'";
}

// All placements of the agent and one object on a 3x3 grid, every verb and
// object weight, and every action sequence of length <= 4.
inline DiffReport differential_small_suite() {
  DiffReport rep;
  constexpr int n = 3;
  std::function<void(const GridState&, int)> explore = [&](const GridState& s, int depth) {
    if (depth == 4 || s.done) return;
    for (int a = 0; a < kNumActions; ++a) {
      const auto act = static_cast<Action>(a);
      const auto x = step(s, act);
      const auto y = reference_step(s, act);
      record(rep, s, act, x, y);
      explore(x.state, depth + 1);
    }
  };
  for (int agent = 0; agent < n * n; ++agent)
    for (int obj = 0; obj < n * n; ++obj) {
      if (obj == agent) continue;
      for (int verb = 0; verb < 3; ++verb)
        for (int weight = 0; weight < 2; ++weight) {
          GridState s;
          s.grid_size = n;
          s.agent = {agent / n, agent % n};
          s.task = Concept{static_cast<Verb>(verb), Color::red, Size::small, static_cast<Weight>(weight), Shape::square};
          s.objects.push_back(ObjectInstance{Color::red, Size::small, static_cast<Weight>(weight), Shape::square,
                                             Cell{obj / n, obj % n}, true});
          explore(s, 0);
        }
    }
  return rep;
}

// Random 4x4 episodes under uniformly random actions.
inline DiffReport differential_random(uint64_t transitions, uint64_t seed) {
  DiffReport rep;
  Rng rng(seed);
  const auto split = make_split(SplitKind::none);
  GridState s = generate_episode(rng, split, EpisodeMode::train);
  while (rep.transitions < transitions) {
    const auto act = static_cast<Action>(rng.below(kNumActions));
    const auto x = step(s, act);
    const auto y = reference_step(s, act);
    record(rep, s, act, x, y);
    s = x.done ? generate_episode(rng, split, EpisodeMode::train) : x.state;
  }
  return rep;
}

struct GradReport {
  int checks = 0;
  int failures = 0;
  double worst_rel_error = 0.0;
  std::string first_failure;
};

// Builds a scalar from leaf variables; leaves are recreated per evaluation.
using GraphFn = std::function<diff::Tensor(diff::Tape&, const std::vector<diff::Tensor>&)>;

struct GraphInput {
  int rows;
  int cols;
  std::vector<double> values;
};

// Compares reverse-mode gradients with central differences. The relative
// error uses max(|a|, |n|, 1e-3) as the scale, so tiny gradients are
// compared absolutely.
inline void gradient_check(const std::string& label, const GraphFn& fn, std::vector<GraphInput> inputs,
                           GradReport& rep, double eps = 1e-4, double tol = 1e-4) {
  diff::Tape tape;
  std::vector<diff::Tensor> leaves;
  for (const auto& in : inputs) leaves.push_back(tape.variable(in.rows, in.cols, in.values));
  const diff::Tensor out = fn(tape, leaves);
  tape.backward(out);
  std::vector<std::vector<double>> analytic;
  for (const auto& l : leaves) analytic.emplace_back(l.grads().begin(), l.grads().end());

  auto eval = [&]() {
    diff::Tape t;
    std::vector<diff::Tensor> ls;
    for (const auto& in : inputs) ls.push_back(t.constant(in.rows, in.cols, in.values));
    return fn(t, ls).value();
  };
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].values.size(); ++i) {
      const double orig = inputs[k].values[i];
      inputs[k].values[i] = orig + eps;
      const double up = eval();
      inputs[k].values[i] = orig - eps;
      const double down = eval();
      inputs[k].values[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      ++rep.checks;
      rep.worst_rel_error = std::max(rep.worst_rel_error, rel);
      if (rel >= tol) {
        if (rep.failures++ == 0)
          rep.first_failure = label + ": input " + std::to_string(k) + "[" + std::to_string(i) + "] analytic " +
                              std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
}

inline std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * scale;
  return v;
}

inline std::vector<double> random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) s += (x = 0.05 + rng.uniform());
  for (auto& x : v) x /= s;
  return v;
}

// Randomized small graphs covering every differentiable op, `graphs` times.
inline GradReport gradient_suite(int graphs, uint64_t seed) {
  using namespace diff;
  GradReport rep;
  Rng rng(seed);
  for (int g = 0; g < graphs; ++g) {
    const int r = 1 + rng.below(3);
    const int in = 2 + rng.below(4);
    const int out = 2 + rng.below(4);
    const int label = rng.below(out);

    gradient_check("dense-tanh", [&](Tape&, const std::vector<Tensor>& v) {
      return sum(tanh(affine(v[0], v[1], v[2])));
    }, {{r, in, random_values(rng, r * in)}, {out, in, random_values(rng, out * in)}, {1, out, random_values(rng, out)}}, rep);

    gradient_check("dense-relu-weighted", [&](Tape& t, const std::vector<Tensor>& v) {
      const auto h = relu(affine(v[0], v[1], v[2]));
      const auto w = t.constant(h.rows(), h.cols(), std::vector<double>(h.size(), 0.7));
      return sum(mul(h, w));
    }, {{r, in, random_values(rng, r * in)}, {out, in, random_values(rng, out * in)}, {1, out, random_values(rng, out, 0.3)}}, rep);

    gradient_check("matmul-softmax", [&](Tape&, const std::vector<Tensor>& v) {
      const auto m = matmul(v[0], v[1]);
      return pick(softmax(m), 0, label % m.cols());
    }, {{r, in, random_values(rng, r * in)}, {in, out, random_values(rng, in * out)}}, rep);

    gradient_check("attention", [&](Tape&, const std::vector<Tensor>& v) {
      const auto logits = scale(matmul_bt(v[0], v[1]), 1.0 / std::sqrt(static_cast<double>(in)));
      const auto alpha = softmax(reshape(logits, 1, logits.size()));
      const auto attended = matmul(alpha, v[1]);
      return sum(tanh(attended));
    }, {{1, in, random_values(rng, in)}, {out + 2, in, random_values(rng, (out + 2) * in)}}, rep);

    gradient_check("log-softmax-concat-slice", [&](Tape&, const std::vector<Tensor>& v) {
      const auto c = concat_cols({v[0], v[1]});
      const auto ls = log_softmax(c);
      return sum(slice(ls, 0, 1, 1, c.cols() - 1));
    }, {{1, in, random_values(rng, in)}, {1, out, random_values(rng, out)}}, rep);

    gradient_check("combine-sub-add", [&](Tape&, const std::vector<Tensor>& v) {
      const std::vector<Tensor> terms{add(v[0], v[1]), sub(v[0], v[1]), mul(v[0], v[0])};
      const std::vector<double> coeffs{0.5, -1.5, 2.0};
      return sum(combine(terms, coeffs));
    }, {{r, in, random_values(rng, r * in)}, {r, in, random_values(rng, r * in)}}, rep);

    gradient_check("cross-entropy", [&](Tape&, const std::vector<Tensor>& v) {
      return cross_entropy(v[0], label);
    }, {{1, out, random_values(rng, out, 2.0)}}, rep);

    gradient_check("kl", [&](Tape&, const std::vector<Tensor>& v) {
      return kl_divergence(softmax(v[0]), softmax(v[1]));
    }, {{1, out, random_values(rng, out)}, {1, out, random_values(rng, out)}}, rep);
  }
  return rep;
}

// Forward of categorical_straight_through must be an exact one-hot and its
// backward must equal the gradient of the soft path sum(w * softmax(logits)).
struct StraightThroughReport {
  int cases = 0;
  int non_one_hot = 0;
  double worst_abs_error = 0.0;
};

inline StraightThroughReport straight_through_suite(int cases, uint64_t seed) {
  using namespace diff;
  StraightThroughReport rep;
  Rng rng(seed);
  for (int k = 0; k < cases; ++k) {
    const int d = 2 + rng.below(6);
    const auto logits = random_values(rng, d, 3.0);
    const auto w = random_values(rng, d);
    const auto mode = k % 2 == 0 ? SampleMode::sample : SampleMode::argmax;

    Tape hard;
    const auto lh = hard.variable(1, d, logits);
    const auto y = categorical_straight_through(lh, rng, mode);
    int ones = 0;
    bool exact = true;
    for (double v : y.values()) {
      if (v == 1.0) ++ones;
      else if (v != 0.0) exact = false;
    }
    if (!exact || ones != 1) ++rep.non_one_hot;
    hard.backward(sum(mul(y, hard.constant(1, d, w))));

    Tape soft;
    const auto ls = soft.variable(1, d, logits);
    soft.backward(sum(mul(softmax(ls), soft.constant(1, d, w))));

    for (int i = 0; i < d; ++i)
      rep.worst_abs_error = std::max(rep.worst_abs_error, std::abs(lh.grads()[i] - ls.grads()[i]));
    ++rep.cases;
  }
  return rep;
}

}  // namespace emcomm::verify
