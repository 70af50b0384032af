#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "emcomm/concepts.hpp"
#include "emcomm/error.hpp"
#include "emcomm/random.hpp"

namespace emcomm {

// Learning-progress task sampler over the training task classes.
struct CurriculumState {
  std::vector<TaskClass> classes;
  std::vector<double> mean;         // EMA of held-out reward
  std::vector<double> last;         // latest held-out reward
  std::vector<double> progress;     // |last - mean|
  std::vector<double> probability;  // sampling distribution

  explicit CurriculumState(std::vector<TaskClass> cls = {})
      : classes(std::move(cls)),
        mean(classes.size(), 0.0),
        last(classes.size(), 0.0),
        progress(classes.size(), 0.0),
        probability(classes.size(), classes.empty() ? 0.0 : 1.0 / classes.size()) {}

  std::size_t size() const { return classes.size(); }

  TaskClass sample(Rng& rng) const { return classes[rng.categorical(probability)]; }
};

// (1 - eps_mix) * LP / sum(LP) + eps_mix / n; uniform when every LP is zero.
inline std::vector<double> progress_distribution(std::span<const double> lp, double eps_mix) {
  const std::size_t n = lp.size();
  std::vector<double> p(n, 1.0 / n);
  double total = 0.0;
  for (double x : lp) total += x;
  if (total <= 0.0) return p;
  for (std::size_t i = 0; i < n; ++i) p[i] = (1.0 - eps_mix) * lp[i] / total + eps_mix / n;
  return p;
}

inline void update_curriculum(CurriculumState& state, std::span<const double> heldout, double beta, double eps_mix) {
  if (heldout.size() != state.size())
    throw Error(ErrorCode::ShapeMismatch, "curriculum expects " + std::to_string(state.size()) + " held-out rewards, got " +
                                              std::to_string(heldout.size()));
  for (std::size_t i = 0; i < state.size(); ++i) {
    state.mean[i] = beta * state.mean[i] + (1.0 - beta) * heldout[i];
    state.last[i] = heldout[i];
    state.progress[i] = std::abs(heldout[i] - state.mean[i]);
  }
  state.probability = progress_distribution(state.progress, eps_mix);
}

}  // namespace emcomm
