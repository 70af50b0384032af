#pragma once

// Naive re-implementation of the grid dynamics used as a differential oracle
// for emcomm::step. Shares only the state types with gridworld.hpp.

#include <string>
#include <vector>

#include "emcomm/error.hpp"
#include "emcomm/gridworld.hpp"

namespace emcomm {

namespace reference {

// -1 = free, -2 = wall, otherwise object index.
inline int occupant(const GridState& s, int row, int col) {
  if (row < 0 || col < 0 || row >= s.grid_size || col >= s.grid_size) return -2;
  for (int i = 0; i < static_cast<int>(s.objects.size()); ++i)
    if (s.objects[i].position.row == row && s.objects[i].position.col == col) return i;
  return -1;
}

inline bool task_done(const GridState& s, Action action, int moved_object) {
  int target = 0;
  while (!s.objects[target].is_target) ++target;
  const auto& t = s.objects[target].position;
  if (s.task.verb == Verb::walk) {
    const int dr = t.row - s.agent.row;
    const int dc = t.col - s.agent.col;
    return (dr == 0 && (dc == 1 || dc == -1)) || (dc == 0 && (dr == 1 || dr == -1));
  }
  if (moved_object != target) return false;
  return (s.task.verb == Verb::push && action == Action::push) || (s.task.verb == Verb::pull && action == Action::pull);
}

}  // namespace reference

inline StepResult reference_step(const GridState& before, Action action) {
  if (before.done) throw Error(ErrorCode::SteppedAfterDone, "reference: stepped a finished episode");
  GridState s = before;
  std::vector<Force> force(s.objects.size(), Force::none);
  for (std::size_t i = 0; i < s.objects.size(); ++i) force[i] = s.objects[i].force_loaded;

  int moved = -1;
  const int r = s.agent.row;
  const int c = s.agent.col;

  if (action == Action::left || action == Action::right || action == Action::forward || action == Action::backward) {
    int nr = r, nc = c;
    if (action == Action::left) nc = c - 1;
    if (action == Action::right) nc = c + 1;
    if (action == Action::forward) nr = r - 1;
    if (action == Action::backward) nr = r + 1;
    if (reference::occupant(s, nr, nc) == -1) {
      s.agent.row = nr;
      s.agent.col = nc;
    }
    for (auto& f : force) f = Force::none;
  } else if (action == Action::noop) {
    for (auto& f : force) f = Force::none;
  } else {
    // Scan neighbours: up, down, left, right.
    const int dr_list[4] = {-1, 1, 0, 0};
    const int dc_list[4] = {0, 0, -1, 1};
    int which = -1, dr = 0, dc = 0;
    for (int k = 0; k < 4 && which < 0; ++k) {
      const int o = reference::occupant(s, r + dr_list[k], c + dc_list[k]);
      if (o >= 0) {
        which = o;
        dr = dr_list[k];
        dc = dc_list[k];
      }
    }
    const Force wanted = action == Action::push ? Force::push : Force::pull;
    bool feasible = false;
    if (which >= 0) {
      const int orow = r + dr, ocol = c + dc;
      if (action == Action::push)
        feasible = reference::occupant(s, orow + dr, ocol + dc) == -1;
      else
        feasible = reference::occupant(s, r - dr, c - dc) == -1;
    }
    std::vector<Force> next(force.size(), Force::none);
    if (feasible) {
      const bool heavy = s.objects[which].weight == Weight::heavy;
      if (heavy && force[which] != wanted) {
        next[which] = wanted;
      } else {
        moved = which;
        if (action == Action::push) {
          s.objects[which].position.row += dr;
          s.objects[which].position.col += dc;
          s.agent.row += dr;
          s.agent.col += dc;
        } else {
          s.objects[which].position.row = r;
          s.objects[which].position.col = c;
          s.agent.row = r - dr;
          s.agent.col = c - dc;
        }
      }
    }
    force = next;
  }

  for (std::size_t i = 0; i < s.objects.size(); ++i) s.objects[i].force_loaded = force[i];
  s.step = before.step + 1;
  const bool ok = reference::task_done(s, action, moved);
  StepResult out;
  out.reward = ok ? 1 : 0;
  out.done = ok || s.step >= s.t_max;
  s.done = out.done;
  s.reward_last = out.reward;
  out.state = s;
  return out;
}

}  // namespace emcomm
