#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "emcomm/concepts.hpp"
#include "emcomm/error.hpp"
#include "emcomm/random.hpp"

namespace emcomm {

struct Cell {
  int row = 0;
  int col = 0;

  auto operator<=>(const Cell&) const = default;
  Cell operator+(const Cell& o) const { return {row + o.row, col + o.col}; }
  Cell operator-(const Cell& o) const { return {row - o.row, col - o.col}; }
};

inline bool adjacent4(Cell a, Cell b) { return std::abs(a.row - b.row) + std::abs(a.col - b.col) == 1; }

// Movement is absolute: forward = north (row - 1), backward = south.
enum class Action : uint8_t { left, right, forward, backward, push, pull, noop };
inline constexpr int kNumActions = 7;
inline constexpr std::array<std::string_view, kNumActions> kActionNames{"left", "right", "forward", "backward",
                                                                       "push", "pull", "noop"};
inline std::string_view name(Action a) { return kActionNames[static_cast<int>(a)]; }

inline std::optional<Action> parse_action(std::string_view s) {
  for (int i = 0; i < kNumActions; ++i)
    if (kActionNames[i] == s) return static_cast<Action>(i);
  return std::nullopt;
}

inline std::optional<Cell> move_delta(Action a) {
  switch (a) {
    case Action::left: return Cell{0, -1};
    case Action::right: return Cell{0, 1};
    case Action::forward: return Cell{-1, 0};
    case Action::backward: return Cell{1, 0};
    default: return std::nullopt;
  }
}

enum class Force : uint8_t { none, push, pull };
inline constexpr std::array<std::string_view, 3> kForceNames{"none", "push", "pull"};

struct ObjectInstance {
  Color color = Color::red;
  Size size = Size::small;
  Weight weight = Weight::light;
  Shape shape = Shape::square;
  Cell position;
  bool is_target = false;
  Force force_loaded = Force::none;

  bool operator==(const ObjectInstance&) const = default;
};

inline constexpr int kGridSize = 4;
inline constexpr int kDefaultMaxSteps = 30;

struct GridState {
  int grid_size = kGridSize;
  int t_max = kDefaultMaxSteps;
  std::vector<ObjectInstance> objects;
  Cell agent;
  Concept task;
  int step = 0;
  bool done = false;
  int reward_last = 0;

  bool operator==(const GridState&) const = default;

  bool in_bounds(Cell c) const { return c.row >= 0 && c.row < grid_size && c.col >= 0 && c.col < grid_size; }

  int object_at(Cell c) const {
    for (std::size_t i = 0; i < objects.size(); ++i)
      if (objects[i].position == c) return static_cast<int>(i);
    return -1;
  }

  int target_index() const {
    for (std::size_t i = 0; i < objects.size(); ++i)
      if (objects[i].is_target) return static_cast<int>(i);
    return -1;
  }
};

struct StepResult {
  GridState state;
  int reward = 0;
  bool done = false;
};

namespace detail {

inline constexpr std::array<Cell, 4> kInteractionPriority{Cell{-1, 0}, Cell{1, 0}, Cell{0, -1}, Cell{0, 1}};

inline void clear_force(GridState& s) {
  for (auto& o : s.objects) o.force_loaded = Force::none;
}

// Applies push or pull. Returns the index of a displaced object, or -1.
inline int interact(GridState& s, Force verb) {
  int obj = -1;
  Cell dir;
  for (const auto& d : kInteractionPriority) {
    const Cell c = s.agent + d;
    if (!s.in_bounds(c)) continue;
    obj = s.object_at(c);
    if (obj >= 0) {
      dir = d;
      break;
    }
  }
  if (obj < 0) {
    clear_force(s);
    return -1;
  }
  auto& o = s.objects[obj];
  const Cell object_dest = verb == Force::push ? o.position + dir : s.agent;
  const Cell agent_dest = verb == Force::push ? o.position : s.agent - dir;
  const Cell must_be_free = verb == Force::push ? object_dest : agent_dest;
  if (!s.in_bounds(must_be_free) || s.object_at(must_be_free) >= 0) {
    clear_force(s);
    return -1;
  }
  if (o.weight == Weight::heavy && o.force_loaded != verb) {
    clear_force(s);
    o.force_loaded = verb;
    return -1;
  }
  o.position = object_dest;
  s.agent = agent_dest;
  clear_force(s);
  return obj;
}

}  // namespace detail

inline StepResult step(const GridState& state, Action action) {
  if (state.done) throw Error(ErrorCode::SteppedAfterDone, "episode already finished at step " + std::to_string(state.step));
  StepResult out{state, 0, false};
  GridState& s = out.state;

  int displaced = -1;
  Force verb_used = Force::none;
  if (const auto delta = move_delta(action)) {
    const Cell dest = s.agent + *delta;
    if (s.in_bounds(dest) && s.object_at(dest) < 0) s.agent = dest;
    detail::clear_force(s);
  } else if (action == Action::push || action == Action::pull) {
    verb_used = action == Action::push ? Force::push : Force::pull;
    displaced = detail::interact(s, verb_used);
  } else {
    detail::clear_force(s);
  }
  ++s.step;

  const int target = s.target_index();
  bool success = false;
  switch (s.task.verb) {
    case Verb::walk: success = adjacent4(s.agent, s.objects[target].position); break;
    case Verb::push: success = displaced == target && verb_used == Force::push; break;
    case Verb::pull: success = displaced == target && verb_used == Force::pull; break;
  }
  out.reward = success ? 1 : 0;
  out.done = success || s.step >= s.t_max;
  s.done = out.done;
  s.reward_last = out.reward;
  return out;
}

// Attribute tuple of a candidate distractor; position is filled in later.
inline std::vector<ObjectInstance> distractor_candidates(const Concept& task) {
  std::vector<ObjectInstance> out;
  for (int c = 0; c < 4; ++c)
    for (int z = 0; z < 2; ++z)
      for (int w = 0; w < 2; ++w)
        for (int h = 0; h < 4; ++h) {
          ObjectInstance o{static_cast<Color>(c), static_cast<Size>(z), static_cast<Weight>(w), static_cast<Shape>(h),
                            Cell{}, false, Force::none};
          const bool shares = o.color == task.color || o.shape == task.shape;
          const bool identical = o.color == task.color && o.size == task.size && o.weight == task.weight &&
                                 o.shape == task.shape;
          if (shares && !identical) out.push_back(o);
        }
  return out;
}

enum class EpisodeMode : uint8_t { train, test };

inline constexpr int kNumDistractors = 2;

inline GridState generate_episode(Rng& rng, const SplitSpec& split, EpisodeMode mode,
                                  std::optional<TaskClass> task_filter = std::nullopt,
                                  int t_max = kDefaultMaxSteps) {
  const auto& pool = mode == EpisodeMode::train ? split.train_concepts : split.test_concepts;
  std::vector<Concept> eligible;
  for (const auto& c : pool)
    if (!task_filter || task_filter->matches(c)) eligible.push_back(c);
  if (eligible.empty())
    throw Error(ErrorCode::EmptyTaskClass, (task_filter ? task_filter->label() : std::string("any")) + " has no " +
                                               (mode == EpisodeMode::train ? "training" : "test") + " concepts in split " +
                                               std::string(name(split.kind)));

  GridState s;
  s.t_max = t_max;
  s.task = eligible[rng.below(static_cast<int>(eligible.size()))];

  std::array<int, kGridSize * kGridSize> cells{};
  for (int i = 0; i < kGridSize * kGridSize; ++i) cells[i] = i;
  rng.shuffle(std::span<int>(cells));
  auto cell = [](int i) { return Cell{i / kGridSize, i % kGridSize}; };

  ObjectInstance target{s.task.color, s.task.size, s.task.weight, s.task.shape, cell(cells[0]), true, Force::none};
  s.objects.push_back(target);
  const auto candidates = distractor_candidates(s.task);
  for (int d = 0; d < kNumDistractors; ++d) {
    auto o = candidates[rng.below(static_cast<int>(candidates.size()))];
    o.position = cell(cells[1 + d]);
    s.objects.push_back(o);
  }
  s.agent = cell(cells[1 + kNumDistractors]);
  return s;
}

inline constexpr int kGridPlanes = 14;
inline constexpr int kOraclePlanes = 15;

namespace plane {
inline constexpr int object = 0;
inline constexpr int shape = 1;
inline constexpr int color = 5;
inline constexpr int size = 9;
inline constexpr int weight = 11;
inline constexpr int agent = 13;
inline constexpr int target = 14;
}  // namespace plane

// {0,1}^{planes x 4 x 4}, plane-major.
struct GridEncoding {
  int planes = kGridPlanes;
  std::array<uint8_t, kOraclePlanes * kGridSize * kGridSize> bits{};

  uint8_t at(int p, int row, int col) const { return bits[(p * kGridSize + row) * kGridSize + col]; }
  uint8_t& at(int p, int row, int col) { return bits[(p * kGridSize + row) * kGridSize + col]; }
};

inline GridEncoding encode_grid(const GridState& s, bool oracle) {
  GridEncoding g;
  g.planes = oracle ? kOraclePlanes : kGridPlanes;
  for (const auto& o : s.objects) {
    const int r = o.position.row;
    const int c = o.position.col;
    g.at(plane::object, r, c) = 1;
    g.at(plane::shape + static_cast<int>(o.shape), r, c) = 1;
    g.at(plane::color + static_cast<int>(o.color), r, c) = 1;
    g.at(plane::size + static_cast<int>(o.size), r, c) = 1;
    g.at(plane::weight + static_cast<int>(o.weight), r, c) = 1;
    if (oracle && o.is_target) g.at(plane::target, r, c) = 1;
  }
  g.at(plane::agent, s.agent.row, s.agent.col) = 1;
  return g;
}

// Trajectory dump line: step;agent;action;reward;done;objects
// agent is "row,col"; objects are '|'-separated
// "shape,color,size,weight,row,col,is_target,force_loaded".
inline std::string format_transition(const GridState& after, Action action, int reward, bool done) {
  std::string line = std::to_string(after.step) + ";" + std::to_string(after.agent.row) + "," +
                     std::to_string(after.agent.col) + ";" + std::string(name(action)) + ";" +
                     std::to_string(reward) + ";" + (done ? "1" : "0") + ";";
  for (std::size_t i = 0; i < after.objects.size(); ++i) {
    const auto& o = after.objects[i];
    if (i) line += "|";
    line.append(name(o.shape)).append(",").append(name(o.color)).append(",").append(name(o.size));
    line.append(",").append(name(o.weight)).append(",").append(std::to_string(o.position.row)).append(",");
    line.append(std::to_string(o.position.col)).append(",").append(o.is_target ? "1" : "0").append(",");
    line.append(kForceNames[static_cast<int>(o.force_loaded)]);
  }
  return line;
}

}  // namespace emcomm
