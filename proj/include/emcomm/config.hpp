#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "emcomm/concepts.hpp"
#include "emcomm/error.hpp"

namespace emcomm {

enum class SpeakerKind : uint8_t { learned, perfect, none };
inline constexpr std::array<std::string_view, 3> kSpeakerKindNames{"learned", "perfect", "none"};
inline std::string_view name(SpeakerKind k) { return kSpeakerKindNames[static_cast<int>(k)]; }

// Which verbs are trained: all task classes or one verb's classes.
enum class TaskFilter : uint8_t { all, walk, push, pull };
inline constexpr std::array<std::string_view, 4> kTaskFilterNames{"all", "walk", "push", "pull"};
inline std::string_view name(TaskFilter f) { return kTaskFilterNames[static_cast<int>(f)]; }

// Listener action choice during evaluation; the speaker always decodes by argmax.
enum class EvalActions : uint8_t { sample, argmax };
inline constexpr std::array<std::string_view, 2> kEvalActionNames{"sample", "argmax"};
// Return credited to the speaker's symbols: discounted from step 0, or the plain episode sum.
enum class SpeakerReturn : uint8_t { discounted, episode };
inline constexpr std::array<std::string_view, 2> kSpeakerReturnNames{"discounted", "episode"};

struct RunConfig {
  uint64_t seed = 1;
  SplitKind split = SplitKind::none;
  SpeakerKind speaker = SpeakerKind::learned;
  bool oracle_listener = false;
  TaskFilter tasks = TaskFilter::all;

  int n_m = 5;
  int d_m = 4;
  int d_h = 64;
  int d_g = 32;

  double lambda1 = 1.0;
  double lambda3 = 0.05;
  int k = 5;
  bool env_reward = true;

  double gamma = 0.95;
  int t_max = 30;
  double lr = 1e-3;
  double disc_lr = 1e-2;
  int batch_size = 8;
  double baseline_beta = 0.95;
  double entropy = 0.0;  // listener entropy bonus
  SpeakerReturn speaker_return = SpeakerReturn::episode;
  bool straight_through = true;

  double curriculum_beta = 0.9;
  double curriculum_eps = 0.2;
  int eval_every = 100;
  int heldout_episodes = 20;
  EvalActions eval_actions = EvalActions::sample;

  int buffer_capacity = 10000;
  int disc_every = 50;
  int disc_batches = 10;
  int disc_batch_size = 64;

  int episodes = 50000;
  int checkpoint_every = 0;
  std::string out_dir = "run";
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

[[noreturn]] inline void bad(const std::string& key, const std::string& value, const std::string& why) {
  throw Error(ErrorCode::ConfigInvalid, key + " = '" + value + "': " + why);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto r = std::from_chars(value.data(), value.data() + value.size(), out);
  if (r.ec != std::errc() || r.ptr != value.data() + value.size()) bad(key, value, "not a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad(key, value, "expected true or false");
}

template <std::size_t N>
int parse_enum(const std::string& key, const std::string& value, const std::array<std::string_view, N>& names) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == value) return static_cast<int>(i);
  std::string allowed;
  for (auto n : names) allowed += (allowed.empty() ? "" : "|") + std::string(n);
  bad(key, value, "expected one of " + allowed);
}

// Field table: name, setter, printer. Order defines the canonical echo.
struct Field {
  std::string_view key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool hashed = true;
};

#define EMCOMM_INT_FIELD(name, type)                                                                            \
  Field {                                                                                                        \
    #name, [](RunConfig& c, const std::string& v) { c.name = parse_number<type>(#name, v); },                    \
        [](const RunConfig& c) { return std::to_string(c.name); }                                                \
  }
#define EMCOMM_REAL_FIELD(name)                                                                                 \
  Field {                                                                                                        \
    #name, [](RunConfig& c, const std::string& v) { c.name = parse_number<double>(#name, v); },                  \
        [](const RunConfig& c) { return format_double(c.name); }                                                 \
  }
#define EMCOMM_BOOL_FIELD(name)                                                                                 \
  Field {                                                                                                        \
    #name, [](RunConfig& c, const std::string& v) { c.name = parse_bool(#name, v); },                            \
        [](const RunConfig& c) { return std::string(c.name ? "true" : "false"); }                               \
  }
#define EMCOMM_ENUM_FIELD(name, type, names)                                                                    \
  Field {                                                                                                        \
    #name, [](RunConfig& c, const std::string& v) { c.name = static_cast<type>(parse_enum(#name, v, names)); }, \
        [](const RunConfig& c) { return std::string(names[static_cast<int>(c.name)]); }                          \
  }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      EMCOMM_INT_FIELD(seed, uint64_t),
      EMCOMM_ENUM_FIELD(split, SplitKind, kSplitNames),
      EMCOMM_ENUM_FIELD(speaker, SpeakerKind, kSpeakerKindNames),
      EMCOMM_BOOL_FIELD(oracle_listener),
      EMCOMM_ENUM_FIELD(tasks, TaskFilter, kTaskFilterNames),
      EMCOMM_INT_FIELD(n_m, int),
      EMCOMM_INT_FIELD(d_m, int),
      EMCOMM_INT_FIELD(d_h, int),
      EMCOMM_INT_FIELD(d_g, int),
      EMCOMM_REAL_FIELD(lambda1),
      EMCOMM_REAL_FIELD(lambda3),
      EMCOMM_INT_FIELD(k, int),
      EMCOMM_BOOL_FIELD(env_reward),
      EMCOMM_REAL_FIELD(gamma),
      EMCOMM_INT_FIELD(t_max, int),
      EMCOMM_REAL_FIELD(lr),
      EMCOMM_REAL_FIELD(disc_lr),
      EMCOMM_INT_FIELD(batch_size, int),
      EMCOMM_REAL_FIELD(baseline_beta),
      EMCOMM_REAL_FIELD(entropy),
      EMCOMM_ENUM_FIELD(speaker_return, SpeakerReturn, kSpeakerReturnNames),
      EMCOMM_BOOL_FIELD(straight_through),
      EMCOMM_REAL_FIELD(curriculum_beta),
      EMCOMM_REAL_FIELD(curriculum_eps),
      EMCOMM_INT_FIELD(eval_every, int),
      EMCOMM_INT_FIELD(heldout_episodes, int),
      EMCOMM_ENUM_FIELD(eval_actions, EvalActions, kEvalActionNames),
      EMCOMM_INT_FIELD(buffer_capacity, int),
      EMCOMM_INT_FIELD(disc_every, int),
      EMCOMM_INT_FIELD(disc_batches, int),
      EMCOMM_INT_FIELD(disc_batch_size, int),
      EMCOMM_INT_FIELD(episodes, int),
      EMCOMM_INT_FIELD(checkpoint_every, int),
      Field{"out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
            [](const RunConfig& c) { return c.out_dir; }, false},
  };
  return table;
}

#undef EMCOMM_INT_FIELD
#undef EMCOMM_REAL_FIELD
#undef EMCOMM_BOOL_FIELD
#undef EMCOMM_ENUM_FIELD

}  // namespace config_detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  throw Error(ErrorCode::ConfigInvalid, "unknown key '" + key + "'");
}

inline void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::ConfigInvalid, what);
  };
  need(c.d_m >= 2, "d_m must be >= 2, got " + std::to_string(c.d_m));
  need(c.n_m >= 1, "n_m must be >= 1, got " + std::to_string(c.n_m));
  need(c.d_h >= 1 && c.d_g >= 1, "d_h and d_g must be >= 1");
  need(c.lambda1 >= 0.0 && c.lambda3 >= 0.0, "lambda1 and lambda3 must be >= 0");
  need(c.entropy >= 0.0, "entropy must be >= 0");
  need(c.k >= 1, "k must be >= 1");
  need(c.gamma > 0.0 && c.gamma <= 1.0, "gamma must be in (0, 1]");
  need(c.t_max >= 1, "t_max must be >= 1");
  need(c.lr > 0.0 && c.disc_lr > 0.0, "learning rates must be > 0");
  need(c.batch_size >= 1, "batch_size must be >= 1");
  need(c.baseline_beta >= 0.0 && c.baseline_beta < 1.0, "baseline_beta must be in [0, 1)");
  need(c.curriculum_beta >= 0.0 && c.curriculum_beta < 1.0, "curriculum_beta must be in [0, 1)");
  need(c.curriculum_eps >= 0.0 && c.curriculum_eps <= 1.0, "curriculum_eps must be in [0, 1]");
  need(c.eval_every >= 1 && c.heldout_episodes >= 1, "eval_every and heldout_episodes must be >= 1");
  need(c.buffer_capacity >= 1, "buffer_capacity must be >= 1");
  need(c.disc_every >= 1 && c.disc_batches >= 0 && c.disc_batch_size >= 1, "bad discriminator schedule");
  need(c.episodes >= 0 && c.checkpoint_every >= 0, "episodes and checkpoint_every must be >= 0");
  need(c.speaker != SpeakerKind::perfect || (c.d_m >= 4 && c.n_m == kNumSlots),
       "perfect speaker needs d_m >= 4 and n_m = 5");
  need(!c.out_dir.empty(), "out_dir must not be empty");
}

// Flat "key = value" lines; '#' starts a comment.
inline RunConfig parse_config(const std::string& text, RunConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = config_detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    try {
      if (eq == std::string::npos) throw Error(ErrorCode::ConfigInvalid, "expected 'key = value'");
      set_config_value(cfg, config_detail::trim(body.substr(0, eq)), config_detail::trim(body.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(ErrorCode::ConfigInvalid, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path, RunConfig cfg = {}) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::ConfigInvalid, "cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), cfg);
}

inline std::string echo_config(const RunConfig& cfg, bool hashed_only = false) {
  std::string out;
  for (const auto& f : config_detail::fields())
    if (!hashed_only || f.hashed) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

// FNV-1a over the canonical echo of every run-defining key (out_dir excluded).
inline uint64_t config_hash(const RunConfig& cfg) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : echo_config(cfg, true)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace emcomm
