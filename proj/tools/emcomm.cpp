// emcomm: train, evaluate and inspect speaker/listener runs.
#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "emcomm/trainer.hpp"
#include "emcomm/verify.hpp"

namespace fs = std::filesystem;
using namespace emcomm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerify = 2;
constexpr int kExitArtifact = 3;

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::MissingArtifact:
    case ErrorCode::CorruptCheckpoint: return kExitArtifact;
    default: return kExitUsage;
  }
}

// A finished run: its echoed config and restored parameters.
struct LoadedRun {
  fs::path dir;
  Agents agents;
};

LoadedRun load_run(const std::string& path) {
  fs::path p(path);
  if (!fs::exists(p)) throw Error(ErrorCode::MissingArtifact, "no such run " + path);
  fs::path dir = fs::is_directory(p) ? p : p.parent_path();
  fs::path ckpt = fs::is_directory(p) ? p / files::checkpoint : p;
  if (dir.empty()) dir = ".";
  const auto cfg_path = dir / files::config;
  if (!fs::exists(cfg_path)) throw Error(ErrorCode::MissingArtifact, "no " + cfg_path.string());
  if (!fs::exists(ckpt)) throw Error(ErrorCode::MissingArtifact, "no " + ckpt.string());
  auto cfg = load_config(cfg_path.string());
  validate(cfg);
  LoadedRun run{dir, Agents(cfg)};
  restore_checkpoint(run.agents, diff::read_checkpoint(ckpt.string()));
  return run;
}

std::optional<SplitKind> parse_split(const std::string& s) {
  for (std::size_t i = 0; i < kSplitNames.size(); ++i)
    if (kSplitNames[i] == s) return static_cast<SplitKind>(i);
  return std::nullopt;
}

// ---- train ----

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<uint64_t> seed;
  std::optional<std::string> split, speaker, task, out;
  std::optional<double> lambda1, lambda3;
  std::optional<int> dm, nm, episodes;
  bool oracle = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& args) {
  RunConfig cfg;
  if (!args.config.empty()) {
    if (!fs::exists(args.config)) throw Error(ErrorCode::ConfigInvalid, "cannot read config " + args.config);
    cfg = load_config(args.config);
  }
  auto set = [&](const std::string& key, const std::string& value) { set_config_value(cfg, key, value); };
  if (args.seed) set("seed", std::to_string(*args.seed));
  if (args.split) set("split", *args.split);
  if (args.speaker) set("speaker", *args.speaker);
  if (args.task) set("tasks", *args.task);
  if (args.lambda1) set("lambda1", config_detail::format_double(*args.lambda1));
  if (args.lambda3) set("lambda3", config_detail::format_double(*args.lambda3));
  if (args.dm) set("d_m", std::to_string(*args.dm));
  if (args.nm) set("n_m", std::to_string(*args.nm));
  if (args.episodes) set("episodes", std::to_string(*args.episodes));
  if (args.oracle) {
    set("oracle_listener", "true");
    if (!args.speaker) set("speaker", "none");
  }
  if (args.out) set("out_dir", *args.out);
  for (const auto& kv : args.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::ConfigInvalid, "--set expects key=value, got '" + kv + "'");
    set(config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
  }
  validate(cfg);

  Agents agents(cfg);
  const auto result = train(agents, {args.quiet ? nullptr : &std::cerr, true});
  std::cout << "out_dir " << cfg.out_dir << "\n";
  std::cout << "topsim " << fmt(result.topsim.value) << (result.topsim.degenerate ? " degenerate" : "") << "\n";
  std::cout << format_report(result.heldout);
  return kExitOk;
}

// ---- eval ----

int cmd_eval(const std::string& run_path, const std::string& split_name, int episodes, uint64_t seed,
             const std::string& actions) {
  auto run = load_run(run_path);
  auto& a = run.agents;
  SplitKind kind = a.cfg.split;
  if (!split_name.empty()) {
    const auto k = parse_split(split_name);
    if (!k) throw Error(ErrorCode::ConfigInvalid, "unknown split '" + split_name + "'");
    kind = *k;
  }
  EvalActions mode = a.cfg.eval_actions;
  if (actions == "argmax") mode = EvalActions::argmax;
  else if (actions == "sample") mode = EvalActions::sample;
  else if (!actions.empty()) throw Error(ErrorCode::ConfigInvalid, "--actions expects sample or argmax");

  const auto split = make_split(kind);
  // Test concepts when the split holds some out, otherwise fresh layouts of the training classes.
  const auto acc = split.test_concepts.empty()
                       ? evaluate(a, split, EpisodeMode::train, training_classes(split, a.cfg.tasks), episodes, seed,
                                  mode == EvalActions::sample)
                       : evaluate_zero_shot(a, split, episodes, seed, mode);
  std::cout << format_report(acc);
  return kExitOk;
}

// ---- topsim ----

int cmd_topsim(const std::string& run_path, bool table) {
  auto run = load_run(run_path);
  const auto lang = agent_language(run.agents);
  const auto ts = topsim(lang);
  std::cout << "topsim " << fmt(ts.value) << (ts.degenerate ? " degenerate" : "") << "\n";
  std::cout << "collisions " << collision_count(lang) << "\n";
  if (table) std::cout << format_language_table(lang);
  return kExitOk;
}

// ---- rollout ----

int cmd_rollout(const std::string& run_path, uint64_t seed, int episodes, const std::string& task, bool sample,
                const std::string& mode_name) {
  auto run = load_run(run_path);
  auto& a = run.agents;
  std::optional<TaskClass> filter;
  if (!task.empty()) {
    filter = parse_task_class(task);
    if (!filter) throw Error(ErrorCode::ConfigInvalid, "unknown task class '" + task + "'");
  }
  const auto split = make_split(a.cfg.split);
  EpisodeMode mode = EpisodeMode::train;
  if (mode_name == "test") mode = EpisodeMode::test;
  else if (mode_name != "train") throw Error(ErrorCode::ConfigInvalid, "--mode expects train or test");

  Rng rng(seed);
  diff::Tape tape;
  tape.set_grad_enabled(false);
  for (int e = 0; e < episodes; ++e) {
    const auto s0 = generate_episode(rng, split, mode, filter, a.cfg.t_max);
    tape.reset();
    const auto tr = run_episode(tape, a, s0, {ActMode::eval, false, sample}, rng);
    std::cout << "# episode " << e << " task " << render_instruction(tr.instruction) << " message " << tr.message.to_string()
              << " arm " << static_cast<int>(tr.arm) << "\n";
    std::cout << format_transition(s0, Action::noop, 0, false) << "\n";
    GridState s = s0;
    for (const auto& st : tr.steps) {
      const auto res = step(s, st.action);
      std::cout << format_transition(res.state, st.action, res.reward, res.done) << "\n";
      s = res.state;
    }
  }
  return kExitOk;
}

// ---- plot ----

struct Series {
  std::string label;
  std::vector<double> episode, success, topsim;
};

Series read_metrics(const std::string& path, int window) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::MissingArtifact, "cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw Error(ErrorCode::CorruptCheckpoint, path + " is empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, ',');) header.push_back(col);
  }
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::CorruptCheckpoint, path + " has no column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_ep = column("episode"), c_succ = column("success"), c_ts = column("topsim");

  Series s;
  s.label = fs::path(path).parent_path().filename().string();
  if (s.label.empty()) s.label = path;
  std::vector<double> raw;
  double acc = 0.0;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != header.size()) throw Error(ErrorCode::CorruptCheckpoint, path + ": ragged row");
    const double succ = std::stod(cells[c_succ]);
    raw.push_back(succ);
    acc += succ;
    if (static_cast<int>(raw.size()) > window) acc -= raw[raw.size() - 1 - window];
    s.episode.push_back(std::stod(cells[c_ep]));
    s.success.push_back(acc / std::min<double>(raw.size(), window));
    s.topsim.push_back(std::stod(cells[c_ts]));
  }
  return s;
}

std::string svg_panel(const std::vector<Series>& all, bool topsim_panel, double x0, const std::string& title) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  const double w = 420, h = 300, left = 50, top = 30;
  double xmax = 1.0, ymin = 0.0, ymax = 1.0;
  for (const auto& s : all) {
    if (!s.episode.empty()) xmax = std::max(xmax, s.episode.back() + 1);
    for (double v : topsim_panel ? s.topsim : s.success) ymin = std::min(ymin, v);
  }
  std::ostringstream o;
  o << "<g transform='translate(" << x0 << ",0)'>\n";
  o << "<text x='" << left + w / 2 << "' y='18' text-anchor='middle' font-size='14'>" << title << "</text>\n";
  o << "<rect x='" << left << "' y='" << top << "' width='" << w << "' height='" << h << "' fill='none' stroke='#444'/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = ymin + (ymax - ymin) * k / 4.0;
    const double y = top + h - (v - ymin) / (ymax - ymin) * h;
    o << "<text x='" << left - 6 << "' y='" << y + 4 << "' text-anchor='end' font-size='10'>" << fmt(v).substr(0, 4)
      << "</text>\n";
  }
  o << "<text x='" << left << "' y='" << top + h + 16 << "' font-size='10'>0</text>\n";
  o << "<text x='" << left + w << "' y='" << top + h + 16 << "' text-anchor='end' font-size='10'>"
    << static_cast<long>(xmax) << " episodes</text>\n";
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& s = all[i];
    const auto& ys = topsim_panel ? s.topsim : s.success;
    const std::size_t stride = std::max<std::size_t>(1, ys.size() / 800);
    o << "<polyline fill='none' stroke-width='1.5' stroke='" << colors[i % 6] << "' points='";
    for (std::size_t k = 0; k < ys.size(); k += stride)
      o << left + s.episode[k] / xmax * w << "," << top + h - (ys[k] - ymin) / (ymax - ymin) * h << " ";
    o << "'/>\n";
    o << "<text x='" << left + 8 << "' y='" << top + 16 + 14 * i << "' font-size='11' fill='" << colors[i % 6] << "'>"
      << s.label << "</text>\n";
  }
  o << "</g>\n";
  return o.str();
}

int cmd_plot(const std::vector<std::string>& csvs, const std::string& out, int window) {
  std::vector<Series> all;
  for (const auto& p : csvs) all.push_back(read_metrics(p, window));
  std::ofstream f(out);
  if (!f) throw Error(ErrorCode::MissingArtifact, "cannot write " + out);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='1000' height='360' font-family='sans-serif'>\n";
  f << "<rect width='1000' height='360' fill='white'/>\n";
  f << svg_panel(all, false, 0, "training success (rolling mean of " + std::to_string(window) + ")");
  f << svg_panel(all, true, 500, "topsim");
  f << "</svg>\n";
  std::cout << "wrote " << out << "\n";
  return kExitOk;
}

// ---- verify ----

int cmd_verify(uint64_t transitions, int graphs, uint64_t seed) {
  bool ok = true;
  auto line = [&](const std::string& name, bool pass, const std::string& detail) {
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << name << " " << detail << "\n";
  };
  const auto small = verify::differential_small_suite();
  line("dynamics_small", small.mismatches == 0,
       std::to_string(small.transitions) + " transitions, " + std::to_string(small.mismatches) + " mismatches");
  const auto rnd = verify::differential_random(transitions, seed);
  line("dynamics_random", rnd.mismatches == 0,
       std::to_string(rnd.transitions) + " transitions, " + std::to_string(rnd.mismatches) + " mismatches");
  const auto grad = verify::gradient_suite(graphs, seed);
  std::ostringstream g;
  g << grad.checks << " gradients, max rel err " << grad.worst_rel_error;
  line("gradients", grad.failures == 0, g.str());
  const auto st = verify::straight_through_suite(200, seed);
  std::ostringstream s;
  s << st.cases << " cases, max grad error " << st.worst_abs_error;
  line("straight_through", st.non_one_hot == 0 && st.worst_abs_error < 1e-9, s.str());
  return ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speaker/listener signalling game in a 4x4 grid world"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a speaker/listener pair");
  train_cmd->add_option("--config", ta.config, "flat key = value config file");
  train_cmd->add_option("--seed", ta.seed);
  train_cmd->add_option("--split", ta.split, "none | visual | numeral");
  train_cmd->add_option("--speaker", ta.speaker, "learned | perfect | none");
  train_cmd->add_option("--task", ta.task, "all | walk | push | pull");
  train_cmd->add_option("--lambda1", ta.lambda1, "coverage reward weight");
  train_cmd->add_option("--lambda3", ta.lambda3, "influence reward weight");
  train_cmd->add_option("--dm", ta.dm, "alphabet size");
  train_cmd->add_option("--nm", ta.nm, "message length");
  train_cmd->add_option("--episodes", ta.episodes);
  train_cmd->add_flag("--oracle", ta.oracle, "oracle listener (target plane, no speaker unless --speaker is given)");
  train_cmd->add_option("--out", ta.out, "output directory");
  train_cmd->add_option("--set", ta.sets, "any config key, as key=value")->take_all();
  train_cmd->add_flag("--quiet", ta.quiet, "no progress log on stderr");

  std::string run_path, split, actions, task, mode = "train";
  int episodes = 500;
  uint64_t seed = 1;
  bool table = false, sample = false;

  auto* eval_cmd = app.add_subcommand("eval", "accuracy report for a trained run");
  eval_cmd->add_option("run", run_path, "run directory or checkpoint file")->required();
  eval_cmd->add_option("--split", split, "split to evaluate (default: the run's own)");
  eval_cmd->add_option("--episodes", episodes, "episodes per task class");
  eval_cmd->add_option("--seed", seed);
  eval_cmd->add_option("--actions", actions, "sample | argmax (default: the run's eval_actions)");

  auto* topsim_cmd = app.add_subcommand("topsim", "topographic similarity of a run's language");
  topsim_cmd->add_option("run", run_path, "run directory or checkpoint file")->required();
  topsim_cmd->add_flag("--table", table, "also print the concept -> message table");

  int rollouts = 1;
  auto* rollout_cmd = app.add_subcommand("rollout", "dump evaluation trajectories");
  rollout_cmd->add_option("run", run_path, "run directory or checkpoint file")->required();
  rollout_cmd->add_option("--seed", seed);
  rollout_cmd->add_option("--episodes", rollouts);
  rollout_cmd->add_option("--task", task, "task class, e.g. pull_heavy");
  rollout_cmd->add_option("--mode", mode, "train | test concepts");
  rollout_cmd->add_flag("--sample", sample, "sample listener actions instead of argmax");

  std::vector<std::string> csvs;
  std::string out = "curves.svg";
  int window = 500;
  auto* plot_cmd = app.add_subcommand("plot", "success and topsim curves from metrics CSVs (SVG)");
  plot_cmd->add_option("csv", csvs, "metrics.csv files")->required();
  plot_cmd->add_option("--out", out);
  plot_cmd->add_option("--window", window, "rolling window for success")->check(CLI::PositiveNumber);

  uint64_t transitions = 100000;
  int graphs = 100;
  auto* verify_cmd = app.add_subcommand("verify", "dynamics differential oracle and gradient checks");
  verify_cmd->add_option("--transitions", transitions, "random 4x4 transitions");
  verify_cmd->add_option("--graphs", graphs, "random gradient-check graphs");
  verify_cmd->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_eval(run_path, split, episodes, seed, actions);
    if (*topsim_cmd) return cmd_topsim(run_path, table);
    if (*rollout_cmd) return cmd_rollout(run_path, seed, rollouts, task, sample, mode);
    if (*plot_cmd) return cmd_plot(csvs, out, window);
    if (*verify_cmd) return cmd_verify(transitions, graphs, seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
