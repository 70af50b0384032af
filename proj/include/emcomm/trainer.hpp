#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "emcomm/concepts.hpp"
#include "emcomm/config.hpp"
#include "emcomm/curriculum.hpp"
#include "emcomm/diffcore.hpp"
#include "emcomm/gridworld.hpp"
#include "emcomm/intrinsic.hpp"
#include "emcomm/listener.hpp"
#include "emcomm/params.hpp"
#include "emcomm/speaker.hpp"
#include "emcomm/topsim.hpp"

namespace emcomm {

// RNG streams derived from the run seed.
namespace stream {
inline constexpr uint64_t init = 0;
inline constexpr uint64_t train = 1;
inline constexpr uint64_t discriminator = 2;
inline constexpr uint64_t heldout = 3;
}  // namespace stream

// Speaker, listener and discriminator for one run.
struct Agents {
  RunConfig cfg;
  ChannelConfig channel;
  std::optional<SpeakerModel> speaker;
  ListenerModel listener;
  Discriminator disc;

  explicit Agents(const RunConfig& c) : Agents(c, Rng(derive_seed(c.seed, stream::init))) {}

 private:
  Agents(const RunConfig& c, Rng rng)
      : cfg(c),
        channel{c.n_m, c.d_m},
        speaker(c.speaker == SpeakerKind::learned
                    ? std::optional<SpeakerModel>(SpeakerModel(channel, c.d_h, rng, {.learning_rate = c.lr}))
                    : std::nullopt),
        listener(ListenerConfig{c.oracle_listener ? kOraclePlanes : kGridPlanes, channel.width(), c.d_g, c.d_h}, rng,
                 {.learning_rate = c.lr}),
        disc(channel.width(), rng, {.learning_rate = c.disc_lr}) {}
};

inline LanguageTable agent_language(Agents& a) {
  switch (a.cfg.speaker) {
    case SpeakerKind::learned: return language_table(*a.speaker);
    case SpeakerKind::perfect: return perfect_language_table(a.channel);
    case SpeakerKind::none: break;
  }
  return LanguageTable(kNumConcepts, Message{std::vector<int>(a.channel.n_m, 0), a.channel.d_m});
}

struct StepRecord {
  Action action = Action::noop;
  double r_env = 0.0;
  double r_inf = 0.0;
  double reward = 0.0;  // what the learner sees
  double ret = 0.0;     // discounted return from this step
  diff::Tensor log_prob;
  diff::Tensor neg_entropy;  // set only when entropy regularization is on
};

struct Trajectory {
  Concept instruction;
  TaskClass task;
  GridState initial;
  Message message;
  std::vector<diff::Tensor> symbol_log_probs;  // empty unless the speaker is learned
  diff::Tensor master_log_prob;
  diff::Tensor master_neg_entropy;
  Arm arm = Arm::null;
  std::vector<StepRecord> steps;
  double r_env = 0.0;
  double r_cov = 0.0;
  double r_inf_sum = 0.0;
  double episode_return = 0.0;  // undiscounted sum of learner rewards
  bool success = false;
};

// return_t = sum_{t' >= t} gamma^(t' - t) r_t'
inline std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
  std::vector<double> out(rewards.size(), 0.0);
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    out[i] = acc;
  }
  return out;
}

struct EpisodeOptions {
  ActMode mode = ActMode::train;
  bool intrinsic = true;       // compute coverage and influence rewards
  bool sample_actions = false;  // in eval mode, sample listener actions instead of argmax
};

inline Trajectory run_episode(diff::Tape& tape, Agents& a, const GridState& initial, const EpisodeOptions& opt, Rng& rng) {
  const RunConfig& cfg = a.cfg;
  Trajectory tr;
  tr.instruction = initial.task;
  tr.task = task_class_of(initial.task);
  tr.initial = initial;

  diff::Tensor bits;
  std::vector<std::vector<double>> symbol_probs;
  const bool learned = cfg.speaker == SpeakerKind::learned;
  switch (cfg.speaker) {
    case SpeakerKind::learned: {
      auto out = speak(tape, *a.speaker, tr.instruction, rng, opt.mode == ActMode::train ? SpeakMode::train : SpeakMode::eval);
      tr.message = out.message;
      tr.symbol_log_probs = std::move(out.log_probs);
      bits = cfg.straight_through ? out.one_hots : tape.constant(1, a.channel.width(), out.one_hots.values());
      break;
    }
    case SpeakerKind::perfect:
      tr.message = perfect_speak(tr.instruction, a.channel);
      bits = tape.constant(1, a.channel.width(), tr.message.bits());
      break;
    case SpeakerKind::none:
      tr.message = Message{std::vector<int>(a.channel.n_m, 0), a.channel.d_m};
      bits = tape.zeros(1, a.channel.width());
      break;
  }

  const bool influence = learned && opt.intrinsic && cfg.lambda3 > 0.0;
  const bool coverage = learned && opt.intrinsic && cfg.lambda1 > 0.0;
  FrozenFeatures first;
  diff::Tape scratch;
  InfluenceCache cache;
  if (influence) {
    symbol_probs = a.speaker->symbol_probabilities(tr.instruction);
    first = freeze_features(a.listener, encode_grid(initial, cfg.oracle_listener), scratch);
  }

  const bool regularize = opt.mode == ActMode::train && cfg.entropy > 0.0 && tape.grad_enabled();
  ListenerEpisode ep(tape, a.listener, bits);
  GridState s = initial;
  while (!s.done) {
    const auto obs = encode_grid(s, cfg.oracle_listener);
    StepRecord rec;
    if (influence) {
      cache.next_step();
      const auto current = s.step == 0 ? first : freeze_features(a.listener, obs, scratch);
      rec.r_inf = influence_reward(a.listener, first, current, tr.message, symbol_probs, cfg.k, cfg.lambda3, rng, scratch,
                                   &cache);
    }
    const auto out = ep.act(obs, rng, opt.sample_actions ? ActMode::train : opt.mode);
    const auto res = step(s, out.primitive);
    rec.action = out.primitive;
    rec.r_env = res.reward;
    rec.log_prob = out.action_log_prob;
    if (regularize) rec.neg_entropy = neg_entropy(out.action_log_softmax);
    rec.reward = (cfg.env_reward ? rec.r_env : 0.0) + rec.r_inf;
    tr.r_env += rec.r_env;
    tr.r_inf_sum += rec.r_inf;
    tr.steps.push_back(rec);
    s = res.state;
  }
  tr.success = tr.r_env > 0.0;
  tr.master_log_prob = ep.master().log_prob;
  tr.arm = ep.master().arm;
  if (regularize) tr.master_neg_entropy = neg_entropy(ep.master().log_softmax);
  if (coverage) {
    tr.r_cov = coverage_reward(tr.instruction, tr.message, a.disc, cfg.lambda1);
    tr.steps.back().reward += tr.r_cov;
  }
  std::vector<double> rewards;
  for (const auto& r : tr.steps) {
    rewards.push_back(r.reward);
    tr.episode_return += r.reward;
  }
  const auto ret = discounted_returns(rewards, cfg.gamma);
  for (std::size_t i = 0; i < ret.size(); ++i) tr.steps[i].ret = ret[i];
  return tr;
}

// EMA of returns per (task class, step index).
class Baselines {
 public:
  explicit Baselines(int t_max = kDefaultMaxSteps)
      : value_(kNumTaskClasses, std::vector<double>(t_max + 1, 0.0)),
        seen_(kNumTaskClasses, std::vector<char>(t_max + 1, 0)),
        t_max_(t_max) {}

  double get(TaskClass c, int t) const { return value_[c.index()][t]; }
  // speaker baseline for the undiscounted episode return
  double get_episode(TaskClass c) const { return value_[c.index()][t_max_]; }

  void update(TaskClass c, int t, double ret, double beta) {
    double& v = value_[c.index()][t];
    if (!seen_[c.index()][t]) {
      v = ret;
      seen_[c.index()][t] = 1;
    } else {
      v = beta * v + (1.0 - beta) * ret;
    }
  }
  void update_episode(TaskClass c, double ret, double beta) { update(c, t_max_, ret, beta); }

 private:
  std::vector<std::vector<double>> value_;
  std::vector<std::vector<char>> seen_;
  int t_max_;
};

struct PolicyTerm {
  diff::Tensor log_prob;
  double advantage = 0.0;
};

// The master choice gets the discounted return from step 0; the speaker the
// same, or the undiscounted episode sum (it acts once, outside the episode).
inline void append_policy_terms(const Trajectory& tr, const Baselines& b, std::vector<PolicyTerm>& out,
                                SpeakerReturn speaker_return = SpeakerReturn::discounted) {
  const double adv0 = tr.steps.front().ret - b.get(tr.task, 0);
  const double adv_speaker =
      speaker_return == SpeakerReturn::episode ? tr.episode_return - b.get_episode(tr.task) : adv0;
  for (const auto& lp : tr.symbol_log_probs) out.push_back({lp, adv_speaker});
  out.push_back({tr.master_log_prob, adv0});
  for (std::size_t t = 0; t < tr.steps.size(); ++t)
    out.push_back({tr.steps[t].log_prob, tr.steps[t].ret - b.get(tr.task, static_cast<int>(t))});
}

// Surrogate whose gradient is -scale * sum advantage * grad log pi.
inline diff::Tensor reinforce_loss(std::span<const PolicyTerm> terms, double scale) {
  std::vector<diff::Tensor> lp;
  std::vector<double> coeff;
  for (const auto& t : terms) {
    lp.push_back(t.log_prob);
    coeff.push_back(-scale * t.advantage);
  }
  return diff::combine(lp, coeff);
}

struct UpdateStats {
  double surrogate = 0.0;
  std::size_t terms = 0;
};

inline UpdateStats reinforce_update(diff::Tape& tape, std::span<const Trajectory> batch, Agents& a, Baselines& baselines) {
  UpdateStats stats;
  if (batch.empty()) return stats;
  std::vector<PolicyTerm> terms;
  for (const auto& tr : batch) append_policy_terms(tr, baselines, terms, a.cfg.speaker_return);
  auto loss = reinforce_loss(terms, 1.0 / batch.size());
  if (a.cfg.entropy > 0.0) {
    std::vector<diff::Tensor> parts{loss};
    std::vector<double> coeff{1.0};
    const double c = a.cfg.entropy / batch.size();
    for (const auto& tr : batch) {
      if (tr.master_neg_entropy.valid()) {
        parts.push_back(tr.master_neg_entropy);
        coeff.push_back(c);
      }
      for (const auto& st : tr.steps)
        if (st.neg_entropy.valid()) {
          parts.push_back(st.neg_entropy);
          coeff.push_back(c);
        }
    }
    loss = diff::combine(parts, coeff);
  }
  stats.surrogate = loss.value();
  stats.terms = terms.size();
  tape.backward(loss);
  if (a.speaker) a.speaker->store().optimize_step();
  a.listener.store().optimize_step();
  for (const auto& tr : batch) {
    for (std::size_t t = 0; t < tr.steps.size(); ++t)
      baselines.update(tr.task, static_cast<int>(t), tr.steps[t].ret, a.cfg.baseline_beta);
    baselines.update_episode(tr.task, tr.episode_return, a.cfg.baseline_beta);
  }
  return stats;
}

inline std::vector<TaskClass> training_classes(const SplitSpec& split, TaskFilter filter) {
  std::vector<TaskClass> out;
  for (int i = 0; i < kNumTaskClasses; ++i) {
    const auto c = TaskClass::from_index(i);
    if (filter != TaskFilter::all && static_cast<int>(c.verb) != static_cast<int>(filter) - 1) continue;
    for (const auto& cc : split.train_concepts)
      if (c.matches(cc)) {
        out.push_back(c);
        break;
      }
  }
  return out;
}

inline std::vector<TaskClass> test_classes(const SplitSpec& split) {
  std::vector<TaskClass> out;
  for (int i = 0; i < kNumTaskClasses; ++i) {
    const auto c = TaskClass::from_index(i);
    for (const auto& cc : split.test_concepts)
      if (c.matches(cc)) {
        out.push_back(c);
        break;
      }
  }
  return out;
}

struct ClassAccuracy {
  TaskClass task;
  double accuracy = 0.0;
  int episodes = 0;
};

// Listener actions are argmax unless sample_actions. Episode layouts depend only on (seed, class), so two
// models evaluated with the same seed see identical episodes.
inline std::vector<ClassAccuracy> evaluate(Agents& a, const SplitSpec& split, EpisodeMode mode,
                                           std::span<const TaskClass> classes, int per_class, uint64_t seed,
                                           bool sample_actions = false) {
  std::vector<ClassAccuracy> out;
  diff::Tape tape;
  tape.set_grad_enabled(false);
  for (const auto& c : classes) {
    Rng env(derive_seed(seed, static_cast<uint64_t>(c.index())));
    Rng act(derive_seed(seed, static_cast<uint64_t>(kNumTaskClasses + c.index())));
    int hits = 0;
    for (int e = 0; e < per_class; ++e) {
      tape.reset();
      const auto s0 = generate_episode(env, split, mode, c, a.cfg.t_max);
      hits += run_episode(tape, a, s0, {ActMode::eval, false, sample_actions}, act).success ? 1 : 0;
    }
    out.push_back({c, per_class ? static_cast<double>(hits) / per_class : 0.0, per_class});
  }
  return out;
}

inline std::vector<ClassAccuracy> evaluate_zero_shot(Agents& a, const SplitSpec& split, int episodes, uint64_t seed,
                                                     EvalActions actions = EvalActions::argmax) {
  if (split.test_concepts.empty())
    throw Error(ErrorCode::EmptyTestSet, "split " + std::string(name(split.kind)) + " has no test concepts");
  const auto classes = test_classes(split);
  return evaluate(a, split, EpisodeMode::test, classes, episodes, seed, actions == EvalActions::sample);
}

inline std::string format_report(std::span<const ClassAccuracy> acc) {
  std::string out;
  char buf[64];
  for (const auto& r : acc) {
    std::snprintf(buf, sizeof buf, "%.4f", r.accuracy);
    out += r.task.label() + " " + buf + " " + std::to_string(r.episodes) + "\n";
  }
  return out;
}

// Checkpoint = config hash + every parameter store with optimizer state.
inline diff::Checkpoint make_checkpoint(const Agents& a) {
  diff::Checkpoint ck;
  ck.config_hash = config_hash(a.cfg);
  if (a.speaker) diff::StoreCodec::append(a.speaker->store(), "speaker", ck.blocks);
  diff::StoreCodec::append(a.listener.store(), "listener", ck.blocks);
  diff::StoreCodec::append(a.disc.store(), "disc", ck.blocks);
  return ck;
}

inline void restore_checkpoint(Agents& a, const diff::Checkpoint& ck) {
  if (ck.config_hash != config_hash(a.cfg))
    throw Error(ErrorCode::CorruptCheckpoint, "checkpoint was written for a different configuration");
  if (a.speaker) diff::StoreCodec::load(a.speaker->store(), "speaker", ck);
  diff::StoreCodec::load(a.listener.store(), "listener", ck);
  diff::StoreCodec::load(a.disc.store(), "disc", ck);
}

namespace files {
inline constexpr const char* config = "config.cfg";
inline constexpr const char* metrics = "metrics.csv";
inline constexpr const char* checkpoint = "checkpoint.bin";
inline constexpr const char* language = "language.txt";
}  // namespace files

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

struct TrainResult {
  std::vector<ClassAccuracy> heldout;  // last held-out evaluation
  TopsimResult topsim;
  std::vector<double> topsim_history;  // one entry per evaluation
  std::vector<double> success_history;  // mean held-out success per evaluation
};

struct TrainHooks {
  std::ostream* log = nullptr;
  bool write_files = true;
};

inline TrainResult train(Agents& a, TrainHooks hooks = {}) {
  const RunConfig& cfg = a.cfg;
  validate(cfg);
  const auto split = make_split(cfg.split);
  const auto classes = training_classes(split, cfg.tasks);
  if (classes.empty()) throw Error(ErrorCode::ConfigInvalid, "no training task classes for this split and task filter");

  namespace fs = std::filesystem;
  const fs::path dir(cfg.out_dir);
  std::ofstream csv;
  if (hooks.write_files) {
    fs::create_directories(dir);
    std::ofstream(dir / files::config) << echo_config(cfg);
    csv.open(dir / files::metrics);
    if (!csv) throw Error(ErrorCode::MissingArtifact, "cannot write " + (dir / files::metrics).string());
    csv << "episode,task_class,r_env,r_cov,r_inf_sum,success";
    for (const auto& c : classes) csv << ",heldout_success_" << c.label();
    csv << ",topsim";
    for (const auto& c : classes) csv << ",lp_" << c.label();
    csv << "\n";
  }
  auto save = [&]() {
    if (!hooks.write_files) return;
    diff::write_checkpoint((dir / files::checkpoint).string(), make_checkpoint(a));
    std::ofstream(dir / files::language) << format_language_table(agent_language(a));
  };

  Rng rng(derive_seed(cfg.seed, stream::train));
  Rng disc_rng(derive_seed(cfg.seed, stream::discriminator));
  CurriculumState curriculum(classes);
  Baselines baselines(cfg.t_max);
  PairBuffer buffer(static_cast<std::size_t>(cfg.buffer_capacity));
  TrainResult result;
  result.topsim = topsim(agent_language(a));
  std::vector<double> heldout(classes.size(), 0.0);

  diff::Tape tape;
  std::vector<Trajectory> batch;
  int evals = 0;
  for (int e = 0; e < cfg.episodes; ++e) {
    const auto cls = curriculum.sample(rng);
    const auto s0 = generate_episode(rng, split, EpisodeMode::train, cls, cfg.t_max);
    batch.push_back(run_episode(tape, a, s0, {ActMode::train, true}, rng));
    const Trajectory& tr = batch.back();
    if (a.speaker) buffer.push(tr.instruction, tr.message);
    const double r_env = tr.r_env, r_cov = tr.r_cov, r_inf = tr.r_inf_sum;
    const bool success = tr.success;

    if (static_cast<int>(batch.size()) == cfg.batch_size || e + 1 == cfg.episodes) {
      reinforce_update(tape, batch, a, baselines);
      batch.clear();
      tape.reset();
    }
    if (a.speaker && cfg.lambda1 > 0.0 && (e + 1) % cfg.disc_every == 0 &&
        buffer.size() >= static_cast<std::size_t>(cfg.disc_batch_size))
      train_discriminator(a.disc, buffer, cfg.disc_batches, cfg.disc_batch_size, disc_rng);
    if ((e + 1) % cfg.eval_every == 0) {
      const auto acc = evaluate(a, split, EpisodeMode::train, classes, cfg.heldout_episodes,
                                derive_seed(derive_seed(cfg.seed, stream::heldout), static_cast<uint64_t>(evals++)),
                                cfg.eval_actions == EvalActions::sample);
      double mean = 0.0;
      for (std::size_t i = 0; i < acc.size(); ++i) {
        heldout[i] = acc[i].accuracy;
        mean += acc[i].accuracy / acc.size();
      }
      update_curriculum(curriculum, heldout, cfg.curriculum_beta, cfg.curriculum_eps);
      result.heldout = acc;
      result.topsim = topsim(agent_language(a));
      result.topsim_history.push_back(result.topsim.value);
      result.success_history.push_back(mean);
      if (hooks.log) *hooks.log << "episode " << e + 1 << " heldout " << fmt(mean) << " topsim " << fmt(result.topsim.value) << "\n";
    }
    if (hooks.write_files) {
      csv << e << "," << cls.label() << "," << fmt(r_env) << "," << fmt(r_cov) << "," << fmt(r_inf) << ","
          << (success ? 1 : 0);
      for (double h : heldout) csv << "," << fmt(h);
      csv << "," << fmt(result.topsim.value);
      for (double lp : curriculum.progress) csv << "," << fmt(lp);
      csv << "\n";
    }
    if (cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0) save();
  }
  save();
  return result;
}

}  // namespace emcomm
