#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "emcomm/concepts.hpp"
#include "emcomm/diffcore.hpp"
#include "emcomm/error.hpp"
#include "emcomm/params.hpp"
#include "emcomm/random.hpp"

namespace emcomm {

struct ChannelConfig {
  int n_m = kNumSlots;
  int d_m = 4;

  double capacity() const { return std::pow(static_cast<double>(d_m), n_m); }
  int width() const { return n_m * d_m; }

  void validate() const {
    if (d_m < 2) throw Error(ErrorCode::ConfigInvalid, "d_m must be >= 2, got " + std::to_string(d_m));
    if (n_m < 1) throw Error(ErrorCode::ConfigInvalid, "n_m must be >= 1, got " + std::to_string(n_m));
  }
};

// n_m symbols over an alphabet of d_m; stored as indices, exposed as one-hots.
struct Message {
  std::vector<int> symbols;
  int d_m = 4;

  bool operator==(const Message&) const = default;
  auto operator<=>(const Message&) const = default;

  std::vector<double> bits() const {
    std::vector<double> out(symbols.size() * static_cast<std::size_t>(d_m), 0.0);
    for (std::size_t i = 0; i < symbols.size(); ++i) out[i * d_m + symbols[i]] = 1.0;
    return out;
  }

  std::string to_string() const {
    std::string out;
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i) out.push_back(' ');
      out += std::to_string(symbols[i]);
    }
    return out;
  }
};

// Encoder: concept bits -> dense(d_h, tanh) -> dense(n_m * d_m), one logit row per symbol.
class SpeakerModel {
 public:
  SpeakerModel(ChannelConfig channel, int d_h, Rng& rng, diff::AdamConfig adam = {})
      : channel_(channel), d_h_(d_h), store_(adam) {
    channel_.validate();
    diff::Dense::create(store_, "speaker.encoder", kConceptBits, d_h, rng, diff::Activation::tanh);
    diff::Dense::create(store_, "speaker.head", d_h, channel_.width(), rng, diff::Activation::linear);
    bind();
  }
  SpeakerModel(const SpeakerModel& o) : channel_(o.channel_), d_h_(o.d_h_), store_(o.store_) { bind(); }
  SpeakerModel& operator=(const SpeakerModel& o) {
    channel_ = o.channel_;
    d_h_ = o.d_h_;
    store_ = o.store_;
    bind();
    return *this;
  }

  const ChannelConfig& channel() const { return channel_; }
  int hidden() const { return d_h_; }
  diff::ParamStore& store() { return store_; }
  const diff::ParamStore& store() const { return store_; }

  // n_m x d_m symbol logits.
  diff::Tensor logits(diff::Tape& tape, const Concept& c) {
    const auto bits = encode_concept(c);
    std::vector<double> x(kConceptBits);
    for (int i = 0; i < kConceptBits; ++i) x[i] = bits.test(i) ? 1.0 : 0.0;
    const auto h = diff::forward_dense(tape.constant(1, kConceptBits, x), encoder_);
    return diff::reshape(diff::forward_dense(h, head_), channel_.n_m, channel_.d_m);
  }

  // Symbol probabilities without recording gradients, n_m rows of d_m.
  std::vector<std::vector<double>> symbol_probabilities(const Concept& c) {
    diff::Tape tape;
    tape.set_grad_enabled(false);
    const auto l = logits(tape, c);
    std::vector<std::vector<double>> out;
    for (int i = 0; i < channel_.n_m; ++i) {
      const auto r = l.values().subspan(static_cast<std::size_t>(i) * channel_.d_m, channel_.d_m);
      out.push_back(diff::softmax(r));
    }
    return out;
  }

 private:
  void bind() {
    encoder_ = diff::Dense::bind(store_, "speaker.encoder", diff::Activation::tanh);
    head_ = diff::Dense::bind(store_, "speaker.head", diff::Activation::linear);
  }

  ChannelConfig channel_;
  int d_h_ = 64;
  diff::ParamStore store_;
  diff::Dense encoder_;
  diff::Dense head_;
};

enum class SpeakMode : uint8_t { train, eval };

struct SpeakerOutput {
  Message message;
  diff::Tensor one_hots;                // 1 x (n_m * d_m), straight-through differentiable
  std::vector<diff::Tensor> log_probs;  // per symbol, 1 x 1
};

// Samples in train mode, argmax in eval mode.
inline SpeakerOutput speak(diff::Tape& tape, SpeakerModel& model, const Concept& c, Rng& rng, SpeakMode mode) {
  const auto& ch = model.channel();
  const auto logits = model.logits(tape, c);
  const auto sample_mode = mode == SpeakMode::train ? diff::SampleMode::sample : diff::SampleMode::argmax;
  SpeakerOutput out;
  out.message.d_m = ch.d_m;
  std::vector<diff::Tensor> parts;
  for (int i = 0; i < ch.n_m; ++i) {
    const auto row = diff::row(logits, i);
    const auto one_hot = diff::categorical_straight_through(row, rng, sample_mode);
    const int symbol = diff::one_hot_index(one_hot);
    out.message.symbols.push_back(symbol);
    out.log_probs.push_back(diff::pick(diff::log_softmax(row), 0, symbol));
    parts.push_back(one_hot);
  }
  out.one_hots = diff::concat_cols(parts);
  return out;
}

// Draws a message from per-symbol probabilities (as returned by
// SpeakerModel::symbol_probabilities).
inline Message sample_message(const std::vector<std::vector<double>>& probs, Rng& rng) {
  Message m;
  m.d_m = probs.empty() ? 0 : static_cast<int>(probs[0].size());
  for (const auto& p : probs) m.symbols.push_back(rng.categorical(p));
  return m;
}

// Identity channel: symbol i is the value index of slot i.
inline Message perfect_speak(const Concept& c, const ChannelConfig& ch) {
  if (ch.d_m < 4) throw Error(ErrorCode::ChannelTooNarrow, "perfect speaker needs d_m >= 4, got " + std::to_string(ch.d_m));
  if (ch.n_m != kNumSlots)
    throw Error(ErrorCode::ChannelTooNarrow, "perfect speaker needs n_m = 5, got " + std::to_string(ch.n_m));
  Message m;
  m.d_m = ch.d_m;
  const auto s = c.slots();
  m.symbols.assign(s.begin(), s.end());
  return m;
}

// Concept -> message over all 192 concepts, indexed by Concept::index().
using LanguageTable = std::vector<Message>;

inline LanguageTable language_table(SpeakerModel& model) {
  LanguageTable table;
  table.reserve(kNumConcepts);
  Rng unused(0);
  diff::Tape tape;
  tape.set_grad_enabled(false);
  for (const auto& c : all_concepts()) {
    tape.reset();
    table.push_back(speak(tape, model, c, unused, SpeakMode::eval).message);
  }
  return table;
}

inline LanguageTable perfect_language_table(const ChannelConfig& ch) {
  LanguageTable table;
  for (const auto& c : all_concepts()) table.push_back(perfect_speak(c, ch));
  return table;
}

// Number of concepts whose message is shared with an earlier concept.
inline int collision_count(const LanguageTable& table) {
  std::map<Message, int> seen;
  int collisions = 0;
  for (const auto& m : table)
    if (seen[m]++ > 0) ++collisions;
  return collisions;
}

// One line per concept: "verb/color/size/weight/shape → s0 s1 s2 s3 s4".
inline std::string format_language_table(const LanguageTable& table) {
  std::string out;
  for (std::size_t i = 0; i < table.size(); ++i)
    out += to_tuple_string(Concept::from_index(static_cast<int>(i))) + " → " + table[i].to_string() + "\n";
  return out;
}

inline LanguageTable parse_language_table(const std::string& text, int d_m) {
  LanguageTable table(kNumConcepts);
  std::vector<bool> filled(kNumConcepts, false);
  std::istringstream in(text);
  std::string line;
  const std::string arrow = " → ";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto pos = line.find(arrow);
    if (pos == std::string::npos) throw Error(ErrorCode::CorruptCheckpoint, "bad language table line: " + line);
    const Concept c = parse_tuple_string(line.substr(0, pos));
    Message m;
    m.d_m = d_m;
    std::istringstream syms(line.substr(pos + arrow.size()));
    int s;
    while (syms >> s) {
      if (s < 0 || s >= d_m) throw Error(ErrorCode::CorruptCheckpoint, "symbol out of range: " + line);
      m.symbols.push_back(s);
    }
    table[c.index()] = m;
    filled[c.index()] = true;
  }
  for (int i = 0; i < kNumConcepts; ++i)
    if (!filled[i]) throw Error(ErrorCode::CorruptCheckpoint, "language table misses " + to_tuple_string(Concept::from_index(i)));
  return table;
}

}  // namespace emcomm
