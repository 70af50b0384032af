#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emcomm/concepts.hpp"
#include "emcomm/diffcore.hpp"
#include "emcomm/error.hpp"
#include "emcomm/listener.hpp"
#include "emcomm/params.hpp"
#include "emcomm/random.hpp"
#include "emcomm/speaker.hpp"

namespace emcomm {

inline constexpr double kLogProbFloor = -20.0;
inline constexpr double kMarginalSmoothing = 1e-8;

// sum over slots of log K_slot = ln 3 + ln 4 + ln 2 + ln 2 + ln 4
inline double max_coverage_bits() {
  double s = 0.0;
  for (int k : kSlotCardinality) s += std::log(static_cast<double>(k));
  return s;
}

inline constexpr std::array<int, kNumSlots> slot_offsets() {
  std::array<int, kNumSlots> off{};
  for (int i = 1; i < kNumSlots; ++i) off[i] = off[i - 1] + kSlotCardinality[i - 1];
  return off;
}

// q(c_slot | m) for every slot: a linear map from message bits to one logit
// row per slot. Owns its optimizer; the speaker never sees its gradients
// because it is trained only from stored (concept, message) pairs.
class Discriminator {
 public:
  Discriminator(int message_width, Rng& rng, diff::AdamConfig adam = {.learning_rate = 1e-2})
      : width_(message_width), store_(adam) {
    diff::Dense::create(store_, "disc.head", message_width, kConceptBits, rng, diff::Activation::linear);
    bind();
  }
  Discriminator(const Discriminator& o) : width_(o.width_), store_(o.store_) { bind(); }
  Discriminator& operator=(const Discriminator& o) {
    width_ = o.width_;
    store_ = o.store_;
    bind();
    return *this;
  }

  int message_width() const { return width_; }
  diff::ParamStore& store() { return store_; }
  const diff::ParamStore& store() const { return store_; }
  const diff::Dense& head() const { return head_; }

  // rows x 15 logits; slot i occupies columns [offset_i, offset_i + K_i).
  diff::Tensor logits(diff::Tensor bits) const { return diff::forward_dense(bits, head_); }

  // Per-slot log-probabilities for one message.
  std::array<std::vector<double>, kNumSlots> log_probs(const Message& m) const {
    diff::Tape t;
    t.set_grad_enabled(false);
    const auto bits = m.bits();
    if (static_cast<int>(bits.size()) != width_)
      throw Error(ErrorCode::ShapeMismatch, "discriminator expects " + std::to_string(width_) + " message bits");
    const auto l = logits(t.constant(1, width_, bits));
    std::array<std::vector<double>, kNumSlots> out;
    const auto off = slot_offsets();
    for (int s = 0; s < kNumSlots; ++s) {
      const auto row = l.values().subspan(off[s], kSlotCardinality[s]);
      const double lse = diff::detail::logsumexp_row(row.data(), kSlotCardinality[s]);
      for (double x : row) out[s].push_back(x - lse);
    }
    return out;
  }

 private:
  void bind() { head_ = diff::Dense::bind(store_, "disc.head", diff::Activation::linear); }

  int width_ = 0;
  diff::ParamStore store_;
  diff::Dense head_;
};

// lambda1 * sum_slots [max(log q(c_slot | m), -20) + log K_slot]
inline double coverage_from_log_probs(const Concept& c, const std::array<std::vector<double>, kNumSlots>& logq,
                                      double lambda1) {
  const auto slots = c.slots();
  double s = 0.0;
  for (int i = 0; i < kNumSlots; ++i) {
    const double lp = logq[i][slots[i]];
    if (std::isnan(lp)) throw Error(ErrorCode::NonFiniteLogProb, "discriminator log-probability is NaN");
    s += std::max(lp, kLogProbFloor) + std::log(static_cast<double>(kSlotCardinality[i]));
  }
  return lambda1 * s;
}

inline double coverage_reward(const Concept& c, const Message& m, const Discriminator& disc, double lambda1) {
  return coverage_from_log_probs(c, disc.log_probs(m), lambda1);
}

class PairBuffer {
 public:
  explicit PairBuffer(std::size_t capacity = 10000) : capacity_(capacity) {}

  void push(const Concept& c, const Message& m) {
    if (capacity_ == 0) return;
    if (items_.size() == capacity_) items_.pop_front();
    items_.emplace_back(c, m);
  }
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::pair<Concept, Message>& at(std::size_t i) const { return items_[i]; }

 private:
  std::size_t capacity_;
  std::deque<std::pair<Concept, Message>> items_;
};

// Mean (over the batch) of the summed per-slot cross-entropy.
inline diff::Tensor discriminator_loss(diff::Tape& t, const Discriminator& disc,
                                       std::span<const std::pair<Concept, Message>> batch) {
  const int n = static_cast<int>(batch.size());
  const int w = disc.message_width();
  std::vector<double> x(static_cast<std::size_t>(n) * w, 0.0);
  std::vector<double> target(static_cast<std::size_t>(n) * kConceptBits, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto bits = batch[i].second.bits();
    if (static_cast<int>(bits.size()) != w) throw Error(ErrorCode::ShapeMismatch, "message width differs from discriminator");
    std::copy(bits.begin(), bits.end(), x.begin() + static_cast<std::ptrdiff_t>(i) * w);
    const auto enc = encode_concept(batch[i].first);
    for (int j = 0; j < kConceptBits; ++j) target[static_cast<std::size_t>(i) * kConceptBits + j] = enc.test(j) ? 1.0 : 0.0;
  }
  const auto logits = disc.logits(t.constant(n, w, x));
  const auto labels = t.constant(n, kConceptBits, target);
  const auto off = slot_offsets();
  std::vector<diff::Tensor> terms;
  for (int s = 0; s < kNumSlots; ++s) {
    const auto ls = diff::log_softmax(diff::slice(logits, 0, n, off[s], kSlotCardinality[s]));
    terms.push_back(diff::sum(diff::mul(ls, diff::slice(labels, 0, n, off[s], kSlotCardinality[s]))));
  }
  const std::vector<double> coeffs(kNumSlots, -1.0 / n);
  return diff::combine(terms, coeffs);
}

// Minimizes cross-entropy on uniformly drawn batches; returns the mean loss.
inline double train_discriminator(Discriminator& disc, const PairBuffer& buffer, int batches, int batch_size, Rng& rng) {
  if (batch_size < 1 || buffer.size() < static_cast<std::size_t>(batch_size))
    throw Error(ErrorCode::BufferTooSmall, "buffer holds " + std::to_string(buffer.size()) + " pairs, batch needs " +
                                               std::to_string(batch_size));
  double total = 0.0;
  diff::Tape t;
  std::vector<std::pair<Concept, Message>> batch(batch_size);
  for (int b = 0; b < batches; ++b) {
    for (auto& item : batch) item = buffer.at(rng.below(static_cast<uint64_t>(buffer.size())));
    t.reset();
    const auto loss = discriminator_loss(t, disc, batch);
    total += loss.value();
    t.backward(loss);
    disc.store().optimize_step();
  }
  return batches > 0 ? total / batches : 0.0;
}

// Fraction of correct argmax predictions for one slot.
inline double slot_accuracy(const Discriminator& disc, std::span<const std::pair<Concept, Message>> pairs, int slot) {
  int hits = 0;
  for (const auto& [c, m] : pairs) {
    const auto lp = disc.log_probs(m);
    hits += diff::argmax(lp[slot]) == c.slots()[slot] ? 1 : 0;
  }
  return pairs.empty() ? 0.0 : static_cast<double>(hits) / pairs.size();
}

inline std::vector<double> smooth(std::span<const double> p) {
  std::vector<double> out(p.size());
  const double z = 1.0 + kMarginalSmoothing * p.size();
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = (p[i] + kMarginalSmoothing) / z;
  return out;
}

// lambda3 * KL(conditional || mean of pseudo conditionals). The mean is
// accumulated as offsets from the conditional, so a listener that ignores the
// message scores exactly zero. Both sides are smoothed by the same epsilon.
inline double influence_from_distributions(std::span<const double> conditional,
                                           const std::vector<std::vector<double>>& pseudo, double lambda3) {
  if (pseudo.empty()) throw Error(ErrorCode::DegenerateMarginal, "influence reward needs k >= 1 pseudo messages");
  std::vector<double> marginal(conditional.begin(), conditional.end());
  for (std::size_t i = 0; i < marginal.size(); ++i) {
    double d = 0.0;
    for (const auto& q : pseudo) d += q[i] - conditional[i];
    marginal[i] += d / static_cast<double>(pseudo.size());
  }
  const auto p = smooth(conditional);
  const auto q = smooth(marginal);
  for (std::size_t i = 0; i < p.size(); ++i)
    if (!(q[i] > 0.0) && p[i] > 0.0) throw Error(ErrorCode::DegenerateMarginal, "marginal vanishes where conditional is positive");
  return lambda3 * diff::kl_divergence(p, q);
}

// Memoizes per-message results: master distributions for the whole episode
// (they depend only on the first observation) and action distributions for
// the current step. Call next_step() whenever the observation changes.
class InfluenceCache {
 public:
  const ActionDistribution& get(ListenerModel& model, const FrozenFeatures& first, const FrozenFeatures& current,
                                const Message& m, diff::Tape& scratch) {
    for (const auto& [msg, dist] : step_)
      if (msg == m) return dist;
    const auto bits = m.bits();
    const MasterDistribution* master = nullptr;
    for (const auto& [msg, dist] : masters_)
      if (msg == m) master = &dist;
    if (!master) {
      masters_.emplace_back(m, master_distribution(model, first, bits, scratch));
      master = &masters_.back().second;
    }
    step_.emplace_back(m, compose_actions(model, *master, current, bits, scratch));
    return step_.back().second;
  }
  void next_step() { step_.clear(); }
  void clear() {
    step_.clear();
    masters_.clear();
  }

 private:
  std::vector<std::pair<Message, ActionDistribution>> step_;
  std::deque<std::pair<Message, MasterDistribution>> masters_;
};

// Exact marginal action distribution under a message distribution given by
// per-symbol probabilities, by enumerating the whole message space.
inline ActionDistribution exact_marginal(ListenerModel& model, const FrozenFeatures& first, const FrozenFeatures& current,
                                         const std::vector<std::vector<double>>& symbol_probs) {
  ActionDistribution out{};
  diff::Tape scratch;
  const int n = static_cast<int>(symbol_probs.size());
  const int d = n ? static_cast<int>(symbol_probs[0].size()) : 0;
  std::vector<int> idx(n, 0);
  while (true) {
    double w = 1.0;
    Message m{idx, d};
    for (int i = 0; i < n; ++i) w *= symbol_probs[i][idx[i]];
    const auto p = action_distribution(model, first, current, m.bits(), scratch);
    for (int a = 0; a < kNumActions; ++a) out[a] += w * p[a];
    int pos = n - 1;
    while (pos >= 0 && ++idx[pos] == d) idx[pos--] = 0;
    if (pos < 0) break;
  }
  return out;
}

// One influence reward for step t: pseudo messages are drawn from the
// speaker's symbol distribution for the episode's concept.
inline double influence_reward(ListenerModel& model, const FrozenFeatures& first, const FrozenFeatures& current,
                               const Message& m, const std::vector<std::vector<double>>& symbol_probs, int k,
                               double lambda3, Rng& rng, diff::Tape& scratch, InfluenceCache* cache = nullptr) {
  if (k < 1) throw Error(ErrorCode::DegenerateMarginal, "k must be >= 1");
  InfluenceCache local;
  InfluenceCache& c = cache ? *cache : local;
  const auto conditional = c.get(model, first, current, m, scratch);
  std::vector<std::vector<double>> pseudo;
  pseudo.reserve(k);
  for (int j = 0; j < k; ++j) {
    const auto& p = c.get(model, first, current, sample_message(symbol_probs, rng), scratch);
    pseudo.emplace_back(p.begin(), p.end());
  }
  return influence_from_distributions(conditional, pseudo, lambda3);
}

}  // namespace emcomm
