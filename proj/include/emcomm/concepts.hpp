#pragma once

#include <array>
#include <bitset>
#include <compare>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "emcomm/error.hpp"

namespace emcomm {

enum class Verb : uint8_t { walk, push, pull };
enum class Color : uint8_t { red, blue, yellow, green };
enum class Size : uint8_t { small, big };
enum class Weight : uint8_t { light, heavy };
enum class Shape : uint8_t { square, circle, cylinder, diamond };

inline constexpr int kNumSlots = 5;
// Slot order everywhere: verb, color, size, weight, shape.
inline constexpr std::array<int, kNumSlots> kSlotCardinality{3, 4, 2, 2, 4};
inline constexpr int kConceptBits = 3 + 4 + 2 + 2 + 4;
inline constexpr int kNumConcepts = 3 * 4 * 2 * 2 * 4;

inline constexpr std::array<std::string_view, 3> kVerbNames{"walk", "push", "pull"};
inline constexpr std::array<std::string_view, 4> kColorNames{"red", "blue", "yellow", "green"};
inline constexpr std::array<std::string_view, 2> kSizeNames{"small", "big"};
inline constexpr std::array<std::string_view, 2> kWeightNames{"light", "heavy"};
inline constexpr std::array<std::string_view, 4> kShapeNames{"square", "circle", "cylinder", "diamond"};

inline std::string_view name(Verb v) { return kVerbNames[static_cast<int>(v)]; }
inline std::string_view name(Color c) { return kColorNames[static_cast<int>(c)]; }
inline std::string_view name(Size s) { return kSizeNames[static_cast<int>(s)]; }
inline std::string_view name(Weight w) { return kWeightNames[static_cast<int>(w)]; }
inline std::string_view name(Shape s) { return kShapeNames[static_cast<int>(s)]; }

struct Concept {
  Verb verb = Verb::walk;
  Color color = Color::red;
  Size size = Size::small;
  Weight weight = Weight::light;
  Shape shape = Shape::square;

  auto operator<=>(const Concept&) const = default;

  std::array<int, kNumSlots> slots() const {
    return {static_cast<int>(verb), static_cast<int>(color), static_cast<int>(size),
            static_cast<int>(weight), static_cast<int>(shape)};
  }

  static Concept from_slots(const std::array<int, kNumSlots>& s) {
    return Concept{static_cast<Verb>(s[0]), static_cast<Color>(s[1]), static_cast<Size>(s[2]),
                   static_cast<Weight>(s[3]), static_cast<Shape>(s[4])};
  }

  // Mixed-radix index in [0, 192), verb most significant.
  int index() const {
    int idx = 0;
    const auto s = slots();
    for (int i = 0; i < kNumSlots; ++i) idx = idx * kSlotCardinality[i] + s[i];
    return idx;
  }

  static Concept from_index(int idx) {
    std::array<int, kNumSlots> s{};
    for (int i = kNumSlots - 1; i >= 0; --i) {
      s[i] = idx % kSlotCardinality[i];
      idx /= kSlotCardinality[i];
    }
    return from_slots(s);
  }
};

inline const std::vector<Concept>& all_concepts() {
  static const std::vector<Concept> concepts = [] {
    std::vector<Concept> out;
    out.reserve(kNumConcepts);
    for (int i = 0; i < kNumConcepts; ++i) out.push_back(Concept::from_index(i));
    return out;
  }();
  return concepts;
}

// Canonical log form: "pull/red/big/heavy/square".
inline std::string to_tuple_string(const Concept& c) {
  std::string out;
  out.append(name(c.verb)).append("/").append(name(c.color)).append("/").append(name(c.size));
  out.append("/").append(name(c.weight)).append("/").append(name(c.shape));
  return out;
}

namespace detail {

template <std::size_t N>
std::optional<int> lookup(const std::array<std::string_view, N>& names, std::string_view word) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == word) return static_cast<int>(i);
  return std::nullopt;
}

inline std::vector<std::string> split_words(std::string_view text, char sep = ' ') {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    if (ch == sep || (sep == ' ' && (ch == '\t' || ch == '\n' || ch == '\r'))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(ch);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

}  // namespace detail

inline Concept parse_tuple_string(std::string_view text) {
  const auto parts = detail::split_words(text, '/');
  if (parts.size() != kNumSlots) throw Error(ErrorCode::MissingSlot, "expected 5 slots in '" + std::string(text) + "'");
  const std::array<std::optional<int>, kNumSlots> idx{
      detail::lookup(kVerbNames, parts[0]), detail::lookup(kColorNames, parts[1]),
      detail::lookup(kSizeNames, parts[2]), detail::lookup(kWeightNames, parts[3]),
      detail::lookup(kShapeNames, parts[4])};
  std::array<int, kNumSlots> slots{};
  for (int i = 0; i < kNumSlots; ++i) {
    if (!idx[i]) throw Error(ErrorCode::UnknownToken, "'" + parts[i] + "' in '" + std::string(text) + "'");
    slots[i] = *idx[i];
  }
  return Concept::from_slots(slots);
}

// Grammar:
//   ("walk to" | "push" | "pull") ("a" | "the") SIZE [WEIGHT] COLOR SHAPE ["twice"]
// "twice" and "heavy" both mean weight=heavy; no marker means light.
inline Concept parse_instruction(std::string_view text) {
  const auto words = detail::split_words(text);
  auto known = [](const std::string& w) {
    static constexpr std::array<std::string_view, 5> kFunctionWords{"to", "a", "the", "twice", ""};
    return detail::lookup(kVerbNames, w) || detail::lookup(kColorNames, w) ||
           detail::lookup(kSizeNames, w) || detail::lookup(kWeightNames, w) ||
           detail::lookup(kShapeNames, w) || detail::lookup(kFunctionWords, w);
  };
  for (const auto& w : words)
    if (!known(w)) throw Error(ErrorCode::UnknownToken, "'" + w + "' in '" + std::string(text) + "'");

  std::size_t pos = 0;
  auto peek = [&]() -> std::string_view { return pos < words.size() ? std::string_view(words[pos]) : ""; };
  auto missing = [&](const char* slot) {
    return Error(ErrorCode::MissingSlot, std::string(slot) + " expected at word " + std::to_string(pos) +
                                             " of '" + std::string(text) + "'");
  };

  Concept c;
  const auto verb = detail::lookup(kVerbNames, peek());
  if (!verb) throw missing("verb");
  c.verb = static_cast<Verb>(*verb);
  ++pos;
  if (c.verb == Verb::walk) {
    if (peek() != "to") throw missing("'to'");
    ++pos;
  }
  if (peek() != "a" && peek() != "the") throw missing("article");
  ++pos;

  const auto size = detail::lookup(kSizeNames, peek());
  if (!size) throw missing("size");
  c.size = static_cast<Size>(*size);
  ++pos;

  std::optional<Weight> weight_word;
  if (const auto w = detail::lookup(kWeightNames, peek())) {
    weight_word = static_cast<Weight>(*w);
    ++pos;
    if (const auto w2 = detail::lookup(kWeightNames, peek())) {
      if (*w2 != *w) throw Error(ErrorCode::ConflictingWeight, "'light' with 'heavy' in '" + std::string(text) + "'");
      ++pos;
    }
  }
  const auto color = detail::lookup(kColorNames, peek());
  if (!color) throw missing("color");
  c.color = static_cast<Color>(*color);
  ++pos;
  const auto shape = detail::lookup(kShapeNames, peek());
  if (!shape) throw missing("shape");
  c.shape = static_cast<Shape>(*shape);
  ++pos;

  bool twice = false;
  if (peek() == "twice") {
    twice = true;
    ++pos;
  }
  if (pos != words.size()) throw Error(ErrorCode::UnknownToken, "trailing '" + words[pos] + "' in '" + std::string(text) + "'");

  if (weight_word == Weight::light && twice)
    throw Error(ErrorCode::ConflictingWeight, "'light' with 'twice' in '" + std::string(text) + "'");
  c.weight = (twice || weight_word == Weight::heavy) ? Weight::heavy : Weight::light;
  return c;
}

inline std::string render_instruction(const Concept& c) {
  std::string out;
  out.append(c.verb == Verb::walk ? "walk to" : name(c.verb));
  out.append(" the ").append(name(c.size));
  const bool heavy = c.weight == Weight::heavy;
  if (heavy && c.verb == Verb::walk) out.append(" heavy");
  out.append(" ").append(name(c.color)).append(" ").append(name(c.shape));
  if (heavy && c.verb != Verb::walk) out.append(" twice");
  return out;
}

using ConceptBits = std::bitset<kConceptBits>;

// One-hot blocks in slot order; bit 0 is the first verb value.
inline ConceptBits encode_concept(const Concept& c) {
  ConceptBits bits;
  int offset = 0;
  const auto s = c.slots();
  for (int i = 0; i < kNumSlots; ++i) {
    bits.set(offset + s[i]);
    offset += kSlotCardinality[i];
  }
  return bits;
}

inline std::string bits_to_string(const ConceptBits& bits) {
  std::string out;
  int offset = 0;
  for (int i = 0; i < kNumSlots; ++i) {
    if (i) out.push_back('|');
    for (int j = 0; j < kSlotCardinality[i]; ++j) out.push_back(bits.test(offset + j) ? '1' : '0');
    offset += kSlotCardinality[i];
  }
  return out;
}

// Task classes are (verb, weight) pairs; index = verb * 2 + weight.
struct TaskClass {
  Verb verb = Verb::walk;
  Weight weight = Weight::light;

  auto operator<=>(const TaskClass&) const = default;

  int index() const { return static_cast<int>(verb) * 2 + static_cast<int>(weight); }
  static TaskClass from_index(int i) { return {static_cast<Verb>(i / 2), static_cast<Weight>(i % 2)}; }
  std::string label() const { return std::string(name(verb)) + "_" + std::string(name(weight)); }
  bool matches(const Concept& c) const { return c.verb == verb && c.weight == weight; }
};

inline constexpr int kNumTaskClasses = 6;

inline TaskClass task_class_of(const Concept& c) { return {c.verb, c.weight}; }

inline std::optional<TaskClass> parse_task_class(std::string_view label) {
  for (int i = 0; i < kNumTaskClasses; ++i)
    if (TaskClass::from_index(i).label() == label) return TaskClass::from_index(i);
  return std::nullopt;
}

enum class SplitKind : uint8_t { none, visual, numeral };

inline constexpr std::array<std::string_view, 3> kSplitNames{"none", "visual", "numeral"};
inline std::string_view name(SplitKind k) { return kSplitNames[static_cast<int>(k)]; }

struct SplitSpec {
  SplitKind kind = SplitKind::none;
  std::vector<Concept> train_concepts;
  std::vector<Concept> test_concepts;
};

inline bool in_test_set(SplitKind kind, const Concept& c) {
  switch (kind) {
    case SplitKind::none: return false;
    case SplitKind::visual: return c.color == Color::red && c.shape == Shape::square;
    case SplitKind::numeral: return c.verb == Verb::pull && c.weight == Weight::heavy;
  }
  return false;
}

inline SplitSpec make_split(SplitKind kind) {
  SplitSpec split;
  split.kind = kind;
  for (const auto& c : all_concepts()) (in_test_set(kind, c) ? split.test_concepts : split.train_concepts).push_back(c);
  return split;
}

}  // namespace emcomm
