#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "emcomm/concepts.hpp"
#include "emcomm/error.hpp"
#include "emcomm/speaker.hpp"

namespace emcomm {

inline int concept_distance(const Concept& a, const Concept& b) {
  const auto x = a.slots();
  const auto y = b.slots();
  int d = 0;
  for (int i = 0; i < kNumSlots; ++i) d += x[i] != y[i];
  return d;
}

inline int message_distance(const Message& a, const Message& b) {
  if (a.symbols.size() != b.symbols.size()) throw Error(ErrorCode::ShapeMismatch, "messages differ in length");
  int d = 0;
  for (std::size_t i = 0; i < a.symbols.size(); ++i) d += a.symbols[i] != b.symbols[i];
  return d;
}

struct TopsimResult {
  double value = 0.0;
  bool degenerate = false;  // all message distances equal
  long pairs = 0;
};

// Spearman correlation between pairwise concept and message distances with
// average ranks for ties. Both distances are small integers, so ranks come
// from a joint histogram instead of a sort.
inline TopsimResult topsim(std::span<const Concept> concepts, std::span<const Message> messages) {
  if (concepts.size() != messages.size()) throw Error(ErrorCode::ShapeMismatch, "topsim: table sizes differ");
  if (concepts.size() < 2) throw Error(ErrorCode::DegenerateDistances, "topsim needs at least two concepts");
  const int max_m = static_cast<int>(messages[0].symbols.size());
  const int rows = kNumSlots + 1, cols = max_m + 1;
  std::vector<double> joint(static_cast<std::size_t>(rows) * cols, 0.0);
  for (std::size_t i = 0; i < concepts.size(); ++i)
    for (std::size_t j = i + 1; j < concepts.size(); ++j)
      joint[concept_distance(concepts[i], concepts[j]) * cols + message_distance(messages[i], messages[j])] += 1.0;

  std::vector<double> nc(rows, 0.0), nm(cols, 0.0);
  double n = 0.0;
  for (int a = 0; a < rows; ++a)
    for (int b = 0; b < cols; ++b) {
      nc[a] += joint[a * cols + b];
      nm[b] += joint[a * cols + b];
      n += joint[a * cols + b];
    }
  auto ranks = [](const std::vector<double>& counts) {
    std::vector<double> r(counts.size(), 0.0);
    double below = 0.0;
    for (std::size_t v = 0; v < counts.size(); ++v) {
      r[v] = below + (counts[v] + 1.0) / 2.0;
      below += counts[v];
    }
    return r;
  };
  const auto rc = ranks(nc);
  const auto rm = ranks(nm);
  const double mean = (n + 1.0) / 2.0;
  double cov = 0.0, vc = 0.0, vm = 0.0;
  for (int a = 0; a < rows; ++a) vc += nc[a] * (rc[a] - mean) * (rc[a] - mean);
  for (int b = 0; b < cols; ++b) vm += nm[b] * (rm[b] - mean) * (rm[b] - mean);
  for (int a = 0; a < rows; ++a)
    for (int b = 0; b < cols; ++b) cov += joint[a * cols + b] * (rc[a] - mean) * (rm[b] - mean);

  TopsimResult out;
  out.pairs = static_cast<long>(n);
  if (vm == 0.0 || vc == 0.0) {
    out.degenerate = true;
    return out;
  }
  out.value = cov / std::sqrt(vc * vm);
  return out;
}

inline TopsimResult topsim(const LanguageTable& table) {
  std::vector<Concept> concepts;
  for (std::size_t i = 0; i < table.size(); ++i) concepts.push_back(Concept::from_index(static_cast<int>(i)));
  return topsim(concepts, table);
}

}  // namespace emcomm
