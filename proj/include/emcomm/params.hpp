#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "emcomm/diffcore.hpp"
#include "emcomm/error.hpp"
#include "emcomm/random.hpp"

namespace emcomm::diff {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Named parameters plus Adam moments. Parameters are heap-allocated so the
// addresses handed to tapes stay stable as the store grows.
class ParamStore {
 public:
  explicit ParamStore(AdamConfig adam = {}) : adam_(adam) {}

  ParamStore(const ParamStore& other) : adam_(other.adam_), step_(other.step_) {
    for (const auto& e : other.entries_) entries_.push_back(std::make_unique<Entry>(*e));
    reindex();
  }
  ParamStore& operator=(const ParamStore& other) {
    if (this != &other) {
      ParamStore copy(other);
      *this = std::move(copy);
    }
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter& add(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw Error(ErrorCode::ShapeMismatch, "duplicate parameter " + name);
    auto e = std::make_unique<Entry>();
    e->param = Parameter(name, rows, cols);
    e->m.assign(e->param.size(), 0.0);
    e->v.assign(e->param.size(), 0.0);
    entries_.push_back(std::move(e));
    index_[name] = entries_.size() - 1;
    return entries_.back()->param;
  }

  // Glorot-uniform weights, zero bias.
  Parameter& add_glorot(const std::string& name, int rows, int cols, Rng& rng) {
    Parameter& p = add(name, rows, cols);
    const double limit = std::sqrt(6.0 / (rows + cols));
    for (double& x : p.value) x = (2.0 * rng.uniform() - 1.0) * limit;
    return p;
  }

  Parameter& get(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::ShapeMismatch, "no parameter " + name);
    return entries_[it->second]->param;
  }
  const Parameter& get(const std::string& name) const { return const_cast<ParamStore*>(this)->get(name); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  Parameter& at(std::size_t i) { return entries_[i]->param; }
  const Parameter& at(std::size_t i) const { return entries_[i]->param; }
  const std::vector<double>& first_moment(std::size_t i) const { return entries_[i]->m; }
  const std::vector<double>& second_moment(std::size_t i) const { return entries_[i]->v; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e->param.size();
    return n;
  }

  const AdamConfig& adam() const { return adam_; }
  void set_learning_rate(double lr) { adam_.learning_rate = lr; }
  int64_t step_count() const { return step_; }

  void zero_grad() {
    for (auto& e : entries_) std::fill(e->param.grad.begin(), e->param.grad.end(), 0.0);
  }

  void scale_grad(double s) {
    for (auto& e : entries_)
      for (double& g : e->param.grad) g *= s;
  }

  // One bias-corrected Adam step using the accumulated gradients, then clears them.
  void optimize_step() {
    ++step_;
    const double c1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(step_));
    for (auto& e : entries_) {
      auto& p = e->param;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        e->m[i] = adam_.beta1 * e->m[i] + (1.0 - adam_.beta1) * g;
        e->v[i] = adam_.beta2 * e->v[i] + (1.0 - adam_.beta2) * g * g;
        const double mhat = e->m[i] / c1;
        const double vhat = e->v[i] / c2;
        p.value[i] -= adam_.learning_rate * mhat / (std::sqrt(vhat) + adam_.epsilon);
      }
    }
    zero_grad();
  }

  // FNV-1a over the raw parameter bytes.
  uint64_t value_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : entries_)
      for (double x : e->param.value) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &x, sizeof(double));
        for (unsigned char b : bytes) h = (h ^ b) * 0x100000001b3ULL;
      }
    return h;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.step_ != b.step_ || a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = *a.entries_[i];
      const auto& y = *b.entries_[i];
      if (x.param.name != y.param.name || x.param.rows != y.param.rows || x.param.cols != y.param.cols) return false;
      if (std::memcmp(x.param.value.data(), y.param.value.data(), x.param.size() * sizeof(double)) != 0) return false;
      if (std::memcmp(x.m.data(), y.m.data(), x.m.size() * sizeof(double)) != 0) return false;
      if (std::memcmp(x.v.data(), y.v.data(), x.v.size() * sizeof(double)) != 0) return false;
    }
    return true;
  }

 private:
  friend struct StoreCodec;

  struct Entry {
    Parameter param;
    std::vector<double> m;
    std::vector<double> v;
  };

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i]->param.name] = i;
  }

  AdamConfig adam_;
  int64_t step_ = 0;
  std::vector<std::unique_ptr<Entry>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class Activation : uint8_t { linear, tanh, relu };

// Affine map plus nonlinearity. Weight is out x in, bias 1 x out.
struct Dense {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  Activation activation = Activation::tanh;

  int in() const { return weight->cols; }
  int out() const { return weight->rows; }

  static Dense create(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                      Activation act = Activation::tanh) {
    Dense d;
    d.weight = &store.add_glorot(name + ".w", out, in, rng);
    d.bias = &store.add(name + ".b", 1, out);
    d.activation = act;
    return d;
  }

  static Dense bind(ParamStore& store, const std::string& name, Activation act = Activation::tanh) {
    return Dense{&store.get(name + ".w"), &store.get(name + ".b"), act};
  }
};

inline Tensor forward_dense(Tensor x, const Dense& layer) {
  Tape& t = *x.tape;
  Tensor y = affine(x, t.param(*layer.weight), t.param(*layer.bias));
  switch (layer.activation) {
    case Activation::linear: return y;
    case Activation::tanh: return tanh(y);
    case Activation::relu: return relu(y);
  }
  return y;
}

// Checkpoint byte layout (little-endian):
//   magic "EMCOMMCK" (8 bytes) | u32 format version | u64 config hash | u32 block count
//   per block: u32 name length | name bytes | u32 rows | u32 cols | f64[rows * cols]
struct Block {
  std::string name;
  uint32_t rows = 0;
  uint32_t cols = 0;
  std::vector<double> values;

  bool operator==(const Block&) const = default;
};

struct Checkpoint {
  static constexpr char kMagic[8] = {'E', 'M', 'C', 'O', 'M', 'M', 'C', 'K'};
  static constexpr uint32_t kVersion = 1;

  uint64_t config_hash = 0;
  std::vector<Block> blocks;

  const Block* find(std::string_view name) const {
    for (const auto& b : blocks)
      if (b.name == name) return &b;
    return nullptr;
  }
};

// Flattens a store to blocks named "<prefix>/<param>", with Adam state in
// "<prefix>/<param>/adam_m", ".../adam_v" and "<prefix>/adam_step".
struct StoreCodec {
  static void append(const ParamStore& store, const std::string& prefix, std::vector<Block>& out) {
    for (const auto& e : store.entries_) {
      const auto& p = e->param;
      const std::string base = prefix + "/" + p.name;
      out.push_back({base, static_cast<uint32_t>(p.rows), static_cast<uint32_t>(p.cols), p.value});
      out.push_back({base + "/adam_m", static_cast<uint32_t>(p.rows), static_cast<uint32_t>(p.cols), e->m});
      out.push_back({base + "/adam_v", static_cast<uint32_t>(p.rows), static_cast<uint32_t>(p.cols), e->v});
    }
    out.push_back({prefix + "/adam_step", 1, 1, {static_cast<double>(store.step_)}});
  }

  // Loads into a store whose parameters already exist with matching shapes.
  static void load(ParamStore& store, const std::string& prefix, const Checkpoint& ck) {
    auto need = [&](const std::string& name, int rows, int cols) -> const Block& {
      const Block* b = ck.find(name);
      if (!b) throw Error(ErrorCode::CorruptCheckpoint, "missing block " + name);
      if (static_cast<int>(b->rows) != rows || static_cast<int>(b->cols) != cols)
        throw Error(ErrorCode::CorruptCheckpoint, "shape mismatch for block " + name);
      return *b;
    };
    for (auto& e : store.entries_) {
      auto& p = e->param;
      const std::string base = prefix + "/" + p.name;
      p.value = need(base, p.rows, p.cols).values;
      e->m = need(base + "/adam_m", p.rows, p.cols).values;
      e->v = need(base + "/adam_v", p.rows, p.cols).values;
    }
    store.step_ = static_cast<int64_t>(need(prefix + "/adam_step", 1, 1).values[0]);
  }
};

namespace io {

template <typename T>
void put(std::string& out, T x) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &x, sizeof(T));
  // Stored little-endian regardless of host order.
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error(ErrorCode::CorruptCheckpoint, "truncated checkpoint");
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  pos += sizeof(T);
  T x;
  std::memcpy(&x, bytes, sizeof(T));
  return x;
}

}  // namespace io

inline std::string serialize(const Checkpoint& ck) {
  std::string out(Checkpoint::kMagic, sizeof(Checkpoint::kMagic));
  io::put<uint32_t>(out, Checkpoint::kVersion);
  io::put<uint64_t>(out, ck.config_hash);
  io::put<uint32_t>(out, static_cast<uint32_t>(ck.blocks.size()));
  for (const auto& b : ck.blocks) {
    io::put<uint32_t>(out, static_cast<uint32_t>(b.name.size()));
    out.append(b.name);
    io::put<uint32_t>(out, b.rows);
    io::put<uint32_t>(out, b.cols);
    for (double x : b.values) io::put<double>(out, x);
  }
  return out;
}

inline Checkpoint deserialize(std::string_view in) {
  if (in.size() < sizeof(Checkpoint::kMagic) || std::memcmp(in.data(), Checkpoint::kMagic, sizeof(Checkpoint::kMagic)) != 0)
    throw Error(ErrorCode::CorruptCheckpoint, "bad magic");
  std::size_t pos = sizeof(Checkpoint::kMagic);
  const auto version = io::get<uint32_t>(in, pos);
  if (version != Checkpoint::kVersion)
    throw Error(ErrorCode::CorruptCheckpoint, "unsupported format version " + std::to_string(version));
  Checkpoint ck;
  ck.config_hash = io::get<uint64_t>(in, pos);
  const auto count = io::get<uint32_t>(in, pos);
  for (uint32_t i = 0; i < count; ++i) {
    Block b;
    const auto len = io::get<uint32_t>(in, pos);
    if (pos + len > in.size()) throw Error(ErrorCode::CorruptCheckpoint, "truncated block name");
    b.name.assign(in.data() + pos, len);
    pos += len;
    b.rows = io::get<uint32_t>(in, pos);
    b.cols = io::get<uint32_t>(in, pos);
    const uint64_t n = static_cast<uint64_t>(b.rows) * b.cols;
    if (n > (in.size() - pos) / sizeof(double)) throw Error(ErrorCode::CorruptCheckpoint, "truncated block " + b.name);
    b.values.resize(n);
    for (auto& x : b.values) x = io::get<double>(in, pos);
    ck.blocks.push_back(std::move(b));
  }
  if (pos != in.size()) throw Error(ErrorCode::CorruptCheckpoint, "trailing bytes");
  return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::MissingArtifact, "cannot write " + path);
  const auto bytes = serialize(ck);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::MissingArtifact, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace emcomm::diff
