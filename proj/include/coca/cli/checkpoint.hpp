#pragma once

// Binary checkpoint, little-endian regardless of host:
//
//   "COCA"  u32 version
//   u64 config length, config text (format_config)
//   u64 tensor count, then per tensor:
//     u32 name length, name, u8 dtype (1 = f32, 2 = f64), u32 rank,
//     u64 extents[rank], raw element payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "coca/backbone/model.hpp"
#include "coca/cli/config_file.hpp"

namespace coca {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'C', 'O', 'C', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<std::uint8_t> payload;  // little-endian elements
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config;
  std::vector<CheckpointTensor> tensors;
};

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <class T>
std::vector<std::uint8_t> encode_elements(std::span<const T> data) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<std::uint8_t> out;
  out.reserve(data.size() * sizeof(T));
  for (T x : data) put_le(out, std::bit_cast<U>(x));
  return out;
}

template <class T>
void decode_elements(const std::vector<std::uint8_t>& bytes, std::span<T> out) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<T>(get_le<U>(bytes.data() + i * sizeof(T)));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw CheckpointError(std::string("truncated checkpoint reading ") + what);
  }

  template <class U>
  U le(const char* what) {
    std::uint8_t b[sizeof(U)];
    bytes(b, sizeof(U), what);
    return get_le<U>(b);
  }

  std::string str(std::size_t n, const char* what) {
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }

 private:
  std::istream& in_;
};

// guards against absurd lengths from corrupt files before allocating
inline constexpr std::uint64_t kMaxCheckpointField = 1ull << 34;

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  std::vector<std::uint8_t> b(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_le<std::uint32_t>(b, ck.version);
  detail::put_le<std::uint64_t>(b, ck.config.size());
  b.insert(b.end(), ck.config.begin(), ck.config.end());
  detail::put_le<std::uint64_t>(b, ck.tensors.size());
  for (const auto& t : ck.tensors) {
    if (t.payload.size() != numel(t.shape) * dtype_size(t.dtype))
      throw CheckpointError("tensor '" + t.name + "' payload does not match its shape");
    detail::put_le<std::uint32_t>(b, static_cast<std::uint32_t>(t.name.size()));
    b.insert(b.end(), t.name.begin(), t.name.end());
    b.push_back(static_cast<std::uint8_t>(t.dtype));
    detail::put_le<std::uint32_t>(b, static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) detail::put_le<std::uint64_t>(b, e);
    b.insert(b.end(), t.payload.begin(), t.payload.end());
  }
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw CheckpointError("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  detail::Reader r(in);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  Checkpoint ck;
  ck.version = r.le<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(ck.version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto cfg_len = r.le<std::uint64_t>("config length");
  if (cfg_len > detail::kMaxCheckpointField) throw CheckpointError("corrupt config length");
  ck.config = r.str(cfg_len, "config");
  const auto count = r.le<std::uint64_t>("tensor count");
  if (count > detail::kMaxCheckpointField) throw CheckpointError("corrupt tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.str(r.le<std::uint32_t>("name length"), "name");
    const auto tag = r.le<std::uint8_t>("dtype");
    if (tag != 1 && tag != 2) throw CheckpointError("tensor '" + t.name + "' has unknown dtype tag " + std::to_string(tag));
    t.dtype = static_cast<DType>(tag);
    const auto rank = r.le<std::uint32_t>("rank");
    if (rank > 16) throw CheckpointError("tensor '" + t.name + "' has corrupt rank");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.le<std::uint64_t>("extent"));
      n *= t.shape.back();
      if (n > detail::kMaxCheckpointField) throw CheckpointError("tensor '" + t.name + "' is implausibly large");
    }
    t.payload.resize(n * dtype_size(t.dtype));
    r.bytes(t.payload.data(), t.payload.size(), "payload");
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

template <class T>
Checkpoint snapshot(Model<T>& m) {
  Checkpoint ck;
  ck.config = format_config(m.config);
  m.visit("", [&](const std::string& name, Tensor<T>& t) {
    ck.tensors.push_back({name, dtype_of<T>(), t.shape(), detail::encode_elements<T>(t.data())});
  });
  return ck;
}

/// Rebuilds the model from the stored config and copies every tensor in.
/// The stored tensor set must match the model's exactly.
template <class T>
Model<T> restore(const Checkpoint& ck) {
  const ModelConfig cfg = parse_config(ck.config, "checkpoint config");
  Rng rng(0);
  Model<T> m = build_model<T>(cfg, rng);
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : ck.tensors)
    if (!by_name.emplace(t.name, &t).second) throw CheckpointError("duplicate tensor '" + t.name + "'");
  std::size_t matched = 0;
  m.visit("", [&](const std::string& name, Tensor<T>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    const auto& src = *it->second;
    if (src.dtype != dtype_of<T>())
      throw CheckpointError("tensor '" + name + "' stored as " + (src.dtype == DType::F32 ? "f32" : "f64") +
                            " cannot load into a " + (dtype_of<T>() == DType::F32 ? "f32" : "f64") + " model");
    if (src.shape != t.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + to_string(src.shape) + ", model expects " +
                            to_string(t.shape()));
    detail::decode_elements<T>(src.payload, t.mutable_data());
    ++matched;
  });
  if (matched != by_name.size()) throw CheckpointError("checkpoint holds tensors the model does not have");
  return m;
}

template <class T>
void save_model(const std::string& path, Model<T>& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  write_checkpoint(f, snapshot(m));
}

template <class T>
Model<T> load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "'");
  return restore<T>(read_checkpoint(f));
}

}  // namespace coca
