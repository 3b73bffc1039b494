#pragma once

// Layer naming and MAC accounting.
//
// Layers push a name on entry (LayerScope); the joined path ("stage3.block4.gcwa")
// is used both to label non-finite diagnostics and as the key under which
// matmul/conv MACs are recorded by an active MacCounter. Both live in
// thread-local storage so concurrent forwards on different threads keep
// independent paths and counters.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace coca {

namespace detail {
inline std::vector<std::string>& scope_stack() {
  thread_local std::vector<std::string> stack;
  return stack;
}
}  // namespace detail

inline std::string current_scope() {
  std::string path;
  for (const auto& s : detail::scope_stack()) {
    if (!path.empty()) path += '.';
    path += s;
  }
  return path;
}

class LayerScope {
 public:
  explicit LayerScope(std::string name) { detail::scope_stack().push_back(std::move(name)); }
  ~LayerScope() { detail::scope_stack().pop_back(); }
  LayerScope(const LayerScope&) = delete;
  LayerScope& operator=(const LayerScope&) = delete;
};

/// Collects multiply-accumulate counts of every matmul and convolution executed
/// while it is installed. Counts are keyed by the innermost layer path.
class MacCounter {
 public:
  void add(std::uint64_t macs) { per_layer_[current_scope()] += macs; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& [k, v] : per_layer_) t += v;
    return t;
  }

  /// Sum over every layer whose path equals `prefix` or starts with `prefix.`.
  std::uint64_t total_under(const std::string& prefix) const {
    std::uint64_t t = 0;
    for (const auto& [k, v] : per_layer_) {
      if (k == prefix || (k.size() > prefix.size() && k.compare(0, prefix.size(), prefix) == 0 &&
                          k[prefix.size()] == '.'))
        t += v;
    }
    return t;
  }

  std::uint64_t at(const std::string& layer) const {
    auto it = per_layer_.find(layer);
    return it == per_layer_.end() ? 0 : it->second;
  }

  const std::map<std::string, std::uint64_t>& per_layer() const { return per_layer_; }
  void clear() { per_layer_.clear(); }

 private:
  std::map<std::string, std::uint64_t> per_layer_;
};

namespace detail {
inline MacCounter*& active_counter() {
  thread_local MacCounter* counter = nullptr;
  return counter;
}
}  // namespace detail

inline void record_macs(std::uint64_t macs) {
  if (auto* c = detail::active_counter()) c->add(macs);
}

/// Installs `counter` for the lifetime of the guard; restores the previous one after.
class CountingScope {
 public:
  explicit CountingScope(MacCounter& counter) : previous_(detail::active_counter()) {
    detail::active_counter() = &counter;
  }
  ~CountingScope() { detail::active_counter() = previous_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  MacCounter* previous_;
};

}  // namespace coca
