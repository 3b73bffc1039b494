#pragma once

// Flat key-value model description:
//
//   # comment
//   base = nano             # optional: start from a built-in variant
//   heads = [2, 3, 4]
//   use_coordinators = false
//
// Unknown or repeated keys, malformed values and inconsistent models are all
// rejected with a ConfigError naming the line or stage.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "coca/backbone/config.hpp"

namespace coca {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class I>
I parse_integer(std::string_view s, const std::string& where) {
  s = trim(s);
  I v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw ConfigError(where + ": expected an integer, got '" + std::string(s) + "'");
  return v;
}

template <class I>
std::vector<I> parse_list(std::string_view s, const std::string& where) {
  s = trim(s);
  if (s.size() < 2 || s.front() != '[' || s.back() != ']')
    throw ConfigError(where + ": expected a bracketed list, got '" + std::string(s) + "'");
  s = trim(s.substr(1, s.size() - 2));
  std::vector<I> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(parse_integer<I>(s.substr(start, comma == std::string_view::npos ? comma : comma - start), where));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline bool parse_bool(std::string_view s, const std::string& where) {
  s = trim(s);
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError(where + ": expected true or false, got '" + std::string(s) + "'");
}

template <class I>
std::string format_list(const std::vector<I>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

}  // namespace detail

inline ModelConfig parse_config(const std::string& text, const std::string& source = "config") {
  using Setter = std::function<void(ModelConfig&, std::string_view, const std::string&)>;
  auto size = [](std::size_t ModelConfig::*f) -> Setter {
    return [f](ModelConfig& c, std::string_view v, const std::string& w) {
      c.*f = detail::parse_integer<std::size_t>(v, w);
    };
  };
  auto sizes = [](std::vector<std::size_t> ModelConfig::*f) -> Setter {
    return [f](ModelConfig& c, std::string_view v, const std::string& w) {
      c.*f = detail::parse_list<std::size_t>(v, w);
    };
  };
  const std::map<std::string, Setter, std::less<>> setters = {
      {"name", [](ModelConfig& c, std::string_view v, const std::string&) { c.name = std::string(detail::trim(v)); }},
      {"conv_dim", size(&ModelConfig::conv_dim)},
      {"head_dim", size(&ModelConfig::head_dim)},
      {"heads", sizes(&ModelConfig::heads)},
      {"depths", sizes(&ModelConfig::depths)},
      {"mlp_ratios", sizes(&ModelConfig::mlp_ratios)},
      {"windows", sizes(&ModelConfig::windows)},
      {"interaction",
       [](ModelConfig& c, std::string_view v, const std::string& w) { c.interaction = detail::parse_list<int>(v, w); }},
      {"dims", sizes(&ModelConfig::dims)},
      {"num_classes", size(&ModelConfig::num_classes)},
      {"image_size", size(&ModelConfig::image_size)},
      {"coordinators", size(&ModelConfig::coordinators)},
      {"mbconv_expand", size(&ModelConfig::mbconv_expand)},
      {"coord_mlp_ratio", size(&ModelConfig::coord_mlp_ratio)},
      {"head_hidden", size(&ModelConfig::head_hidden)},
      {"use_coordinators",
       [](ModelConfig& c, std::string_view v, const std::string& w) { c.use_coordinators = detail::parse_bool(v, w); }},
  };

  struct Entry {
    std::string key, value, where;
  };
  std::vector<Entry> entries;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    std::string_view s = line;
    s = detail::trim(s.substr(0, s.find('#')));
    if (s.empty()) continue;
    const std::string where = source + ":" + std::to_string(n);
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    std::string key(detail::trim(s.substr(0, eq)));
    if (key != "base" && !setters.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": key '" + key + "' given twice");
    entries.push_back({key, std::string(detail::trim(s.substr(eq + 1))), where});
  }

  ModelConfig c;
  for (const auto& e : entries) {
    if (e.key != "base") continue;
    auto v = find_variant(e.value);
    if (!v) throw ConfigError(e.where + ": unknown base variant '" + e.value + "'");
    c = *v;
  }
  for (const auto& e : entries)
    if (e.key != "base") setters.find(e.key)->second(c, e.value, e.where);
  c.validate();
  return c;
}

/// Text that parse_config reads back to an equal configuration.
inline std::string format_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "name = " << c.name << '\n'
     << "conv_dim = " << c.conv_dim << '\n'
     << "head_dim = " << c.head_dim << '\n'
     << "heads = " << detail::format_list(c.heads) << '\n'
     << "depths = " << detail::format_list(c.depths) << '\n'
     << "mlp_ratios = " << detail::format_list(c.mlp_ratios) << '\n'
     << "windows = " << detail::format_list(c.windows) << '\n'
     << "interaction = " << detail::format_list(c.interaction) << '\n';
  if (!c.dims.empty()) os << "dims = " << detail::format_list(c.dims) << '\n';
  os << "num_classes = " << c.num_classes << '\n'
     << "image_size = " << c.image_size << '\n'
     << "coordinators = " << c.coordinators << '\n'
     << "mbconv_expand = " << c.mbconv_expand << '\n'
     << "coord_mlp_ratio = " << c.coord_mlp_ratio << '\n'
     << "head_hidden = " << c.head_hidden << '\n'
     << "use_coordinators = " << (c.use_coordinators ? "true" : "false") << '\n';
  return os.str();
}

inline ModelConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

inline bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return format_config(a) == format_config(b);
}

}  // namespace coca
