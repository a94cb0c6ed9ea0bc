#pragma once

// Flat sectioned network description:
//
//   [net]
//   input = 1x28x28
//   classes = 10
//   seed = 1
//
//   [layer e1]
//   type = epitomic
//   epitomes = 32
//   ...
//
// '#' starts a comment. Unknown keys, keys that do not apply to a layer type
// and duplicate keys are errors.

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace epinet {

enum class LayerType { epitomic, topographic, conv, maxpool, relu, lrn, dropout, fc, softmax };

inline std::string to_string(LayerType t) {
  switch (t) {
    case LayerType::epitomic: return "epitomic";
    case LayerType::topographic: return "topographic";
    case LayerType::conv: return "conv";
    case LayerType::maxpool: return "maxpool";
    case LayerType::relu: return "relu";
    case LayerType::lrn: return "lrn";
    case LayerType::dropout: return "dropout";
    case LayerType::fc: return "fc";
    case LayerType::softmax: return "softmax";
  }
  return "?";
}

/// Item shape (channels, height, width), batch excluded.
struct ItemShape {
  std::size_t c = 0, h = 0, w = 0;
  friend bool operator==(const ItemShape&, const ItemShape&) = default;
  std::string str() const { return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w); }
  Shape batch(std::size_t n) const { return {n, c, h, w}; }
};

struct LayerSpec {
  std::string name;
  LayerType type = LayerType::relu;
  int line = 0;

  std::size_t channels = 0;        // conv filters, fc outputs
  std::size_t epitomes = 0;        // K
  std::size_t epitome = 0;         // V
  std::size_t filter = 0;          // W
  std::size_t stride = 1;          // input stride
  std::size_t epitome_stride = 1;  // s_e
  std::size_t pool = 0;            // maxpool window / topographic P_e
  std::size_t pool_stride = 0;     // maxpool only; 0 means "same as pool"
  bool normalize = false;
  double lambda = 0.01;
  double init_std = 0.01;          // Gaussian weight init
  double dropout = 0.5;
  std::size_t lrn_n = 5;
  double lrn_alpha = 1e-4;
  double lrn_beta = 0.75;
  double lrn_k = 2.0;
  std::size_t classes = 0;

  ItemShape in{}, out{};  // filled by shape inference
};

struct NetworkConfig {
  ItemShape input{};
  std::size_t classes = 0;
  std::uint64_t seed = 1;
  std::vector<LayerSpec> layers;
  std::string canonical;  // whitespace-normalized text used for the fingerprint

  ItemShape output() const { return layers.empty() ? input : layers.back().out; }
  const LayerSpec* find(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return &l;
    return nullptr;
  }
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fingerprint(const NetworkConfig& cfg) { return fnv1a64(cfg.canonical); }

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string collapse_spaces(const std::string& s) {
  std::string out;
  bool space = false;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out += ' ';
    space = false;
    out += ch;
  }
  return out;
}

inline std::size_t parse_count(const std::string& v, const std::string& key, int line) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'", line);
  try {
    return static_cast<std::size_t>(std::stoull(v));
  } catch (const std::logic_error&) {
    throw ConfigError("'" + key + "' value '" + v + "' is out of range", line);
  }
}

inline double parse_real(const std::string& v, const std::string& key, int line) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'", line);
  }
}

inline bool parse_bool(const std::string& v, const std::string& key, int line) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'", line);
}

inline ItemShape parse_item_shape(const std::string& v, int line) {
  std::vector<std::size_t> dims;
  std::string cur;
  for (char ch : v + "x") {
    if (ch == 'x' || ch == 'X' || ch == ',') {
      dims.push_back(parse_count(trim(cur), "input", line));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (dims.size() != 3) throw ConfigError("'input' expects CxHxW, got '" + v + "'", line);
  return {dims[0], dims[1], dims[2]};
}

inline std::optional<LayerType> parse_type(const std::string& v) {
  static const std::map<std::string, LayerType> types = {
      {"epitomic", LayerType::epitomic}, {"topographic", LayerType::topographic},
      {"conv", LayerType::conv},         {"maxpool", LayerType::maxpool},
      {"relu", LayerType::relu},         {"lrn", LayerType::lrn},
      {"dropout", LayerType::dropout},   {"fc", LayerType::fc},
      {"softmax", LayerType::softmax}};
  auto it = types.find(v);
  if (it == types.end()) return std::nullopt;
  return it->second;
}

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "type",     "channels",    "epitomes", "epitome", "filter",  "stride",
      "epitome_stride", "pool",  "pool_stride", "normalize", "lambda", "dropout",
      "lrn_n",    "lrn_alpha",   "lrn_beta", "lrn_k",   "classes", "input", "init_std"};
  return keys;
}

inline std::set<std::string> allowed_keys(LayerType t) {
  switch (t) {
    case LayerType::epitomic:
      return {"type", "epitomes", "epitome", "filter", "stride", "epitome_stride", "normalize", "lambda", "init_std"};
    case LayerType::topographic:
      return {"type", "epitomes", "epitome", "filter", "stride", "epitome_stride", "pool",
              "normalize", "lambda", "init_std"};
    case LayerType::conv: return {"type", "channels", "filter", "stride", "init_std"};
    case LayerType::maxpool: return {"type", "pool", "pool_stride"};
    case LayerType::relu: return {"type"};
    case LayerType::lrn: return {"type", "lrn_n", "lrn_alpha", "lrn_beta", "lrn_k"};
    case LayerType::dropout: return {"type", "dropout"};
    case LayerType::fc: return {"type", "channels", "init_std"};
    case LayerType::softmax: return {"type", "classes"};
  }
  return {};
}

inline std::set<std::string> required_keys(LayerType t) {
  switch (t) {
    case LayerType::epitomic: return {"epitomes", "epitome", "filter"};
    case LayerType::topographic: return {"epitomes", "epitome", "filter", "pool"};
    case LayerType::conv: return {"channels", "filter"};
    case LayerType::maxpool: return {"pool"};
    case LayerType::fc: return {"channels"};
    default: return {};
  }
}

struct RawSection {
  std::string header;  // "net" or layer name
  bool is_net = false;
  int line = 0;
  std::vector<std::pair<std::string, std::pair<std::string, int>>> entries;  // key -> (value, line)
};

inline std::size_t topographic_outputs_per_axis(const LayerSpec& l) {
  const std::size_t nc = (l.epitome - l.filter) / l.epitome_stride + 1;
  return (nc - l.pool) / l.pool + 1;
}

}  // namespace detail

/// Fills in/out shapes for every layer; throws naming both layers when a
/// layer cannot consume its predecessor's output.
inline void infer_shapes(NetworkConfig& cfg) {
  ItemShape cur = cfg.input;
  std::string prev = "input";
  std::size_t softmax_count = 0;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    LayerSpec& l = cfg.layers[i];
    const std::string who = "layer '" + l.name + "' (" + to_string(l.type) + ")";
    auto fail = [&](const std::string& why) {
      throw ConfigError(who + " cannot follow '" + prev + "' with output " + cur.str() + ": " + why, l.line);
    };
    auto window = [&](std::size_t win, std::size_t stride) {
      if (win == 0) fail("window size must be positive");
      if (stride == 0) fail("stride must be positive");
      if (win > cur.h || win > cur.w)
        fail("window " + std::to_string(win) + " exceeds spatial size " + std::to_string(cur.h) + "x" +
             std::to_string(cur.w));
    };
    l.in = cur;
    if (softmax_count > 0) fail("softmax must be the last layer");
    if (!(l.init_std > 0.0) || !std::isfinite(l.init_std))
      throw ConfigError(who + ": init_std must be a positive finite number", l.line);
    switch (l.type) {
      case LayerType::epitomic:
      case LayerType::topographic: {
        if (l.epitomes == 0) fail("epitomes must be positive");
        if (l.epitome < l.filter) fail("epitome smaller than filter");
        if (l.epitome - l.filter > 255) fail("epitome minus filter exceeds 255");
        if (l.epitome_stride == 0) fail("epitome_stride must be positive");
        if (l.normalize && !(l.lambda > 0.0)) fail("normalize requires lambda > 0");
        if (l.lambda < 0.0) fail("lambda must be non-negative");
        window(l.filter, l.stride);
        std::size_t per_epitome = 1;
        if (l.type == LayerType::topographic) {
          const std::size_t nc = (l.epitome - l.filter) / l.epitome_stride + 1;
          if (l.pool == 0 || l.pool > nc)
            fail("pool " + std::to_string(l.pool) + " must lie in 1.." + std::to_string(nc));
          const std::size_t no = detail::topographic_outputs_per_axis(l);
          per_epitome = no * no;
        }
        cur = {l.epitomes * per_epitome, valid_extent(cur.h, l.filter, l.stride),
               valid_extent(cur.w, l.filter, l.stride)};
        break;
      }
      case LayerType::conv:
        if (l.channels == 0) fail("channels must be positive");
        window(l.filter, l.stride);
        cur = {l.channels, valid_extent(cur.h, l.filter, l.stride), valid_extent(cur.w, l.filter, l.stride)};
        break;
      case LayerType::maxpool: {
        const std::size_t ps = l.pool_stride == 0 ? l.pool : l.pool_stride;
        if (l.pool > 255) fail("pool must not exceed 255");
        window(l.pool, ps);
        cur = {cur.c, valid_extent(cur.h, l.pool, ps), valid_extent(cur.w, l.pool, ps)};
        break;
      }
      case LayerType::relu: break;
      case LayerType::lrn:
        if (l.lrn_n % 2 == 0) fail("lrn_n must be odd");
        if (!(l.lrn_alpha >= 0.0) || !(l.lrn_k > 0.0)) fail("lrn_alpha must be >= 0 and lrn_k > 0");
        break;
      case LayerType::dropout:
        if (!(l.dropout >= 0.0 && l.dropout < 1.0)) fail("dropout rate must lie in [0, 1)");
        break;
      case LayerType::fc:
        if (l.channels == 0) fail("channels must be positive");
        cur = {l.channels, 1, 1};
        break;
      case LayerType::softmax:
        ++softmax_count;
        if (cur.h != 1 || cur.w != 1) fail("softmax needs a flat input (use an fc layer first)");
        if (l.classes != 0 && l.classes != cur.c)
          fail("softmax declares " + std::to_string(l.classes) + " classes");
        if (cfg.classes != 0 && cur.c != cfg.classes)
          fail("net declares " + std::to_string(cfg.classes) + " classes but logits have " + std::to_string(cur.c));
        break;
    }
    l.out = cur;
    prev = l.name;
  }
  if (softmax_count != 1) throw ConfigError("network needs exactly one terminal softmax layer");
}

inline NetworkConfig parse_config(const std::string& text) {
  using namespace detail;
  std::vector<RawSection> sections;
  std::vector<std::string> canon;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("unterminated section header", lineno);
      const std::string inner = collapse_spaces(line.substr(1, line.size() - 2));
      RawSection sec;
      sec.line = lineno;
      if (inner == "net") {
        sec.is_net = true;
        sec.header = "net";
      } else if (inner.rfind("layer ", 0) == 0 && inner.size() > 6 && inner.find(' ', 6) == std::string::npos) {
        sec.header = inner.substr(6);
      } else {
        throw ConfigError("section must be [net] or [layer <name>], got [" + inner + "]", lineno);
      }
      sections.push_back(std::move(sec));
      canon.push_back("[" + inner + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", lineno);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = collapse_spaces(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("missing key before '='", lineno);
    if (sections.empty()) throw ConfigError("'" + key + "' appears before any section", lineno);
    sections.back().entries.push_back({key, {value, lineno}});
    canon.push_back(key + "=" + value);
  }

  NetworkConfig cfg;
  for (const auto& line : canon) cfg.canonical += line + "\n";

  bool seen_net = false;
  std::set<std::string> names;
  for (const auto& sec : sections) {
    std::set<std::string> seen;
    for (const auto& [key, v] : sec.entries)
      if (!seen.insert(key).second)
        throw ConfigError("duplicate key '" + key + "' in [" + (sec.is_net ? "net" : "layer " + sec.header) + "]",
                          v.second);
    if (sec.is_net) {
      if (seen_net) throw ConfigError("duplicate [net] section", sec.line);
      seen_net = true;
      for (const auto& [key, v] : sec.entries) {
        if (key == "input") cfg.input = parse_item_shape(v.first, v.second);
        else if (key == "classes") cfg.classes = parse_count(v.first, key, v.second);
        else if (key == "seed") cfg.seed = parse_count(v.first, key, v.second);
        else throw ConfigError("unknown key '" + key + "' in [net]", v.second);
      }
      if (cfg.input.c == 0 || cfg.input.h == 0 || cfg.input.w == 0)
        throw ConfigError("[net] needs a positive 'input = CxHxW'", sec.line);
      continue;
    }
    if (!names.insert(sec.header).second) throw ConfigError("duplicate layer name '" + sec.header + "'", sec.line);
    LayerSpec l;
    l.name = sec.header;
    l.line = sec.line;
    const std::string where = "[layer " + sec.header + "]";
    auto type_it = std::find_if(sec.entries.begin(), sec.entries.end(), [](const auto& e) { return e.first == "type"; });
    if (type_it == sec.entries.end()) throw ConfigError(where + " is missing required key 'type'", sec.line);
    const auto type = parse_type(type_it->second.first);
    if (!type) throw ConfigError(where + ": unknown layer type '" + type_it->second.first + "'", type_it->second.second);
    l.type = *type;
    if (l.type == LayerType::topographic) l.normalize = true;
    const auto allowed = allowed_keys(l.type);
    for (const auto& [key, v] : sec.entries) {
      const auto& [value, ln] = v;
      if (!known_keys().count(key)) throw ConfigError(where + ": unknown key '" + key + "'", ln);
      if (!allowed.count(key))
        throw ConfigError(where + ": key '" + key + "' does not apply to " + to_string(l.type) + " layers", ln);
      if (key == "type") continue;
      if (key == "channels") l.channels = parse_count(value, key, ln);
      else if (key == "epitomes") l.epitomes = parse_count(value, key, ln);
      else if (key == "epitome") l.epitome = parse_count(value, key, ln);
      else if (key == "filter") l.filter = parse_count(value, key, ln);
      else if (key == "stride") l.stride = parse_count(value, key, ln);
      else if (key == "epitome_stride") l.epitome_stride = parse_count(value, key, ln);
      else if (key == "pool") l.pool = parse_count(value, key, ln);
      else if (key == "pool_stride") l.pool_stride = parse_count(value, key, ln);
      else if (key == "normalize") l.normalize = parse_bool(value, key, ln);
      else if (key == "lambda") l.lambda = parse_real(value, key, ln);
      else if (key == "init_std") l.init_std = parse_real(value, key, ln);
      else if (key == "dropout") l.dropout = parse_real(value, key, ln);
      else if (key == "lrn_n") l.lrn_n = parse_count(value, key, ln);
      else if (key == "lrn_alpha") l.lrn_alpha = parse_real(value, key, ln);
      else if (key == "lrn_beta") l.lrn_beta = parse_real(value, key, ln);
      else if (key == "lrn_k") l.lrn_k = parse_real(value, key, ln);
      else if (key == "classes") l.classes = parse_count(value, key, ln);
    }
    for (const auto& key : required_keys(l.type))
      if (!seen.count(key))
        throw ConfigError(where + " is missing required key '" + key + "' for " + to_string(l.type) + " layers",
                          sec.line);
    cfg.layers.push_back(std::move(l));
  }
  if (!seen_net) throw ConfigError("missing [net] section");
  if (cfg.layers.empty()) throw ConfigError("network has no layers");
  infer_shapes(cfg);
  return cfg;
}

inline NetworkConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace epinet
