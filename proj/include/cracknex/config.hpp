#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cracknex/losses.hpp"
#include "cracknex/ops.hpp"
#include "cracknex/protonet.hpp"

namespace cracknex {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Toggles {
  bool use_reflectance = true;
  bool use_pfm = true;
  bool use_aspp = true;

  bool operator==(const Toggles&) const = default;
};

struct TrainConfig {
  // Optimisation schedule.
  int iterations = 6000;
  int batch_episodes = 4;
  double lr0 = 1e-3;
  double momentum = 0.9;
  int decay_every = 2000;
  double decay_factor = 0.1;
  bool augment_hflip = true;

  int shots = 1;
  std::uint64_t seed = 0;
  LossWeights weights;
  Toggles toggles;
  double temperature = 10.0;
  SSPConfig ssp;

  // Model and input geometry.
  int channels = 64;
  int image_height = 96;
  int image_width = 96;
  double retinex_sigma = 0.0;  // <= 0 selects min(H, W) / 16
  PadMode padding = PadMode::Zero;

  int eval_episodes = 1000;

  double smoothing_sigma() const {
    return retinex_sigma > 0 ? retinex_sigma
                             : std::min(image_height, image_width) / 16.0;
  }

  void validate() const {
    auto check = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    check(iterations >= 0, "iterations must be >= 0");
    check(batch_episodes >= 1, "batch_episodes must be >= 1");
    check(lr0 > 0 && std::isfinite(lr0), "lr0 must be positive");
    check(momentum >= 0 && momentum < 1, "momentum must be in [0,1)");
    check(decay_every >= 1, "decay_every must be >= 1");
    check(decay_factor > 0 && decay_factor < 1, "decay_factor must be in (0,1)");
    check(shots >= 1, "shots must be >= 1");
    check(temperature > 0, "temperature must be > 0");
    check(channels >= 1, "channels must be >= 1");
    check(image_height > 0 && image_width > 0 && image_height % 8 == 0 &&
              image_width % 8 == 0,
          "image_height and image_width must be positive multiples of 8");
    check(eval_episodes >= 1, "eval_episodes must be >= 1");
    try {
      weights.validate();
      ssp.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && text.front() == '+') ++first;
  auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
}

inline std::string pad_name(PadMode m) {
  switch (m) {
    case PadMode::Zero: return "zero";
    case PadMode::Circular: return "circular";
    case PadMode::Reflect: return "reflect";
  }
  return "zero";
}

inline PadMode parse_pad(const std::string& key, const std::string& text) {
  if (text == "zero") return PadMode::Zero;
  if (text == "circular") return PadMode::Circular;
  if (text == "reflect") return PadMode::Reflect;
  throw ConfigError("config key '" + key + "': unknown padding '" + text + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
};

template <typename N>
Field int_field(N TrainConfig::*member) {
  return {[member](const TrainConfig& c) { return std::to_string(c.*member); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) {
            c.*member = parse_number<N>(k, v);
          }};
}

inline Field real_field(std::function<double&(TrainConfig&)> ref) {
  return {[ref](const TrainConfig& c) {
            auto copy = c;
            return format_double(ref(copy));
          },
          [ref](TrainConfig& c, const std::string& k, const std::string& v) {
            ref(c) = parse_number<double>(k, v);
          }};
}

inline Field bool_field(std::function<bool&(TrainConfig&)> ref) {
  return {[ref](const TrainConfig& c) {
            auto copy = c;
            return std::string(ref(copy) ? "true" : "false");
          },
          [ref](TrainConfig& c, const std::string& k, const std::string& v) {
            ref(c) = parse_bool(k, v);
          }};
}

// Key order here is the serialisation order.
inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"iterations", int_field(&TrainConfig::iterations)},
      {"batch_episodes", int_field(&TrainConfig::batch_episodes)},
      {"lr0", real_field([](TrainConfig& c) -> double& { return c.lr0; })},
      {"momentum", real_field([](TrainConfig& c) -> double& { return c.momentum; })},
      {"decay_every", int_field(&TrainConfig::decay_every)},
      {"decay_factor", real_field([](TrainConfig& c) -> double& { return c.decay_factor; })},
      {"augment_hflip", bool_field([](TrainConfig& c) -> bool& { return c.augment_hflip; })},
      {"shots", int_field(&TrainConfig::shots)},
      {"seed", int_field(&TrainConfig::seed)},
      {"lambda1", real_field([](TrainConfig& c) -> double& { return c.weights.lambda1; })},
      {"lambda2", real_field([](TrainConfig& c) -> double& { return c.weights.lambda2; })},
      {"use_reflectance",
       bool_field([](TrainConfig& c) -> bool& { return c.toggles.use_reflectance; })},
      {"use_pfm", bool_field([](TrainConfig& c) -> bool& { return c.toggles.use_pfm; })},
      {"use_aspp", bool_field([](TrainConfig& c) -> bool& { return c.toggles.use_aspp; })},
      {"temperature", real_field([](TrainConfig& c) -> double& { return c.temperature; })},
      {"tau_fg", real_field([](TrainConfig& c) -> double& { return c.ssp.tau_fg; })},
      {"tau_bg", real_field([](TrainConfig& c) -> double& { return c.ssp.tau_bg; })},
      {"blend", real_field([](TrainConfig& c) -> double& { return c.ssp.blend; })},
      {"channels", int_field(&TrainConfig::channels)},
      {"image_height", int_field(&TrainConfig::image_height)},
      {"image_width", int_field(&TrainConfig::image_width)},
      {"retinex_sigma", real_field([](TrainConfig& c) -> double& { return c.retinex_sigma; })},
      {"padding",
       {[](const TrainConfig& c) { return pad_name(c.padding); },
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          c.padding = parse_pad(k, v);
        }}},
      {"eval_episodes", int_field(&TrainConfig::eval_episodes)},
  };
  return fields;
}

}  // namespace detail

/// Flat `key = value` text, one optional section header, `#`/`;` comments.
/// Absent keys keep their defaults; unknown keys are an error.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::map<std::string, const detail::Field*> lookup;
  for (const auto& [k, f] : detail::config_fields()) lookup[k] = &f;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  int sections = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": bad section header");
      if (++sections > 1) throw ConfigError("line " + std::to_string(line_no) + ": only one section is allowed");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto it = lookup.find(key);
    if (it == lookup.end()) throw ConfigError("unknown config key '" + key + "'");
    if (seen[key]++) throw ConfigError("duplicate config key '" + key + "'");
    it->second->set(base, key, value);
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string to_config_text(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, f] : detail::config_fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace cracknex
