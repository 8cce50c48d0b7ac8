#include "amalgam/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "amalgam/checkpoint.hpp"
#include "amalgam/error.hpp"

namespace amalgam {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
  return out;
}

}  // namespace

ConfigMap parse_config(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::stringstream ss(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (!section.empty()) key = section + "." + key;
    out[key] = value;
  }
  return out;
}

ConfigMap load_config_file(const std::filesystem::path& path) {
  return parse_config(read_file(path), path.string());
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "seed",
      "scene.height", "scene.width", "scene.classes", "scene.min_primitives",
      "scene.max_primitives", "scene.near", "scene.far", "scene.noise", "scene.pixel_size",
      "data.train_first", "data.train_count", "data.eval_first", "data.eval_count",
      "net.encoder_widths", "net.convs_per_block", "net.output_width", "net.depth_bins",
      "net.bin_length",
      "train.epochs", "train.max_steps", "train.batch_size",
      "optim.profile", "optim.lr", "optim.momentum", "optim.weight_decay", "optim.poly_power",
      "amalg.mode", "amalg.lambda_depth", "amalg.lambda_seg", "amalg.lambda_norm",
      "amalg.lambda_u2", "amalg.epochs_per_block", "amalg.finetune_steps",
      "amalg.coding_reduction", "amalg.probe_samples",
  };
  return keys;
}

RunConfig resolve_config(const ConfigMap& values) {
  const auto& known = config_keys();
  for (const auto& [k, v] : values) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
  auto get = [&](const std::string& key) -> const std::string* {
    auto it = values.find(key);
    return it == values.end() ? nullptr : &it->second;
  };
  RunConfig c;
  if (const auto* v = get("seed")) {
    c.seed = parse_number<std::uint64_t>("seed", *v);
  } else {
    throw ConfigError("a seed is required (config key 'seed' or --seed)");
  }

  auto set_int = [&](const char* key, int& dst) {
    if (const auto* v = get(key)) dst = parse_number<int>(key, *v);
  };
  auto set_i64 = [&](const char* key, std::int64_t& dst) {
    if (const auto* v = get(key)) dst = parse_number<std::int64_t>(key, *v);
  };
  auto set_double = [&](const char* key, double& dst) {
    if (const auto* v = get(key)) dst = parse_double(key, *v);
  };

  set_int("scene.height", c.scene.height);
  set_int("scene.width", c.scene.width);
  set_int("scene.classes", c.scene.classes);
  set_int("scene.min_primitives", c.scene.min_primitives);
  set_int("scene.max_primitives", c.scene.max_primitives);
  set_double("scene.near", c.scene.near);
  set_double("scene.far", c.scene.far);
  set_double("scene.noise", c.scene.noise);
  set_double("scene.pixel_size", c.scene.intrinsics.pixel_size);
  c.scene.seed = c.seed;

  set_i64("data.train_first", c.data.train_first);
  set_int("data.train_count", c.data.train_count);
  set_i64("data.eval_first", c.data.eval_first);
  set_int("data.eval_count", c.data.eval_count);

  if (const auto* v = get("net.encoder_widths")) {
    c.arch.encoder_widths = parse_int_list("net.encoder_widths", *v);
  }
  set_int("net.convs_per_block", c.arch.convs_per_block);
  set_int("net.output_width", c.arch.output_width);
  c.heads.classes = c.scene.classes;
  set_int("net.depth_bins", c.heads.depth.bins);
  c.heads.depth.bin_length = 0.0;
  set_double("net.bin_length", c.heads.depth.bin_length);
  if (c.heads.depth.bins < 2) throw ConfigError("net.depth_bins must be >= 2");
  if (c.heads.depth.bin_length == 0.0) {
    c.heads.depth.bin_length = c.scene.far / c.heads.depth.bins;
  }
  if (!(c.heads.depth.bin_length > 0.0)) throw ConfigError("net.bin_length must be > 0");

  set_int("train.epochs", c.train.epochs);
  set_i64("train.max_steps", c.train.max_steps);
  set_int("train.batch_size", c.train.batch_size);
  if (c.train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.train.epochs < 0) throw ConfigError("train.epochs must be >= 0");

  if (const auto* v = get("optim.profile")) c.optim_profile = *v;
  OptimizerConfig optim;
  if (c.optim_profile == "desk") {
    optim = OptimizerConfig::desk();
  } else if (c.optim_profile == "paper") {
    optim = OptimizerConfig::paper();
  } else {
    throw ConfigError("optim.profile must be desk or paper, got '" + c.optim_profile + "'");
  }
  set_double("optim.lr", optim.lr);
  set_double("optim.momentum", optim.momentum);
  set_double("optim.weight_decay", optim.weight_decay);
  set_double("optim.poly_power", optim.poly_power);
  validate(optim);
  c.train.optim = optim;
  c.train.seed = c.seed;

  AmalgamationConfig& a = c.amalg;
  if (const auto* v = get("amalg.mode")) {
    try {
      a.mode = parse_mode(*v);
    } catch (const UsageError& e) {
      throw ConfigError(e.what());
    }
  }
  set_double("amalg.lambda_depth", a.lambda_depth);
  set_double("amalg.lambda_seg", a.lambda_seg);
  set_double("amalg.lambda_norm", a.lambda_norm);
  set_double("amalg.lambda_u2", a.lambda_u2);
  set_int("amalg.epochs_per_block", a.epochs_per_block);
  set_int("amalg.finetune_steps", a.finetune_steps);
  set_int("amalg.coding_reduction", a.coding_reduction);
  set_int("amalg.probe_samples", a.probe_samples);
  a.batch_size = c.train.batch_size;
  a.optim = optim;
  a.seed = c.seed;
  validate(a);

  const int div = 1 << static_cast<int>(c.arch.encoder_widths.size());
  validate(c.scene, div);
  return c;
}

std::string render_config(const RunConfig& c) {
  std::map<std::string, std::string> kv;
  auto num = [](double d) { return fmt::format("{}", d); };
  kv["seed"] = std::to_string(c.seed);
  kv["scene.height"] = std::to_string(c.scene.height);
  kv["scene.width"] = std::to_string(c.scene.width);
  kv["scene.classes"] = std::to_string(c.scene.classes);
  kv["scene.min_primitives"] = std::to_string(c.scene.min_primitives);
  kv["scene.max_primitives"] = std::to_string(c.scene.max_primitives);
  kv["scene.near"] = num(c.scene.near);
  kv["scene.far"] = num(c.scene.far);
  kv["scene.noise"] = num(c.scene.noise);
  kv["scene.pixel_size"] = num(c.scene.intrinsics.pixel_size);
  kv["data.train_first"] = std::to_string(c.data.train_first);
  kv["data.train_count"] = std::to_string(c.data.train_count);
  kv["data.eval_first"] = std::to_string(c.data.eval_first);
  kv["data.eval_count"] = std::to_string(c.data.eval_count);
  std::string widths;
  for (std::size_t i = 0; i < c.arch.encoder_widths.size(); ++i) {
    widths += (i ? "," : "") + std::to_string(c.arch.encoder_widths[i]);
  }
  kv["net.encoder_widths"] = widths;
  kv["net.convs_per_block"] = std::to_string(c.arch.convs_per_block);
  kv["net.output_width"] = std::to_string(c.arch.output_width);
  kv["net.depth_bins"] = std::to_string(c.heads.depth.bins);
  kv["net.bin_length"] = num(c.heads.depth.bin_length);
  kv["train.epochs"] = std::to_string(c.train.epochs);
  kv["train.max_steps"] = std::to_string(c.train.max_steps);
  kv["train.batch_size"] = std::to_string(c.train.batch_size);
  kv["optim.profile"] = c.optim_profile;
  kv["optim.lr"] = num(c.train.optim.lr);
  kv["optim.momentum"] = num(c.train.optim.momentum);
  kv["optim.weight_decay"] = num(c.train.optim.weight_decay);
  kv["optim.poly_power"] = num(c.train.optim.poly_power);
  kv["amalg.mode"] = mode_name(c.amalg.mode);
  kv["amalg.lambda_depth"] = num(c.amalg.lambda_depth);
  kv["amalg.lambda_seg"] = num(c.amalg.lambda_seg);
  kv["amalg.lambda_norm"] = num(c.amalg.lambda_norm);
  kv["amalg.lambda_u2"] = num(c.amalg.lambda_u2);
  kv["amalg.epochs_per_block"] = std::to_string(c.amalg.epochs_per_block);
  kv["amalg.finetune_steps"] = std::to_string(c.amalg.finetune_steps);
  kv["amalg.coding_reduction"] = std::to_string(c.amalg.coding_reduction);
  kv["amalg.probe_samples"] = std::to_string(c.amalg.probe_samples);
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

HeadConfig head_config(const RunConfig& cfg) { return cfg.heads; }

}  // namespace amalgam
