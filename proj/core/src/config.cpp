#include "mfil/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace mfil {

std::size_t RunConfig::resolved_warmup() const {
  if (warmup_steps >= 0) return static_cast<std::size_t>(warmup_steps);
  return steps / 20;
}

void RunConfig::validate() const {
  variant.validate();
  if (!(optimizer.lr > 0.0)) throw ConfigError("lr must be positive");
  if (optimizer.weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must be in [0,1)");
  if (steps == 0) throw ConfigError("steps must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (resolved_warmup() >= steps) throw ConfigError("warmup_steps must be smaller than steps");
  if (data.num_classes != variant.num_classes) {
    throw ConfigError("dataset classes (" + std::to_string(data.num_classes) + ") != model num_classes (" +
                      std::to_string(variant.num_classes) + ")");
  }
  if (data.channels != variant.in_channels) throw ConfigError("dataset channels != model in_channels");
  if (data.image_size % 32 != 0) throw ConfigError("image_size must be a multiple of 32");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename U>
U parse_number(const std::string& v) {
  U out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

std::array<std::size_t, 4> parse_quad(const std::string& v) {
  std::array<std::size_t, 4> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 4) throw ConfigError("expected 4 comma-separated values, got more in '" + v + "'");
    out[i++] = parse_number<std::size_t>(trim(item));
  }
  if (i != 4) throw ConfigError("expected 4 comma-separated values in '" + v + "'");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> s = {
      {"dims", [](RunConfig& c, const std::string& v) { c.variant.dims = parse_quad(v); }},
      {"depths", [](RunConfig& c, const std::string& v) { c.variant.depths = parse_quad(v); }},
      {"d_state", [](RunConfig& c, const std::string& v) { c.variant.d_state = parse_number<std::size_t>(v); }},
      {"ssm_ratio", [](RunConfig& c, const std::string& v) { c.variant.ssm_ratio = parse_number<double>(v); }},
      {"ffn_ratio", [](RunConfig& c, const std::string& v) { c.variant.ffn_ratio = parse_number<std::size_t>(v); }},
      {"num_classes",
       [](RunConfig& c, const std::string& v) {
         c.variant.num_classes = parse_number<std::size_t>(v);
         c.data.num_classes = c.variant.num_classes;
       }},
      {"drop_path", [](RunConfig& c, const std::string& v) { c.variant.drop_path = parse_number<double>(v); }},
      {"scan_mode", [](RunConfig& c, const std::string& v) { c.variant.scan_mode = parse_scan_mode(v); }},
      {"adaptive_weighting", [](RunConfig& c, const std::string& v) { c.variant.adaptive_weighting = parse_bool(v); }},
      {"reset_per_segment", [](RunConfig& c, const std::string& v) { c.variant.reset_per_segment = parse_bool(v); }},
      {"exact_zoh_b", [](RunConfig& c, const std::string& v) { c.variant.exact_zoh_b = parse_bool(v); }},
      {"block_kind",
       [](RunConfig& c, const std::string& v) {
         if (v == "mfil") c.variant.block_kind = BlockKind::mfil;
         else if (v == "conv3x3") c.variant.block_kind = BlockKind::conv3x3;
         else throw ConfigError("block_kind must be mfil or conv3x3, got '" + v + "'");
       }},
      {"optimizer",
       [](RunConfig&, const std::string& v) {
         if (v != "adamw") throw ConfigError("only optimizer = adamw is supported, got '" + v + "'");
       }},
      {"schedule",
       [](RunConfig&, const std::string& v) {
         if (v != "cosine") throw ConfigError("only schedule = cosine is supported, got '" + v + "'");
       }},
      {"lr", [](RunConfig& c, const std::string& v) { c.optimizer.lr = parse_number<double>(v); }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.optimizer.weight_decay = parse_number<double>(v); }},
      {"beta1", [](RunConfig& c, const std::string& v) { c.optimizer.beta1 = parse_number<double>(v); }},
      {"beta2", [](RunConfig& c, const std::string& v) { c.optimizer.beta2 = parse_number<double>(v); }},
      {"eps", [](RunConfig& c, const std::string& v) { c.optimizer.eps = parse_number<double>(v); }},
      {"warmup_steps", [](RunConfig& c, const std::string& v) { c.warmup_steps = parse_number<long>(v); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.batch_size = parse_number<std::size_t>(v); }},
      {"steps", [](RunConfig& c, const std::string& v) { c.steps = parse_number<std::size_t>(v); }},
      {"seed",
       [](RunConfig& c, const std::string& v) {
         c.seed = parse_number<std::uint64_t>(v);
         c.data.seed = c.seed;
       }},
      {"label_smoothing", [](RunConfig& c, const std::string& v) { c.label_smoothing = parse_number<double>(v); }},
      {"horizontal_flip", [](RunConfig& c, const std::string& v) { c.horizontal_flip = parse_bool(v); }},
      {"image_size", [](RunConfig& c, const std::string& v) { c.data.image_size = parse_number<std::size_t>(v); }},
      {"dataset_size", [](RunConfig& c, const std::string& v) { c.data.size = parse_number<std::size_t>(v); }},
      {"noise", [](RunConfig& c, const std::string& v) { c.data.noise = parse_number<double>(v); }},
      {"data_seed", [](RunConfig& c, const std::string& v) { c.data.seed = parse_number<std::uint64_t>(v); }},
      {"checkpoint_every",
       [](RunConfig& c, const std::string& v) { c.checkpoint_every = parse_number<std::size_t>(v); }},
      {"output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
  };
  return s;
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  struct Line {
    std::size_t number;
    std::string key, value;
  };
  std::vector<Line> lines;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string raw;
  for (std::size_t n = 1; std::getline(in, raw); ++n) {
    const std::string where = source + ":" + std::to_string(n);
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    Line l{n, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (l.key.empty()) throw ConfigError(where + ": empty key");
    if (l.key != "variant" && !setters().count(l.key)) throw ConfigError(where + ": unknown key '" + l.key + "'");
    if (auto it = seen.find(l.key); it != seen.end()) {
      throw ConfigError(where + ": duplicate key '" + l.key + "' (first set on line " + std::to_string(it->second) + ")");
    }
    seen[l.key] = n;
    lines.push_back(std::move(l));
  }
  RunConfig cfg;
  // The named variant is the base that every other key overrides, wherever it appears.
  for (const Line& l : lines) {
    if (l.key != "variant") continue;
    try {
      cfg.variant = VariantConfig::named(l.value);
      cfg.data.num_classes = cfg.variant.num_classes;
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(l.number) + ": " + e.what());
    }
  }
  for (const Line& l : lines) {
    if (l.key == "variant") continue;
    try {
      setters().at(l.key)(cfg, l.value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(l.number) + ": " + l.key + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), path);
}

std::string to_config_text(const RunConfig& c) {
  std::ostringstream o;
  o.precision(17);
  auto quad = [](const std::array<std::size_t, 4>& a) {
    return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," + std::to_string(a[3]);
  };
  const VariantConfig& v = c.variant;
  o << "dims = " << quad(v.dims) << "\n"
    << "depths = " << quad(v.depths) << "\n"
    << "d_state = " << v.d_state << "\n"
    << "ssm_ratio = " << v.ssm_ratio << "\n"
    << "ffn_ratio = " << v.ffn_ratio << "\n"
    << "num_classes = " << v.num_classes << "\n"
    << "drop_path = " << v.drop_path << "\n"
    << "scan_mode = " << to_string(v.scan_mode) << "\n"
    << "adaptive_weighting = " << (v.adaptive_weighting ? "true" : "false") << "\n"
    << "reset_per_segment = " << (v.reset_per_segment ? "true" : "false") << "\n"
    << "exact_zoh_b = " << (v.exact_zoh_b ? "true" : "false") << "\n"
    << "block_kind = " << (v.block_kind == BlockKind::mfil ? "mfil" : "conv3x3") << "\n"
    << "optimizer = adamw\nschedule = cosine\n"
    << "lr = " << c.optimizer.lr << "\n"
    << "weight_decay = " << c.optimizer.weight_decay << "\n"
    << "beta1 = " << c.optimizer.beta1 << "\n"
    << "beta2 = " << c.optimizer.beta2 << "\n"
    << "eps = " << c.optimizer.eps << "\n"
    << "warmup_steps = " << c.warmup_steps << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "steps = " << c.steps << "\n"
    << "seed = " << c.seed << "\n"
    << "data_seed = " << c.data.seed << "\n"
    << "label_smoothing = " << c.label_smoothing << "\n"
    << "horizontal_flip = " << (c.horizontal_flip ? "true" : "false") << "\n"
    << "image_size = " << c.data.image_size << "\n"
    << "dataset_size = " << c.data.size << "\n"
    << "noise = " << c.data.noise << "\n"
    << "checkpoint_every = " << c.checkpoint_every << "\n"
    << "output_dir = " << c.output_dir << "\n";
  return o.str();
}

}  // namespace mfil
