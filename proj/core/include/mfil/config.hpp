#pragma once

#include <cstdint>
#include <string>

#include "mfil/backbone.hpp"
#include "mfil/dataset.hpp"
#include "mfil/optim.hpp"

namespace mfil {

struct RunConfig {
  VariantConfig variant = VariantConfig::desk();
  AdamWConfig optimizer;
  /// Linear warmup length; a negative value means 5% of `steps`.
  long warmup_steps = -1;
  std::size_t batch_size = 32;
  std::size_t steps = 1500;
  std::uint64_t seed = 0;
  double label_smoothing = 0.1;
  bool horizontal_flip = true;
  SyntheticSpec data;
  std::size_t checkpoint_every = 500;
  std::string output_dir = "run";

  std::size_t resolved_warmup() const;
  /// Throws ConfigError for out-of-range values.
  void validate() const;
};

/// Parses flat `key = value` text; `#` starts a comment. Unknown keys, malformed values and
/// duplicate keys raise ConfigError carrying "<source>:<line>".
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::string& path);

/// Canonical text form; parse_run_config(to_config_text(c)) reproduces c.
std::string to_config_text(const RunConfig& config);

}  // namespace mfil
