#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "h2dilr/pipeline.hpp"

namespace h2dilr {

/// Everything one experiment needs, read from a flat key=value file.
struct RunConfig {
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};  // stage-2 repetitions
  std::filesystem::path out_dir = "run";
  std::filesystem::path data_dir;    // empty: <out_dir>/data
  std::filesystem::path checkpoint;  // empty: <out_dir>/pretrain

  GenSpec data;
  Stage1Config stage1;
  TrainConfig pretrain;
  DecoderConfig decode;

  std::filesystem::path data_path() const;
  std::filesystem::path checkpoint_path() const;
  /// Generator settings with the run seed filled in.
  GenSpec gen_spec() const;
  /// Seed of the stage-2 repetition `s`, derived from the run seed.
  std::uint64_t decoder_seed(std::uint64_t s) const;
};

/// Library defaults, with stage-2 training at 40 epochs and lr 3e-4.
RunConfig default_run_config();

struct ConfigKey {
  std::string name;
  std::string help;
};

/// Every accepted key with a one-line description, in file order.
const std::vector<ConfigKey>& config_keys();

/// Sets one key. Unknown keys and malformed values throw ValidationError.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_key(const RunConfig& cfg, const std::string& key);

/// Cross-field checks (code_dim == latent_dim, a usable T, non-empty seeds).
void validate(const RunConfig& cfg);

/// The effective configuration as a key=value document, defaults included.
std::string format_config(const RunConfig& cfg);

/// Defaults, then the file, then `overrides` ("key=value"). Overrides that
/// assign different values to one key are rejected with all conflicts listed.
RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

}  // namespace h2dilr
