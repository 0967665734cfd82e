#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pforge/attack.hpp"
#include "pforge/corpus.hpp"
#include "pforge/model.hpp"
#include "pforge/pe.hpp"
#include "pforge/train.hpp"

namespace pforge::cli {

/// Bad flag, bad config key or missing required input: exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Every setting a subcommand can read. Built as defaults, then the config
/// file, then command-line flags; nothing changes after resolve().
struct RunConfig {
  std::uint64_t seed = 1;
  std::string checkpoint;
  std::string corpus;
  std::string out;
  std::string payload;
  std::string split = "test";
  std::size_t limit = 0;    // 0: every eligible file
  std::size_t donors = 10;  // transfer: attacked donor files
  std::vector<std::size_t> sizes;  // size sweep; empty means 2c..5c
  unsigned jobs = 1;
  bool trace = false;

  model::ModelConfig model = model::ModelConfig::desk();
  model::TrainHyper hyper;
  corpus::CorpusSpec corpus_spec;
  std::array<double, 3> split_ratios{0.7, 0.15, 0.15};
  attack::AttackConfig attack;
  std::optional<double> epsilon;  // unset: default for the chosen norm
  pe::InjectionMode mode = pe::InjectionMode::overlay;

  /// Applies one key=value setting. Throws UsageError on unknown keys or
  /// unparsable values.
  void set(const std::string& key, const std::string& value);

  /// Propagates the seed and the window size into the nested configs.
  void resolve();

  nlohmann::json to_json() const;

  static std::vector<std::string> keys();
};

/// Parses flat key=value text. '#' starts a comment; blank lines are skipped.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& origin = "<config>");

std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path);

}  // namespace pforge::cli
