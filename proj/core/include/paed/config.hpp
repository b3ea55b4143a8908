#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "paed/datasets.hpp"
#include "paed/features.hpp"
#include "paed/labelspace.hpp"
#include "paed/model.hpp"
#include "paed/training.hpp"

namespace paed {

/// Every tunable of a run, stored as a flat `key = value` text file. Defaults
/// follow the published training setup; `keys()` lists them with their docs.
struct RunConfig {
  // corpus
  std::uint64_t seed = 42;
  std::size_t categories = 16;
  std::size_t train_recordings = 60;
  std::size_t val_recordings = 20;
  std::size_t test_recordings = 20;
  double duration = 30.0;
  std::size_t events_per_recording = 12;
  std::size_t max_polyphony = 6;
  double min_event_duration = 0.5;
  double max_event_duration = 4.0;
  // features
  std::size_t frame_length = 1764;
  std::size_t hop_length = 882;
  std::size_t fft_size = 2048;
  std::size_t num_mels = 64;
  double fmin = 50.0;
  double fmax = 22050.0;
  // model
  ModelKind model = ModelKind::multitask;
  std::size_t tasks = 8;
  /// "auto-equal", or groups of category names: "a,b | c,d".
  std::string decomposition = "auto-equal";
  std::vector<std::size_t> filters{64, 64, 128, 128, 256};
  std::size_t gru_hidden = 256;
  std::size_t fc_units = 512;
  double dropout = 0.25;
  // training
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 0;
  double threshold = 0.5;
  Precision precision = Precision::fast;

  struct KeyInfo {
    std::string_view name;
    std::string_view help;
  };
  /// All keys in alphabetical order.
  static const std::vector<KeyInfo>& keys();
  static bool is_key(std::string_view key);

  /// Parses and stores one value; unknown keys and malformed values throw UsageError.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  /// `key = value` lines in alphabetical key order; parse(to_text()) reproduces
  /// the configuration exactly.
  std::string to_text() const;
  /// Reads `key = value` lines; '#' starts a comment. Unknown or repeated keys
  /// throw UsageError naming `source` and the line.
  static RunConfig parse(std::string_view text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  /// Cross-key consistency; throws UsageError.
  void validate() const;

  CategorySet category_set() const;
  CorpusSpec corpus_spec() const;
  FeatureConfig feature_config() const;
  ModelConfig model_config() const;
  /// The baseline uses one group holding every category.
  TaskDecomposition task_decomposition() const;
  TrainConfig train_config() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Environment lookup used during resolution; returns nullopt when unset.
using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

/// Reads the process environment.
std::optional<std::string> process_env(const std::string& name);

/// Prefix of environment overrides: key `learning_rate` is read from
/// `PAED_LEARNING_RATE`.
inline constexpr std::string_view kEnvPrefix = "PAED_";
std::string env_name(std::string_view key);

/// Defaults, then the file (if any), then the environment, then `overrides`
/// (typically command-line flags) — later sources win. The result is validated.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const EnvLookup& env,
                         const std::vector<std::pair<std::string, std::string>>& overrides);

}  // namespace paed
