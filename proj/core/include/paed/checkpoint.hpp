#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "paed/config.hpp"
#include "paed/features.hpp"
#include "paed/model.hpp"

namespace paed {

/// Checkpoint byte layout (all integers little-endian), see docs/checkpoint-format.md:
///
///   "PAED" | u16 version | u32 n | n bytes of config text | u32 records |
///   records x { u16 len | len bytes of name | u8 rank | rank x u32 extent |
///               prod(extents) x f32 }
inline constexpr char kCheckpointMagic[4] = {'P', 'A', 'E', 'D'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Names of the records holding the feature standardization statistics.
inline constexpr const char* kFeatureMeanRecord = "features.mean";
inline constexpr const char* kFeatureStdRecord = "features.std";

struct CheckpointRecord {
  std::string name;
  NdBuffer<float> value;
  friend bool operator==(const CheckpointRecord&, const CheckpointRecord&) = default;
};

struct CheckpointFile {
  std::string config_text;
  std::vector<CheckpointRecord> records;
  friend bool operator==(const CheckpointFile&, const CheckpointFile&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& file);
/// Throws DataError on a bad magic, unknown version, truncation or trailing bytes.
CheckpointFile decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

/// A network restored together with the configuration and feature statistics
/// it was trained with.
template <typename T>
struct LoadedModel {
  RunConfig config;
  FeatureStats stats;
  Model<T> model;
};

/// Stores the resolved config, the feature statistics and every model
/// parameter (including batch-norm running statistics) as 32-bit floats.
template <typename T>
CheckpointFile make_checkpoint(const RunConfig& config, const FeatureStats& stats, const Model<T>& model);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const FeatureStats& stats,
                     const Model<T>& model);

/// Rebuilds the model described by the checkpoint's config block; records
/// that do not match it throw DataError.
template <typename T>
LoadedModel<T> restore_checkpoint(const CheckpointFile& file);

template <typename T>
LoadedModel<T> load_checkpoint(const std::filesystem::path& path);

/// Rounds every value through float, the precision checkpoints store. Applied
/// to statistics before training so that reloaded models see identical inputs.
FeatureStats round_to_float(const FeatureStats& stats);

}  // namespace paed
