#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "paed/labelspace.hpp"
#include "paed/ops.hpp"
#include "paed/tape.hpp"

namespace paed {

enum class ModelKind { multitask, baseline };

/// Architecture hyperparameters. Defaults reproduce the full-size network.
struct ModelConfig {
  ModelKind kind = ModelKind::multitask;
  /// Output channels of the five convolutional blocks.
  std::vector<std::size_t> filters{64, 64, 128, 128, 256};
  std::size_t gru_hidden = 256;
  std::size_t fc_units = 512;
  double dropout = 0.25;
  /// Frequency bins of the input; must be divisible by 2^blocks.
  std::size_t num_mels = 64;

  /// Throws UsageError on inconsistent values.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Intermediate maps of one backbone block.
template <typename T>
struct BlockOutputs {
  Var<T> m1;      // post-dropout output of the first conv position
  Var<T> m2;      // post-dropout output of the second conv position
  Var<T> pooled;  // frequency-halved m2
};

/// Intermediate maps of one Att-Conv-Block.
template <typename T>
struct LevelOutputs {
  Var<T> tf_mask;       // [..., T', F', 1]
  Var<T> channel_mask;  // [..., 1, 1, C']
  Var<T> fused;         // M*, [..., T', F', 2C']
  Var<T> output;        // [..., T', F'/2, C']
};

template <typename T>
struct ForwardResult {
  /// Multi-task: one [..., T, K_n] probability tensor per task. Baseline: a
  /// single [..., T, Y] tensor of sigmoid activations.
  std::vector<Var<T>> outputs;
  std::vector<BlockOutputs<T>> backbone;
  /// levels[task][level]; empty for the baseline.
  std::vector<std::vector<LevelOutputs<T>>> levels;
};

/// conv -> batch norm -> relu -> dropout, twice, then frequency max-pool.
template <typename T>
BlockOutputs<T> conv_block_forward(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x,
                                   double dropout);

/// sigmoid(1x1 conv over [channel mean, channel max]) -> [..., T', F', 1].
template <typename T>
Var<T> tf_attention(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> m1);

/// Squeeze-and-excite on the time-frequency average -> [..., 1, 1, C'].
template <typename T>
Var<T> channel_attention(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> m1);

/// M* = (m_tf * M2) concatenated with (m_c * M2) along channels.
template <typename T>
Var<T> attention_fuse(Var<T> tf_mask, Var<T> channel_mask, Var<T> m2);

/// 1x1 reduction of M* to C' channels, concatenation with `prev` when given,
/// then conv -> batch norm -> relu -> dropout -> frequency max-pool.
template <typename T>
Var<T> fuse_task_features(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> fused,
                          std::optional<Var<T>> prev, double dropout);

/// Flattens (F', C') per frame, BiGRU, two FC+relu layers and a K-way output
/// layer; softmax when `sigmoid_output` is false, element-wise sigmoid otherwise.
template <typename T>
Var<T> task_head(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x, double dropout,
                 bool sigmoid_output = false);

/// Network parameters plus the metadata needed to interpret its outputs.
template <typename T>
class Model {
 public:
  /// Creates and initializes every parameter from `init_seed`.
  Model(ModelConfig config, CategorySet categories, TaskDecomposition decomposition, std::uint64_t init_seed);
  /// Adopts existing parameters; names and shapes are checked against the config.
  Model(ModelConfig config, CategorySet categories, TaskDecomposition decomposition, ParamStore<T> params);

  const ModelConfig& config() const { return config_; }
  const CategorySet& categories() const { return categories_; }
  const TaskDecomposition& decomposition() const { return decomposition_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// input is [B, T, F] (or [T, F]) standardized log-mel segments.
  ForwardResult<T> forward(Tape<T>& tape, const NdBuffer<T>& input);

  /// Parameter names and shapes implied by a configuration, in creation order.
  static std::vector<std::pair<std::string, Shape>> layout(const ModelConfig& config, std::size_t num_categories,
                                                           const TaskDecomposition& decomposition);

 private:
  ModelConfig config_;
  CategorySet categories_;
  TaskDecomposition decomposition_;
  ParamStore<T> params_;
};

/// Per-frame decisions [T, Y] for one segment: argmax per task decoded through
/// the decomposition (multi-task), or sigmoid > threshold (baseline).
/// `outputs` holds one [T, K] (or [T, Y]) buffer per task for a single segment.
template <typename T>
FrameLabelMatrix predict_events(const std::vector<NdBuffer<T>>& outputs, ModelKind kind,
                                const TaskDecomposition& decomposition, double threshold = 0.5);

/// Names of the non-trainable running-statistics entries of a batch-norm layer.
inline bool is_running_statistic(const std::string& name) {
  const auto ends = [&](const char* s) {
    const std::string suffix(s);
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends(".running_mean") || ends(".running_var") || ends(".running_count");
}

}  // namespace paed
