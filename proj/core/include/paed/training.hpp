#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "paed/datasets.hpp"
#include "paed/evaluation.hpp"
#include "paed/model.hpp"

namespace paed {

/// Optimization settings of one training run.
struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  /// Optimizer steps per epoch; 0 means one full pass over the shuffled segments.
  std::size_t steps_per_epoch = 0;
  std::uint64_t seed = 42;
  /// Decision threshold of the baseline's sigmoid outputs.
  double threshold = 0.5;

  /// Throws UsageError on non-positive sizes or a negative learning rate.
  void validate() const;
};

/// Mean over tasks of the mean over rows of -log p[target]. outputs[n] is
/// [..., K_n]; targets is [rows, N] with rows equal to the product of the
/// leading output axes. Out-of-range targets throw DataError.
template <typename T>
Var<T> multitask_loss(const std::vector<Var<T>>& outputs, const ClassIndexMatrix& targets);

/// Mean binary cross-entropy of [..., Y] sigmoids against [rows, Y] 0/1
/// targets. Non-binary targets throw DataError.
template <typename T>
Var<T> multilabel_loss(Var<T> outputs, const FrameLabelMatrix& targets);

/// Adam with bias correction over the trainable entries of a parameter store.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<NdBuffer<T>> m;  // first moments, one per store entry
  std::vector<NdBuffer<T>> v;  // second moments
  std::uint64_t step = 0;
};

/// One update from the gradients held in `params`. Moments are allocated on
/// the first call; a store whose layout changed afterwards throws ShapeError.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double learning_rate);

/// One row of the training log.
struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps taken so far
  double train_loss = 0.0;
  double val_micro_f1 = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_micro_f1 = 0.0;
  double initial_loss = 0.0;  // loss of the very first batch
};

/// Column header of the training log.
inline constexpr const char* kTrainLogHeader = "epoch,step,train_loss,val_microF1";

/// Trains `model` on the dense segments of `train` and selects the epoch with
/// the best micro F1 on `val`; the model is left holding those parameters.
/// Segment order and dropout masks derive from config.seed only. When `log`
/// is given, the header and one line per epoch are written to it.
template <typename T>
TrainResult train_run(Model<T>& model, const SplitData& train, const SplitData& val, const TrainConfig& config,
                      std::ostream* log = nullptr);

/// Frame decisions for every segment of `data`, in item order.
template <typename T>
std::vector<FrameLabelMatrix> predict_split(Model<T>& model, const SplitData& data, double threshold,
                                            std::size_t batch_size = 32);

/// Scores `model` on `data`; padded frames are excluded.
template <typename T>
EvalReport evaluate_model(Model<T>& model, const SplitData& data, double threshold, std::size_t batch_size = 32);

/// Frame decisions [T, Y] for a whole standardized spectrogram: test-mode
/// segments are predicted independently and their valid rows concatenated.
template <typename T>
FrameLabelMatrix predict_frames(Model<T>& model, const NdBuffer<double>& features, std::span<const double> pad_row,
                                double threshold);

}  // namespace paed
