#include "paed/training.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <string>

#include "paed/error.hpp"
#include "paed/rng.hpp"

namespace paed {
namespace {

// Independent random streams derived from the run seed.
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kDropoutStream = 2;

/// [B, kSegmentFrames, bins] input batch built from segment items.
template <typename T>
NdBuffer<T> gather_features(const SplitData& data, std::span<const std::size_t> items) {
  const std::size_t bins = data.pad_row.size();
  NdBuffer<T> out({items.size(), kSegmentFrames, bins});
  T* dst = out.ptr();
  for (std::size_t i : items) {
    const NdBuffer<double> seg = data.segment(i);
    for (double v : seg.data()) *dst++ = static_cast<T>(v);
  }
  return out;
}

/// [B * kSegmentFrames, Y] stacked frame labels.
FrameLabelMatrix gather_labels(const SplitData& data, std::span<const std::size_t> items, std::size_t categories) {
  FrameLabelMatrix out({items.size() * kSegmentFrames, categories});
  std::uint8_t* dst = out.ptr();
  for (std::size_t i : items) {
    const FrameLabelMatrix l = data.labels(i);
    dst = std::copy(l.data().begin(), l.data().end(), dst);
  }
  return out;
}

/// Rows [b * rows, (b + 1) * rows) of a [B, rows, K] output as a [rows, K] buffer.
template <typename T>
NdBuffer<T> batch_item(const NdBuffer<T>& batched, std::size_t b) {
  const std::size_t rows = batched.shape()[batched.rank() - 2];
  const std::size_t k = batched.shape().back();
  const T* src = batched.ptr() + b * rows * k;
  return NdBuffer<T>({rows, k}, std::vector<T>(src, src + rows * k));
}

/// Shuffled segment order, one freshly shuffled pass after another.
class SegmentStream {
 public:
  SegmentStream(std::size_t count, std::uint64_t seed) : seed_(seed), order_(count) { reshuffle(); }

  /// The next up-to-`batch` items of the current pass.
  std::vector<std::size_t> next(std::size_t batch) {
    if (pos_ == order_.size()) {
      ++pass_;
      reshuffle();
    }
    const std::size_t n = std::min(batch, order_.size() - pos_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, pass_));
    rng.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }

  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw UsageError("training: learning_rate must be a finite non-negative number");
  }
  if (batch_size == 0) throw UsageError("training: batch_size must be positive");
  if (epochs == 0) throw UsageError("training: epochs must be at least 1");
  if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("training: threshold must be in (0, 1)");
}

template <typename T>
Var<T> multitask_loss(const std::vector<Var<T>>& outputs, const ClassIndexMatrix& targets) {
  if (targets.rank() != 2 || targets.shape()[1] != outputs.size()) {
    throw ShapeError("multitask_loss: targets " + shape_to_string(targets.shape()) + " for " +
                     std::to_string(outputs.size()) + " task outputs");
  }
  const std::size_t rows = targets.shape()[0];
  const std::size_t tasks = outputs.size();
  std::vector<Var<T>> per_task;
  for (std::size_t n = 0; n < tasks; ++n) {
    const std::size_t k = outputs[n].shape().back();
    if (outputs[n].value().size() != rows * k) {
      throw ShapeError("multitask_loss: task " + std::to_string(n + 1) + " output " +
                       shape_to_string(outputs[n].shape()) + " does not have " + std::to_string(rows) + " rows");
    }
    std::vector<std::int32_t> column(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::int64_t t = targets[r * tasks + n];
      if (t < 0 || static_cast<std::uint64_t>(t) >= k) {
        throw DataError("multitask_loss: target " + std::to_string(t) + " of task " + std::to_string(n + 1) +
                        " at row " + std::to_string(r) + " is outside [0, " + std::to_string(k) + ")");
      }
      column[r] = static_cast<std::int32_t>(t);
    }
    per_task.push_back(ops::cross_entropy(outputs[n], column));
  }
  return ops::average(per_task);
}

template <typename T>
Var<T> multilabel_loss(Var<T> outputs, const FrameLabelMatrix& targets) {
  if (targets.size() != outputs.value().size() || targets.shape().back() != outputs.shape().back()) {
    throw ShapeError("multilabel_loss: outputs " + shape_to_string(outputs.shape()) + " vs targets " +
                     shape_to_string(targets.shape()));
  }
  NdBuffer<T> y(outputs.shape());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] > 1) {
      throw DataError("multilabel_loss: non-binary target " + std::to_string(targets[i]) + " at element " +
                      std::to_string(i));
    }
    y[i] = static_cast<T>(targets[i]);
  }
  return ops::binary_cross_entropy(outputs, y);
}

template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double learning_rate) {
  auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& e : entries) {
      state.m.emplace_back(e.param.value.shape());
      state.v.emplace_back(e.param.value.shape());
    }
  }
  if (state.m.size() != entries.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) + " entries, store has " +
                     std::to_string(entries.size()));
  }
  ++state.step;
  const double b1 = state.config.beta1;
  const double b2 = state.config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Parameter<T>& p = entries[k].param;
    if (!p.trainable) continue;
    if (p.grad.shape() != p.value.shape() || state.m[k].shape() != p.value.shape()) {
      throw ShapeError("adam_step: shape mismatch for '" + entries[k].name + "'");
    }
    NdBuffer<T>& m = state.m[k];
    NdBuffer<T>& v = state.v[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = learning_rate * (mi / c1) / (std::sqrt(vi / c2) + state.config.epsilon);
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
    }
  }
}

template <typename T>
std::vector<FrameLabelMatrix> predict_split(Model<T>& model, const SplitData& data, double threshold,
                                            std::size_t batch_size) {
  if (batch_size == 0) throw UsageError("predict_split: batch_size must be positive");
  std::vector<FrameLabelMatrix> out;
  out.reserve(data.size());
  std::vector<std::size_t> items;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    items.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) items.push_back(i);
    Tape<T> tape(Mode::infer);
    const auto r = model.forward(tape, gather_features<T>(data, items));
    for (std::size_t b = 0; b < items.size(); ++b) {
      std::vector<NdBuffer<T>> outputs;
      for (const auto& o : r.outputs) outputs.push_back(batch_item(o.value(), b));
      out.push_back(predict_events(outputs, model.config().kind, model.decomposition(), threshold));
    }
  }
  return out;
}

template <typename T>
EvalReport evaluate_model(Model<T>& model, const SplitData& data, double threshold, std::size_t batch_size) {
  if (data.size() == 0) throw DataError("evaluate_model: the split has no segments");
  FrameScorer scorer(model.categories().names());
  const auto predictions = predict_split(model, data, threshold, batch_size);
  for (std::size_t i = 0; i < predictions.size(); ++i) scorer.add(predictions[i], data.labels(i), data.valid_frames(i));
  return scorer.report();
}

template <typename T>
FrameLabelMatrix predict_frames(Model<T>& model, const NdBuffer<double>& features, std::span<const double> pad_row,
                                double threshold) {
  const std::size_t frames = features.shape().at(0);
  const std::size_t categories = model.categories().size();
  FrameLabelMatrix out({frames, categories});
  for (const SegmentRef& ref : segment_layout(frames, SegmentMode::test)) {
    const NdBuffer<T> seg = extract_segment(features, ref, pad_row).template cast<T>();
    Tape<T> tape(Mode::infer);
    const auto r = model.forward(tape, seg);
    std::vector<NdBuffer<T>> outputs;
    for (const auto& o : r.outputs) outputs.push_back(o.value());
    const FrameLabelMatrix labels = predict_events(outputs, model.config().kind, model.decomposition(), threshold);
    const std::size_t valid = kSegmentFrames - ref.pad_len;
    std::copy(labels.ptr(), labels.ptr() + valid * categories, out.ptr() + ref.offset * categories);
  }
  return out;
}

template <typename T>
TrainResult train_run(Model<T>& model, const SplitData& train, const SplitData& val, const TrainConfig& config,
                      std::ostream* log) {
  config.validate();
  if (train.size() == 0) throw DataError("train_run: the training split has no segments");
  if (val.size() == 0) throw DataError("train_run: the validation split has no segments");
  const std::size_t steps = config.steps_per_epoch != 0
                                ? config.steps_per_epoch
                                : (train.size() + config.batch_size - 1) / config.batch_size;
  const bool multitask = model.config().kind == ModelKind::multitask;
  const std::size_t categories = model.categories().size();

  SegmentStream stream(train.size(), derive_seed(config.seed, kShuffleStream));
  const std::uint64_t dropout_seed = derive_seed(config.seed, kDropoutStream);
  AdamState<T> adam;
  TrainResult result;
  std::vector<NdBuffer<T>> best;
  std::size_t global_step = 0;

  if (log) *log << kTrainLogHeader << '\n';
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::vector<std::size_t> items = stream.next(config.batch_size);
      const FrameLabelMatrix labels = gather_labels(train, items, categories);
      Tape<T> tape(Mode::train, derive_seed(dropout_seed, global_step));
      const auto r = model.forward(tape, gather_features<T>(train, items));
      const Var<T> loss = multitask ? multitask_loss(r.outputs, encode_targets(labels, model.decomposition()))
                                    : multilabel_loss(r.outputs[0], labels);
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value)) {
        throw Error("train_run: non-finite loss at step " + std::to_string(global_step + 1));
      }
      if (global_step == 0) result.initial_loss = value;
      loss_sum += value;
      tape.backward(loss);
      adam_step(model.params(), adam, config.learning_rate);
      ++global_step;
    }
    EpochRecord rec{epoch, global_step, loss_sum / static_cast<double>(steps),
                    evaluate_model(model, val, config.threshold).micro_f1()};
    result.epochs.push_back(rec);
    if (best.empty() || rec.val_micro_f1 > result.best_val_micro_f1) {
      result.best_epoch = epoch;
      result.best_val_micro_f1 = rec.val_micro_f1;
      best.clear();
      for (const auto& e : model.params().entries()) best.push_back(e.param.value);
    }
    if (log) {
      *log << rec.epoch << ',' << rec.step << ',' << std::fixed << std::setprecision(6) << rec.train_loss << ','
           << std::setprecision(4) << rec.val_micro_f1 << std::defaultfloat << '\n';
      log->flush();
    }
  }
  auto& entries = model.params().entries();
  for (std::size_t k = 0; k < entries.size(); ++k) entries[k].param.value = best[k];
  return result;
}

#define PAED_INSTANTIATE_TRAINING(T)                                                                               \
  template Var<T> multitask_loss(const std::vector<Var<T>>&, const ClassIndexMatrix&);                            \
  template Var<T> multilabel_loss(Var<T>, const FrameLabelMatrix&);                                                \
  template void adam_step(ParamStore<T>&, AdamState<T>&, double);                                                  \
  template std::vector<FrameLabelMatrix> predict_split(Model<T>&, const SplitData&, double, std::size_t);         \
  template EvalReport evaluate_model(Model<T>&, const SplitData&, double, std::size_t);                            \
  template FrameLabelMatrix predict_frames(Model<T>&, const NdBuffer<double>&, std::span<const double>, double);   \
  template TrainResult train_run(Model<T>&, const SplitData&, const SplitData&, const TrainConfig&, std::ostream*);

PAED_INSTANTIATE_TRAINING(float)
PAED_INSTANTIATE_TRAINING(double)

}  // namespace paed
