#pragma once

#include <cstdint>
#include <vector>

#include "paed/tape.hpp"

/// Differentiable operations recorded on a Tape.
///
/// Spatial operations read the trailing three axes as (time, frequency,
/// channel); any leading axes are folded into a batch dimension.
namespace paed::ops {

/// Batch-norm variance floor.
inline constexpr double kBatchNormEpsilon = 1e-5;
/// Weight of the previous running statistic in the moving average.
inline constexpr double kBatchNormMomentum = 0.9;
/// Lower clamp applied to probabilities before taking logarithms.
inline constexpr double kLogClamp = 1e-12;

/// Running statistics of one batch-norm layer. `count` is a one-element
/// buffer holding the number of training batches folded in so far.
template <typename T>
struct RunningStats {
  NdBuffer<T>* mean = nullptr;
  NdBuffer<T>* var = nullptr;
  NdBuffer<T>* count = nullptr;
};

/// Input weights [D, 3H], recurrent weights [H, 3H] and bias [3H] of one GRU
/// direction. Gate blocks are ordered update, reset, candidate.
template <typename T>
struct GruWeights {
  Var<T> input;
  Var<T> recurrent;
  Var<T> bias;
};

/// SAME-padded, unit-stride 2-D convolution over (time, frequency).
/// kernel is [kh, kw, Cin, Cout] with odd kh and kw; bias is [Cout].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias);

/// Max over adjacent frequency pairs; ties go to the lower frequency index.
template <typename T>
Var<T> pool_freq_max(Var<T> x);

/// Per-channel normalization over all other axes (train) or with the running
/// statistics (infer). Train mode also updates `stats`.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T> stats, Mode mode);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);
/// Softmax over the last axis, stabilized by max subtraction.
template <typename T>
Var<T> softmax(Var<T> x);

/// Inverted dropout driven by the tape's generator; identity in infer mode or
/// when rate is 0.
template <typename T>
Var<T> dropout(Var<T> x, double rate);

/// Mean and max across the channel axis, concatenated: [..., C] -> [..., 2].
template <typename T>
Var<T> channel_pool(Var<T> x);

/// Average over time and frequency: [..., T, F, C] -> [..., 1, 1, C].
template <typename T>
Var<T> global_avg_pool(Var<T> x);

/// Element-wise product; operands have equal rank and each axis either
/// matches or has extent 1 in one operand.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> x, T factor);

template <typename T>
Var<T> square(Var<T> x);

/// Sum of all elements, as a one-element buffer.
template <typename T>
Var<T> sum(Var<T> x);

template <typename T>
Var<T> mean(Var<T> x);

/// Concatenation along the last axis; all other extents must match.
template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

/// Time-distributed affine map: [..., D] x [D, K] + [K].
template <typename T>
Var<T> dense(Var<T> x, Var<T> weight, Var<T> bias);

/// Bidirectional GRU over [..., T, D] with zero initial state. Output is
/// [..., T, 2H]: forward direction first, then backward direction.
template <typename T>
Var<T> gru_bidirectional(Var<T> x, const GruWeights<T>& forward, const GruWeights<T>& backward);

/// Mean over rows of -log p[target]; probs is [..., K], one target per row.
template <typename T>
Var<T> cross_entropy(Var<T> probs, const std::vector<std::int32_t>& targets);

/// Mean over elements of -[y log p + (1 - y) log(1 - p)].
template <typename T>
Var<T> binary_cross_entropy(Var<T> probs, const NdBuffer<T>& targets);

/// Arithmetic mean of scalar values.
template <typename T>
Var<T> average(const std::vector<Var<T>>& scalars);

}  // namespace paed::ops
