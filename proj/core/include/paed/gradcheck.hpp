#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "paed/tape.hpp"

namespace paed {

template <typename T>
struct GradCheckResult {
  T max_rel_error{0};
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares tape gradients of `loss_fn` against central differences over every
/// trainable scalar in `params`. The error of one scalar is
/// |analytic - numeric| / max(1, |numeric|); the maximum is returned.
///
/// loss_fn must be deterministic (dropout off, fixed batch-norm mode); a
/// repeated evaluation that disagrees raises Error.
template <typename T>
GradCheckResult<T> finite_diff_check(const std::function<Var<T>(Tape<T>&, ParamStore<T>&)>& loss_fn,
                                     ParamStore<T>& params, T epsilon = T(1e-4)) {
  auto evaluate = [&]() {
    Tape<T> tape;
    return loss_fn(tape, params).value()[0];
  };

  params.zero_grad();
  T base{};
  {
    Tape<T> tape;
    Var<T> loss = loss_fn(tape, params);
    base = loss.value()[0];
    tape.backward(loss);
  }
  if (evaluate() != base) throw Error("finite_diff_check: loss function is not deterministic");

  GradCheckResult<T> result;
  for (auto& entry : params.entries()) {
    Parameter<T>& p = entry.param;
    if (!p.trainable) continue;
    const NdBuffer<T> analytic = p.grad;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T saved = p.value[i];
      p.value[i] = saved + epsilon;
      const T plus = evaluate();
      p.value[i] = saved - epsilon;
      const T minus = evaluate();
      p.value[i] = saved;
      const T numeric = (plus - minus) / (T{2} * epsilon);
      const T err = std::abs(analytic[i] - numeric) / std::max(T{1}, std::abs(numeric));
      ++result.checked;
      if (err > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = std::max(err, result.max_rel_error);
        if (err >= result.max_rel_error) {
          result.worst_param = entry.name;
          result.worst_index = i;
        }
      }
    }
  }
  return result;
}

}  // namespace paed
