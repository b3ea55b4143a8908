#include "paed/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>

namespace paed {

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace paed

namespace paed::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using RowVecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <typename T>
using ConstRowVecMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <typename T>
MatMap<T> as_matrix(NdBuffer<T>& b, std::size_t rows, std::size_t cols) {
  return MatMap<T>(b.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
ConstMatMap<T> as_matrix(const NdBuffer<T>& b, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(b.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct SpatialDims {
  std::size_t batch;
  std::size_t time;
  std::size_t freq;
  std::size_t channels;
};

SpatialDims spatial_dims(const Shape& s, const char* op) {
  if (s.size() < 3) {
    throw ShapeError(std::string(op) + ": expected (time, frequency, channel) trailing axes, got " +
                     shape_to_string(s));
  }
  const std::size_t r = s.size();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 3 < r; ++i) batch *= s[i];
  return {batch, s[r - 3], s[r - 2], s[r - 1]};
}

template <typename T>
Tape<T>& same_tape(std::initializer_list<Var<T>> vars, const char* op) {
  Tape<T>* tape = &vars.begin()->tape();
  for (const auto& v : vars) {
    if (&v.tape() != tape) throw Error(std::string(op) + ": operands recorded on different tapes");
  }
  return *tape;
}

template <typename T>
void im2col(const T* x, const SpatialDims& d, std::size_t kh, std::size_t kw, T* cols) {
  const std::size_t ph = kh / 2;
  const std::size_t pw = kw / 2;
  const std::size_t row_len = kh * kw * d.channels;
  for (std::size_t t = 0; t < d.time; ++t) {
    for (std::size_t f = 0; f < d.freq; ++f) {
      T* row = cols + (t * d.freq + f) * row_len;
      for (std::size_t dy = 0; dy < kh; ++dy) {
        const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + dy) - static_cast<std::ptrdiff_t>(ph);
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(f + dx) - static_cast<std::ptrdiff_t>(pw);
          T* dst = row + (dy * kw + dx) * d.channels;
          if (ti < 0 || fi < 0 || ti >= static_cast<std::ptrdiff_t>(d.time) ||
              fi >= static_cast<std::ptrdiff_t>(d.freq)) {
            std::fill(dst, dst + d.channels, T{0});
          } else {
            const T* src = x + (static_cast<std::size_t>(ti) * d.freq + static_cast<std::size_t>(fi)) * d.channels;
            std::memcpy(dst, src, d.channels * sizeof(T));
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const SpatialDims& d, std::size_t kh, std::size_t kw, T* dx) {
  const std::size_t ph = kh / 2;
  const std::size_t pw = kw / 2;
  const std::size_t row_len = kh * kw * d.channels;
  for (std::size_t t = 0; t < d.time; ++t) {
    for (std::size_t f = 0; f < d.freq; ++f) {
      const T* row = cols + (t * d.freq + f) * row_len;
      for (std::size_t dy = 0; dy < kh; ++dy) {
        const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + dy) - static_cast<std::ptrdiff_t>(ph);
        if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(d.time)) continue;
        for (std::size_t dxi = 0; dxi < kw; ++dxi) {
          const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(f + dxi) - static_cast<std::ptrdiff_t>(pw);
          if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(d.freq)) continue;
          const T* src = row + (dy * kw + dxi) * d.channels;
          T* dst = dx + (static_cast<std::size_t>(ti) * d.freq + static_cast<std::size_t>(fi)) * d.channels;
          for (std::size_t c = 0; c < d.channels; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
  }
  BroadcastPlan p;
  const auto sa = row_major_strides(a);
  const auto sb = row_major_strides(b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(i) + " extents " + std::to_string(a[i]) +
                       " and " + std::to_string(b[i]) + " do not broadcast");
    }
    p.out.push_back(std::max(a[i], b[i]));
    p.stride_a.push_back(a[i] == 1 ? 0 : sa[i]);
    p.stride_b.push_back(b[i] == 1 ? 0 : sb[i]);
  }
  return p;
}

template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
  const std::size_t r = p.out.size();
  const std::size_t n = shape_size(p.out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.stride_a[ax] * p.out[ax];
      ib -= p.stride_b[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias) {
  Tape<T>& tape = same_tape({x, kernel, bias}, "conv2d");
  const NdBuffer<T>& xv = x.value();
  const NdBuffer<T>& kv = kernel.value();
  const NdBuffer<T>& bv = bias.value();
  const SpatialDims d = spatial_dims(xv.shape(), "conv2d");
  if (kv.rank() != 4) throw ShapeError("conv2d: kernel must be [kh, kw, Cin, Cout], got " + shape_to_string(kv.shape()));
  const std::size_t kh = kv.shape()[0];
  const std::size_t kw = kv.shape()[1];
  const std::size_t cin = kv.shape()[2];
  const std::size_t cout = kv.shape()[3];
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd, got " + std::to_string(kh) + "x" + std::to_string(kw));
  }
  if (cin != d.channels) {
    throw ShapeError("conv2d: input channel extent " + std::to_string(d.channels) +
                     " does not match kernel input channels " + std::to_string(cin));
  }
  if (bv.rank() != 1 || bv.size() != cout) {
    throw ShapeError("conv2d: bias must have " + std::to_string(cout) + " entries, got " + shape_to_string(bv.shape()));
  }

  Shape out_shape = xv.shape();
  out_shape.back() = cout;
  NdBuffer<T> out(out_shape);
  const std::size_t pixels = d.time * d.freq;
  const std::size_t patch = kh * kw * cin;
  auto w = as_matrix(kv, patch, cout);
  const ConstRowVecMap<T> b(bv.ptr(), static_cast<Eigen::Index>(cout));
  const bool pointwise = kh == 1 && kw == 1;

  if (pointwise) {
    auto o = as_matrix(out, d.batch * pixels, cout);
    o.noalias() = as_matrix(xv, d.batch * pixels, cin) * w;
    o.rowwise() += b;
  } else {
    AlignedVector<T> cols(pixels * patch);
    for (std::size_t n = 0; n < d.batch; ++n) {
      im2col(xv.ptr() + n * pixels * cin, d, kh, kw, cols.data());
      MatMap<T> o(out.ptr() + n * pixels * cout, static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(cout));
      o.noalias() = ConstMatMap<T>(cols.data(), static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(patch)) * w;
      o.rowwise() += b;
    }
  }

  const std::size_t xi = x.id();
  const std::size_t ki = kernel.id();
  const std::size_t bi = bias.id();
  return tape.push(std::move(out), {xi, ki, bi}, [=](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    const NdBuffer<T>& xval = tp.value(xi);
    const NdBuffer<T>& kval = tp.value(ki);
    auto wm = as_matrix(kval, patch, cout);
    if (tp.requires_grad(bi)) {
      RowVecMap<T>(tp.grad(bi).ptr(), static_cast<Eigen::Index>(cout)) +=
          as_matrix(g, d.batch * pixels, cout).colwise().sum();
    }
    const bool need_x = tp.requires_grad(xi);
    const bool need_k = tp.requires_grad(ki);
    if (pointwise) {
      if (need_k) as_matrix(tp.grad(ki), patch, cout).noalias() += as_matrix(xval, d.batch * pixels, cin).transpose() * as_matrix(g, d.batch * pixels, cout);
      if (need_x) as_matrix(tp.grad(xi), d.batch * pixels, cin).noalias() += as_matrix(g, d.batch * pixels, cout) * wm.transpose();
      return;
    }
    AlignedVector<T> cols(pixels * patch);
    RowMat<T> dcols;
    for (std::size_t n = 0; n < d.batch; ++n) {
      ConstMatMap<T> gn(g.ptr() + n * pixels * cout, static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(cout));
      if (need_k) {
        im2col(xval.ptr() + n * pixels * cin, d, kh, kw, cols.data());
        as_matrix(tp.grad(ki), patch, cout).noalias() +=
            ConstMatMap<T>(cols.data(), static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(patch)).transpose() * gn;
      }
      if (need_x) {
        dcols.noalias() = gn * wm.transpose();
        col2im_add(dcols.data(), d, kh, kw, tp.grad(xi).ptr() + n * pixels * cin);
      }
    }
  });
}

template <typename T>
Var<T> pool_freq_max(Var<T> x) {
  Tape<T>& tape = x.tape();
  const NdBuffer<T>& xv = x.value();
  const SpatialDims d = spatial_dims(xv.shape(), "pool_freq_max");
  if (d.freq % 2 != 0) {
    throw ShapeError("pool_freq_max: frequency extent " + std::to_string(d.freq) + " is odd");
  }
  Shape out_shape = xv.shape();
  out_shape[out_shape.size() - 2] = d.freq / 2;
  NdBuffer<T> out(out_shape);
  const std::size_t rows = d.batch * d.time;
  const std::size_t half = d.freq / 2;
  const std::size_t c = d.channels;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t f = 0; f < half; ++f) {
      const T* lo = xv.ptr() + (r * d.freq + 2 * f) * c;
      const T* hi = lo + c;
      T* o = out.ptr() + (r * half + f) * c;
      for (std::size_t k = 0; k < c; ++k) o[k] = hi[k] > lo[k] ? hi[k] : lo[k];
    }
  }
  const std::size_t xi = x.id();
  return tape.push(std::move(out), {xi}, [=](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    const NdBuffer<T>& xval = tp.value(xi);
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t f = 0; f < half; ++f) {
        const std::size_t base = (r * d.freq + 2 * f) * c;
        const T* gi = g.ptr() + (r * half + f) * c;
        for (std::size_t k = 0; k < c; ++k) {
          const bool upper = xval[base + c + k] > xval[base + k];
          dx[base + (upper ? c : 0) + k] += gi[k];
        }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T> stats, Mode mode) {
  Tape<T>& tape = same_tape({x, gamma, beta}, "batch_norm");
  const NdBuffer<T>& xv = x.value();
  const std::size_t c = xv.shape().back();
  const std::size_t rows = xv.size() / c;
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("batch_norm: gamma/beta must have " + std::to_string(c) + " entries");
  }
  if (!stats.mean || !stats.var || !stats.count || stats.mean->size() != c || stats.var->size() != c) {
    throw ShapeError("batch_norm: running statistics must have " + std::to_string(c) + " entries");
  }
  const T eps = static_cast<T>(kBatchNormEpsilon);
  std::vector<T> mu(c, T{0});
  std::vector<T> inv_std(c, T{0});
  if (mode == Mode::train) {
    std::vector<double> sum(c, 0.0);
    std::vector<double> sq(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv.ptr() + r * c;
      for (std::size_t k = 0; k < c; ++k) sum[k] += static_cast<double>(row[k]);
    }
    for (std::size_t k = 0; k < c; ++k) mu[k] = static_cast<T>(sum[k] / static_cast<double>(rows));
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv.ptr() + r * c;
      for (std::size_t k = 0; k < c; ++k) {
        const double dv = static_cast<double>(row[k] - mu[k]);
        sq[k] += dv * dv;
      }
    }
    const T m = static_cast<T>(kBatchNormMomentum);
    for (std::size_t k = 0; k < c; ++k) {
      const T var = static_cast<T>(sq[k] / static_cast<double>(rows));
      inv_std[k] = T{1} / std::sqrt(var + eps);
      (*stats.mean)[k] = m * (*stats.mean)[k] + (T{1} - m) * mu[k];
      (*stats.var)[k] = m * (*stats.var)[k] + (T{1} - m) * var;
    }
    (*stats.count)[0] += T{1};
  } else {
    if ((*stats.count)[0] <= T{0}) {
      throw Error("batch_norm: inference requested before any training statistics exist");
    }
    for (std::size_t k = 0; k < c; ++k) {
      mu[k] = (*stats.mean)[k];
      inv_std[k] = T{1} / std::sqrt((*stats.var)[k] + eps);
    }
  }
  NdBuffer<T> out(xv.shape());
  const T* gm = gamma.value().ptr();
  const T* bt = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.ptr() + r * c;
    T* o = out.ptr() + r * c;
    for (std::size_t k = 0; k < c; ++k) o[k] = gm[k] * (row[k] - mu[k]) * inv_std[k] + bt[k];
  }
  const std::size_t xi = x.id();
  const std::size_t gi = gamma.id();
  const std::size_t bi = beta.id();
  const bool batch_stats = mode == Mode::train;
  return tape.push(std::move(out), {xi, gi, bi}, [=](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    const NdBuffer<T>& xval = tp.value(xi);
    const T* gmv = tp.value(gi).ptr();
    std::vector<T> sum_g(c, T{0});
    std::vector<T> sum_gx(c, T{0});
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.ptr() + r * c;
      const T* xr = xval.ptr() + r * c;
      for (std::size_t k = 0; k < c; ++k) {
        sum_g[k] += gr[k];
        sum_gx[k] += gr[k] * (xr[k] - mu[k]) * inv_std[k];
      }
    }
    if (tp.requires_grad(gi)) {
      NdBuffer<T>& dg = tp.grad(gi);
      for (std::size_t k = 0; k < c; ++k) dg[k] += sum_gx[k];
    }
    if (tp.requires_grad(bi)) {
      NdBuffer<T>& db = tp.grad(bi);
      for (std::size_t k = 0; k < c; ++k) db[k] += sum_g[k];
    }
    if (!tp.requires_grad(xi)) return;
    NdBuffer<T>& dx = tp.grad(xi);
    const T inv_m = T{1} / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.ptr() + r * c;
      const T* xr = xval.ptr() + r * c;
      T* d = dx.ptr() + r * c;
      for (std::size_t k = 0; k < c; ++k) {
        if (batch_stats) {
          const T xhat = (xr[k] - mu[k]) * inv_std[k];
          d[k] += gmv[k] * inv_std[k] * (gr[k] - inv_m * sum_g[k] - xhat * inv_m * sum_gx[k]);
        } else {
          d[k] += gmv[k] * inv_std[k] * gr[k];
        }
      }
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const NdBuffer<T>& xv = x.value();
  NdBuffer<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    const NdBuffer<T>& xval = tp.value(xi);
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xval[i] > T{0}) dx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const NdBuffer<T>& xv = x.value();
  NdBuffer<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    const NdBuffer<T>& y = tp.value(self);
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> softmax(Var<T> x) {
  const NdBuffer<T>& xv = x.value();
  const std::size_t k = xv.shape().back();
  const std::size_t rows = xv.size() / k;
  NdBuffer<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * k;
    T* o = out.ptr() + r * k;
    const T mx = *std::max_element(in, in + k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= total;
  }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [=](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    const NdBuffer<T>& y = tp.value(self);
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.ptr() + r * k;
      const T* yr = y.ptr() + r * k;
      T dot{0};
      for (std::size_t j = 0; j < k; ++j) dot += gr[j] * yr[j];
      T* d = dx.ptr() + r * k;
      for (std::size_t j = 0; j < k; ++j) d[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var<T> dropout(Var<T> x, double rate) {
  Tape<T>& tape = x.tape();
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  if (tape.mode() == Mode::infer || rate == 0.0) return x;
  const NdBuffer<T>& xv = x.value();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(xv.size());
  NdBuffer<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = tape.rng().uniform() < rate ? T{0} : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  const std::size_t xi = x.id();
  return tape.push(std::move(out), {xi}, [xi, mask = std::move(mask)](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
  });
}

template <typename T>
Var<T> channel_pool(Var<T> x) {
  const NdBuffer<T>& xv = x.value();
  const std::size_t c = xv.shape().back();
  const std::size_t rows = xv.size() / c;
  Shape out_shape = xv.shape();
  out_shape.back() = 2;
  NdBuffer<T> out(out_shape);
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * c;
    T total{0};
    std::size_t best = 0;
    for (std::size_t k = 0; k < c; ++k) {
      total += in[k];
      if (in[k] > in[best]) best = k;
    }
    out[2 * r] = total / static_cast<T>(c);
    out[2 * r + 1] = in[best];
    arg[r] = best;
  }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [=, arg = std::move(arg)](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    NdBuffer<T>& dx = tp.grad(xi);
    const T inv_c = T{1} / static_cast<T>(c);
    for (std::size_t r = 0; r < rows; ++r) {
      T* d = dx.ptr() + r * c;
      const T gm = g[2 * r] * inv_c;
      for (std::size_t k = 0; k < c; ++k) d[k] += gm;
      d[arg[r]] += g[2 * r + 1];
    }
  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const NdBuffer<T>& xv = x.value();
  const SpatialDims d = spatial_dims(xv.shape(), "global_avg_pool");
  Shape out_shape = xv.shape();
  out_shape[out_shape.size() - 3] = 1;
  out_shape[out_shape.size() - 2] = 1;
  NdBuffer<T> out(out_shape);
  const std::size_t pixels = d.time * d.freq;
  for (std::size_t n = 0; n < d.batch; ++n) {
    RowVecMap<T> o(out.ptr() + n * d.channels, static_cast<Eigen::Index>(d.channels));
    o = ConstMatMap<T>(xv.ptr() + n * pixels * d.channels, static_cast<Eigen::Index>(pixels),
                       static_cast<Eigen::Index>(d.channels))
            .colwise()
            .mean();
  }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [=](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    NdBuffer<T>& dx = tp.grad(xi);
    const T inv = T{1} / static_cast<T>(pixels);
    for (std::size_t n = 0; n < d.batch; ++n) {
      const T* gn = g.ptr() + n * d.channels;
      for (std::size_t p = 0; p < pixels; ++p) {
        T* row = dx.ptr() + (n * pixels + p) * d.channels;
        for (std::size_t k = 0; k < d.channels; ++k) row[k] += gn[k] * inv;
      }
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape({a, b}, "mul");
  const BroadcastPlan plan = plan_broadcast(a.value().shape(), b.value().shape(), "mul");
  NdBuffer<T> out(plan.out);
  {
    const T* av = a.value().ptr();
    const T* bv = b.value().ptr();
    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] * bv[ib]; });
  }
  const std::size_t ai = a.id();
  const std::size_t bi = b.id();
  return tape.push(std::move(out), {ai, bi}, [=](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    const T* av = tp.value(ai).ptr();
    const T* bv = tp.value(bi).ptr();
    if (tp.requires_grad(ai)) {
      T* da = tp.grad(ai).ptr();
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { da[ia] += g[i] * bv[ib]; });
    }
    if (tp.requires_grad(bi)) {
      T* db = tp.grad(bi).ptr();
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { db[ib] += g[i] * av[ia]; });
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape({a, b}, "add");
  if (a.value().shape() != b.value().shape()) {
    throw ShapeError("add: shapes " + shape_to_string(a.value().shape()) + " and " +
                     shape_to_string(b.value().shape()) + " differ");
  }
  NdBuffer<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const std::size_t ai = a.id();
  const std::size_t bi = b.id();
  return tape.push(std::move(out), {ai, bi}, [ai, bi](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    for (std::size_t id : {ai, bi}) {
      if (!tp.requires_grad(id)) continue;
      NdBuffer<T>& d = tp.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  const NdBuffer<T>& xv = x.value();
  NdBuffer<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, factor](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> square(Var<T> x) {
  const NdBuffer<T>& xv = x.value();
  NdBuffer<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * xv[i];
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    const NdBuffer<T>& xval = tp.value(xi);
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += T{2} * xval[i] * g[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const NdBuffer<T>& xv = x.value();
  T total{0};
  for (T v : xv.data()) total += v;
  const std::size_t xi = x.id();
  return x.tape().push(NdBuffer<T>({1}, total), {xi}, [xi](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)[0];
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape({a, b}, "concat_last");
  const Shape& sa = a.value().shape();
  const Shape& sb = b.value().shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    throw ShapeError("concat_last: leading extents differ, " + shape_to_string(sa) + " vs " + shape_to_string(sb));
  }
  const std::size_t ca = sa.back();
  const std::size_t cb = sb.back();
  const std::size_t rows = a.value().size() / ca;
  Shape out_shape = sa;
  out_shape.back() = ca + cb;
  NdBuffer<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::memcpy(out.ptr() + r * (ca + cb), a.value().ptr() + r * ca, ca * sizeof(T));
    std::memcpy(out.ptr() + r * (ca + cb) + ca, b.value().ptr() + r * cb, cb * sizeof(T));
  }
  const std::size_t ai = a.id();
  const std::size_t bi = b.id();
  return tape.push(std::move(out), {ai, bi}, [=](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      NdBuffer<T>& da = tp.grad(ai);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < ca; ++k) da[r * ca + k] += g[r * (ca + cb) + k];
      }
    }
    if (tp.requires_grad(bi)) {
      NdBuffer<T>& db = tp.grad(bi);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < cb; ++k) db[r * cb + k] += g[r * (ca + cb) + ca + k];
      }
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  if (shape_size(shape) != x.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.value().shape()) + " as " + shape_to_string(shape));
  }
  const std::size_t xi = x.id();
  return x.tape().push(x.value().reshaped(std::move(shape)), {xi}, [xi](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    NdBuffer<T>& dx = tp.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

template <typename T>
Var<T> dense(Var<T> x, Var<T> weight, Var<T> bias) {
  Tape<T>& tape = same_tape({x, weight, bias}, "dense");
  const NdBuffer<T>& xv = x.value();
  const NdBuffer<T>& wv = weight.value();
  if (wv.rank() != 2) throw ShapeError("dense: weight must be [D, K], got " + shape_to_string(wv.shape()));
  const std::size_t din = wv.shape()[0];
  const std::size_t k = wv.shape()[1];
  if (xv.shape().back() != din) {
    throw ShapeError("dense: input feature extent " + std::to_string(xv.shape().back()) +
                     " does not match weight rows " + std::to_string(din));
  }
  if (bias.value().size() != k) throw ShapeError("dense: bias must have " + std::to_string(k) + " entries");
  const std::size_t rows = xv.size() / din;
  Shape out_shape = xv.shape();
  out_shape.back() = k;
  NdBuffer<T> out(out_shape);
  auto o = as_matrix(out, rows, k);
  o.noalias() = as_matrix(xv, rows, din) * as_matrix(wv, din, k);
  o.rowwise() += ConstRowVecMap<T>(bias.value().ptr(), static_cast<Eigen::Index>(k));
  const std::size_t xi = x.id();
  const std::size_t wi = weight.id();
  const std::size_t bi = bias.id();
  return tape.push(std::move(out), {xi, wi, bi}, [=](Tape<T>& tp, std::size_t self) {
    const NdBuffer<T>& g = tp.grad(self);
    auto gm = as_matrix(g, rows, k);
    if (tp.requires_grad(wi)) as_matrix(tp.grad(wi), din, k).noalias() += as_matrix(tp.value(xi), rows, din).transpose() * gm;
    if (tp.requires_grad(bi)) RowVecMap<T>(tp.grad(bi).ptr(), static_cast<Eigen::Index>(k)) += gm.colwise().sum();
    if (tp.requires_grad(xi)) as_matrix(tp.grad(xi), rows, din).noalias() += gm * as_matrix(tp.value(wi), din, k).transpose();
  });
}

namespace {

/// Saved activations of one GRU direction, time-major [T, B, H].
template <typename T>
struct GruTrace {
  std::vector<T> z;
  std::vector<T> r;
  std::vector<T> n;
  std::vector<T> h_prev;
};

template <typename T>
void check_gru_weights(const GruWeights<T>& w, std::size_t d, const char* which) {
  const Shape& ws = w.input.value().shape();
  const Shape& us = w.recurrent.value().shape();
  if (ws.size() != 2 || us.size() != 2 || us[0] * 3 != us[1] || ws[1] != us[1] || w.bias.value().size() != us[1]) {
    throw ShapeError(std::string("gru_bidirectional: inconsistent ") + which + " weights " + shape_to_string(ws) +
                     ", " + shape_to_string(us) + ", " + shape_to_string(w.bias.value().shape()));
  }
  if (ws[0] != d) {
    throw ShapeError(std::string("gru_bidirectional: ") + which + " input weights expect feature extent " +
                     std::to_string(ws[0]) + ", got " + std::to_string(d));
  }
}

/// Runs one direction over time-major input projections xp [T*B, 3H] and
/// writes hidden states into out (batch-major [B, T, 2H] at column offset).
template <typename T>
void gru_direction_forward(const RowMat<T>& xp, const NdBuffer<T>& u, std::size_t steps, std::size_t batch,
                           std::size_t hidden, bool reverse, std::size_t col_offset, NdBuffer<T>& out,
                           GruTrace<T>& trace) {
  const auto h3 = static_cast<Eigen::Index>(3 * hidden);
  const auto hh = static_cast<Eigen::Index>(hidden);
  const auto bb = static_cast<Eigen::Index>(batch);
  ConstMatMap<T> um(u.ptr(), hh, h3);
  RowMat<T> h = RowMat<T>::Zero(bb, hh);
  RowMat<T> gh(bb, 2 * hh);
  RowMat<T> rh(bb, hh);
  RowMat<T> cand(bb, hh);
  const std::size_t step_size = batch * hidden;
  trace.z.resize(steps * step_size);
  trace.r.resize(steps * step_size);
  trace.n.resize(steps * step_size);
  trace.h_prev.resize(steps * step_size);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    std::memcpy(trace.h_prev.data() + t * step_size, h.data(), step_size * sizeof(T));
    gh.noalias() = h * um.leftCols(2 * hh);
    T* z = trace.z.data() + t * step_size;
    T* r = trace.r.data() + t * step_size;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* xr = xp.data() + (t * batch + b) * 3 * hidden;
      for (std::size_t j = 0; j < hidden; ++j) {
        z[b * hidden + j] = sigmoid_scalar(xr[j] + gh(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j)));
        r[b * hidden + j] =
            sigmoid_scalar(xr[hidden + j] + gh(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(hidden + j)));
        rh(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j)) =
            r[b * hidden + j] * h(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j));
      }
    }
    cand.noalias() = rh * um.rightCols(hh);
    T* n = trace.n.data() + t * step_size;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* xr = xp.data() + (t * batch + b) * 3 * hidden;
      for (std::size_t j = 0; j < hidden; ++j) {
        const std::size_t k = b * hidden + j;
        const auto bi = static_cast<Eigen::Index>(b);
        const auto ji = static_cast<Eigen::Index>(j);
        n[k] = std::tanh(xr[2 * hidden + j] + cand(bi, ji));
        h(bi, ji) = z[k] * h(bi, ji) + (T{1} - z[k]) * n[k];
        out[(b * steps + t) * 2 * hidden + col_offset + j] = h(bi, ji);
      }
    }
  }
}

/// Backpropagation through time for one direction. Accumulates dU and returns
/// dxp [T*B, 3H] (time-major).
template <typename T>
RowMat<T> gru_direction_backward(const NdBuffer<T>& g, const NdBuffer<T>& u, const GruTrace<T>& trace,
                                 std::size_t steps, std::size_t batch, std::size_t hidden, bool reverse,
                                 std::size_t col_offset, NdBuffer<T>* du) {
  const auto hh = static_cast<Eigen::Index>(hidden);
  const auto h3 = static_cast<Eigen::Index>(3 * hidden);
  const auto bb = static_cast<Eigen::Index>(batch);
  ConstMatMap<T> um(u.ptr(), hh, h3);
  RowMat<T> dxp = RowMat<T>::Zero(static_cast<Eigen::Index>(steps * batch), h3);
  RowMat<T> du_acc = RowMat<T>::Zero(hh, h3);
  RowMat<T> dh = RowMat<T>::Zero(bb, hh);
  RowMat<T> dh_prev(bb, hh);
  RowMat<T> dan(bb, hh);
  RowMat<T> dzr(bb, 2 * hh);
  RowMat<T> rh(bb, hh);
  RowMat<T> hprev(bb, hh);
  RowMat<T> drh(bb, hh);
  const std::size_t step_size = batch * hidden;
  for (std::size_t s = steps; s-- > 0;) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    const T* z = trace.z.data() + t * step_size;
    const T* r = trace.r.data() + t * step_size;
    const T* n = trace.n.data() + t * step_size;
    std::memcpy(hprev.data(), trace.h_prev.data() + t * step_size, step_size * sizeof(T));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < hidden; ++j) {
        const auto bi = static_cast<Eigen::Index>(b);
        const auto ji = static_cast<Eigen::Index>(j);
        const std::size_t k = b * hidden + j;
        dh(bi, ji) += g[(b * steps + t) * 2 * hidden + col_offset + j];
        const T dn = dh(bi, ji) * (T{1} - z[k]);
        dzr(bi, ji) = dh(bi, ji) * (hprev(bi, ji) - n[k]) * z[k] * (T{1} - z[k]);
        dh_prev(bi, ji) = dh(bi, ji) * z[k];
        dan(bi, ji) = dn * (T{1} - n[k] * n[k]);
        rh(bi, ji) = r[k] * hprev(bi, ji);
      }
    }
    du_acc.rightCols(hh).noalias() += rh.transpose() * dan;
    drh.noalias() = dan * um.rightCols(hh).transpose();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < hidden; ++j) {
        const auto bi = static_cast<Eigen::Index>(b);
        const auto ji = static_cast<Eigen::Index>(j);
        const std::size_t k = b * hidden + j;
        const T dr = drh(bi, ji) * hprev(bi, ji);
        dh_prev(bi, ji) += drh(bi, ji) * r[k];
        dzr(bi, hh + ji) = dr * r[k] * (T{1} - r[k]);
      }
    }
    du_acc.leftCols(2 * hh).noalias() += hprev.transpose() * dzr;
    dh_prev.noalias() += dzr * um.leftCols(2 * hh).transpose();
    auto rows = dxp.middleRows(static_cast<Eigen::Index>(t * batch), bb);
    rows.leftCols(2 * hh) = dzr;
    rows.rightCols(hh) = dan;
    dh = dh_prev;
  }
  if (du) as_matrix(*du, hidden, 3 * hidden) += du_acc;
  return dxp;
}

}  // namespace

template <typename T>
Var<T> gru_bidirectional(Var<T> x, const GruWeights<T>& fwd, const GruWeights<T>& bwd) {
  Tape<T>& tape =
      same_tape({x, fwd.input, fwd.recurrent, fwd.bias, bwd.input, bwd.recurrent, bwd.bias}, "gru_bidirectional");
  const NdBuffer<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("gru_bidirectional: input must be [..., T, D], got " + shape_to_string(xv.shape()));
  const std::size_t steps = xv.shape()[xv.rank() - 2];
  const std::size_t din = xv.shape().back();
  const std::size_t batch = xv.size() / (steps * din);
  check_gru_weights(fwd, din, "forward");
  check_gru_weights(bwd, din, "backward");
  const std::size_t hidden = fwd.recurrent.value().shape()[0];
  if (bwd.recurrent.value().shape()[0] != hidden) {
    throw ShapeError("gru_bidirectional: forward and backward hidden sizes differ");
  }
  const auto h3 = static_cast<Eigen::Index>(3 * hidden);
  const auto rows = static_cast<Eigen::Index>(steps * batch);

  // Time-major copy so each step reads a contiguous block of rows.
  RowMat<T> x_tm(rows, static_cast<Eigen::Index>(din));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      std::memcpy(x_tm.data() + (t * batch + b) * din, xv.ptr() + (b * steps + t) * din, din * sizeof(T));
    }
  }

  Shape out_shape = xv.shape();
  out_shape.back() = 2 * hidden;
  NdBuffer<T> out(out_shape);
  auto traces = std::make_shared<std::array<GruTrace<T>, 2>>();
  const std::array<const GruWeights<T>*, 2> dirs{&fwd, &bwd};
  for (std::size_t dir = 0; dir < 2; ++dir) {
    RowMat<T> xp(rows, h3);
    xp.noalias() = x_tm * as_matrix(dirs[dir]->input.value(), din, 3 * hidden);
    xp.rowwise() += ConstRowVecMap<T>(dirs[dir]->bias.value().ptr(), h3);
    gru_direction_forward(xp, dirs[dir]->recurrent.value(), steps, batch, hidden, dir == 1, dir * hidden, out,
                          (*traces)[dir]);
  }

  const std::size_t xi = x.id();
  const std::array<std::array<std::size_t, 3>, 2> ids{
      {{fwd.input.id(), fwd.recurrent.id(), fwd.bias.id()}, {bwd.input.id(), bwd.recurrent.id(), bwd.bias.id()}}};
  return tape.push(
      std::move(out), {xi, ids[0][0], ids[0][1], ids[0][2], ids[1][0], ids[1][1], ids[1][2]},
      [=](Tape<T>& tp, std::size_t self) {
        const NdBuffer<T>& g = tp.grad(self);
        const NdBuffer<T>& xval = tp.value(xi);
        RowMat<T> xtm(rows, static_cast<Eigen::Index>(din));
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < steps; ++t) {
            std::memcpy(xtm.data() + (t * batch + b) * din, xval.ptr() + (b * steps + t) * din, din * sizeof(T));
          }
        }
        RowMat<T> dx_tm = RowMat<T>::Zero(rows, static_cast<Eigen::Index>(din));
        for (std::size_t dir = 0; dir < 2; ++dir) {
          const auto [wi, ui, bi] = ids[dir];
          NdBuffer<T>* du = tp.requires_grad(ui) ? &tp.grad(ui) : nullptr;
          const RowMat<T> dxp = gru_direction_backward(g, tp.value(ui), (*traces)[dir], steps, batch, hidden,
                                                       dir == 1, dir * hidden, du);
          if (tp.requires_grad(wi)) as_matrix(tp.grad(wi), din, 3 * hidden).noalias() += xtm.transpose() * dxp;
          if (tp.requires_grad(bi)) RowVecMap<T>(tp.grad(bi).ptr(), h3) += dxp.colwise().sum();
          if (tp.requires_grad(xi)) dx_tm.noalias() += dxp * as_matrix(tp.value(wi), din, 3 * hidden).transpose();
        }
        if (tp.requires_grad(xi)) {
          NdBuffer<T>& dx = tp.grad(xi);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t t = 0; t < steps; ++t) {
              T* dst = dx.ptr() + (b * steps + t) * din;
              const T* src = dx_tm.data() + (t * batch + b) * din;
              for (std::size_t k = 0; k < din; ++k) dst[k] += src[k];
            }
          }
        }
      });
}

template <typename T>
Var<T> cross_entropy(Var<T> probs, const std::vector<std::int32_t>& targets) {
  const NdBuffer<T>& pv = probs.value();
  const std::size_t k = pv.shape().back();
  const std::size_t rows = pv.size() / k;
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  const T clamp = static_cast<T>(kLogClamp);
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k) {
      throw Error("cross_entropy: target " + std::to_string(targets[r]) + " at row " + std::to_string(r) +
                  " outside [0, " + std::to_string(k) + ")");
    }
    total -= std::log(std::max(pv[r * k + static_cast<std::size_t>(targets[r])], clamp));
  }
  const std::size_t pi = probs.id();
  return probs.tape().push(NdBuffer<T>({1}, total / static_cast<T>(rows)), {pi},
                           [=](Tape<T>& tp, std::size_t self) {
                             const T g = tp.grad(self)[0] / static_cast<T>(rows);
                             const NdBuffer<T>& p = tp.value(pi);
                             NdBuffer<T>& dp = tp.grad(pi);
                             for (std::size_t r = 0; r < rows; ++r) {
                               const std::size_t at = r * k + static_cast<std::size_t>(targets[r]);
                               if (p[at] > clamp) dp[at] -= g / p[at];
                             }
                           });
}

template <typename T>
Var<T> binary_cross_entropy(Var<T> probs, const NdBuffer<T>& targets) {
  const NdBuffer<T>& pv = probs.value();
  if (pv.shape() != targets.shape()) {
    throw ShapeError("binary_cross_entropy: probabilities " + shape_to_string(pv.shape()) + " vs targets " +
                     shape_to_string(targets.shape()));
  }
  const T clamp = static_cast<T>(kLogClamp);
  T total{0};
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T y = targets[i];
    if (y != T{0} && y != T{1}) throw Error("binary_cross_entropy: non-binary target at element " + std::to_string(i));
    total -= y == T{1} ? std::log(std::max(pv[i], clamp)) : std::log(std::max(T{1} - pv[i], clamp));
  }
  const std::size_t n = pv.size();
  const std::size_t pi = probs.id();
  return probs.tape().push(NdBuffer<T>({1}, total / static_cast<T>(n)), {pi},
                           [=](Tape<T>& tp, std::size_t self) {
                             const T g = tp.grad(self)[0] / static_cast<T>(n);
                             const NdBuffer<T>& p = tp.value(pi);
                             NdBuffer<T>& dp = tp.grad(pi);
                             for (std::size_t i = 0; i < n; ++i) {
                               if (targets[i] == T{1}) {
                                 if (p[i] > clamp) dp[i] -= g / p[i];
                               } else if (T{1} - p[i] > clamp) {
                                 dp[i] += g / (T{1} - p[i]);
                               }
                             }
                           });
}

template <typename T>
Var<T> average(const std::vector<Var<T>>& scalars) {
  if (scalars.empty()) throw Error("average: no values");
  Tape<T>& tape = scalars.front().tape();
  std::vector<std::size_t> ids;
  T total{0};
  for (const auto& s : scalars) {
    if (&s.tape() != &tape) throw Error("average: operands recorded on different tapes");
    if (s.value().size() != 1) throw ShapeError("average: expects scalars, got " + shape_to_string(s.value().shape()));
    total += s.value()[0];
    ids.push_back(s.id());
  }
  const T inv = T{1} / static_cast<T>(scalars.size());
  return tape.push(NdBuffer<T>({1}, total * inv), ids, [ids, inv](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)[0] * inv;
    for (std::size_t id : ids) {
      if (tp.requires_grad(id)) tp.grad(id)[0] += g;
    }
  });
}

#define PAED_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>);                                               \
  template Var<T> pool_freq_max(Var<T>);                                                        \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, RunningStats<T>, Mode);                    \
  template Var<T> relu(Var<T>);                                                                 \
  template Var<T> sigmoid(Var<T>);                                                              \
  template Var<T> softmax(Var<T>);                                                              \
  template Var<T> dropout(Var<T>, double);                                                      \
  template Var<T> channel_pool(Var<T>);                                                         \
  template Var<T> global_avg_pool(Var<T>);                                                      \
  template Var<T> mul(Var<T>, Var<T>);                                                          \
  template Var<T> add(Var<T>, Var<T>);                                                          \
  template Var<T> scale(Var<T>, T);                                                             \
  template Var<T> square(Var<T>);                                                               \
  template Var<T> sum(Var<T>);                                                                  \
  template Var<T> mean(Var<T>);                                                                 \
  template Var<T> concat_last(Var<T>, Var<T>);                                                  \
  template Var<T> reshape(Var<T>, Shape);                                                       \
  template Var<T> dense(Var<T>, Var<T>, Var<T>);                                                \
  template Var<T> gru_bidirectional(Var<T>, const GruWeights<T>&, const GruWeights<T>&);        \
  template Var<T> cross_entropy(Var<T>, const std::vector<std::int32_t>&);                      \
  template Var<T> binary_cross_entropy(Var<T>, const NdBuffer<T>&);                             \
  template Var<T> average(const std::vector<Var<T>>&);

PAED_INSTANTIATE_OPS(float)
PAED_INSTANTIATE_OPS(double)

#undef PAED_INSTANTIATE_OPS

}  // namespace paed::ops
