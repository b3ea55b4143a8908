#include "paed/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

#include "paed/error.hpp"

namespace paed {
namespace {

/// FFTW planning is not thread-safe; plan execution with new arrays is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

class RealFft {
 public:
  explicit RealFft(std::size_t n)
      : n_(n),
        in_(static_cast<double*>(fftw_malloc(sizeof(double) * n))),
        out_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)))) {
    std::lock_guard lock(planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_.get(), out_.get(), FFTW_ESTIMATE);
    if (!plan_) throw Error("FFTW could not create a plan of size " + std::to_string(n));
  }
  ~RealFft() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_.get(); }
  const fftw_complex* output() const { return out_.get(); }
  void execute() { fftw_execute(plan_); }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  std::unique_ptr<double, FftwFree> in_;
  std::unique_ptr<fftw_complex, FftwFree> out_;
  fftw_plan plan_ = nullptr;
};

void validate(const FeatureConfig& c) {
  if (c.sample_rate <= 0 || c.frame_length == 0 || c.hop_length == 0 || c.num_mels == 0) {
    throw UsageError("feature config: rates, lengths and band count must be positive");
  }
  if (c.fft_size < c.frame_length) throw UsageError("feature config: fft_size must be at least frame_length");
  if (!(c.fmin >= 0.0 && c.fmin < c.fmax && c.fmax <= c.sample_rate / 2.0)) {
    throw UsageError("feature config: need 0 <= fmin < fmax <= sample_rate / 2");
  }
}

std::vector<double> mel_edges(const FeatureConfig& c) {
  const double lo = hz_to_mel(c.fmin);
  const double hi = hz_to_mel(c.fmax);
  std::vector<double> hz(c.num_mels + 2);
  for (std::size_t i = 0; i < hz.size(); ++i) {
    hz[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(c.num_mels + 1));
  }
  return hz;
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_center_frequencies(const FeatureConfig& config) {
  validate(config);
  const auto edges = mel_edges(config);
  return std::vector<double>(edges.begin() + 1, edges.end() - 1);
}

NdBuffer<double> mel_filterbank(const FeatureConfig& config) {
  validate(config);
  const auto edges = mel_edges(config);
  const std::size_t bins = config.fft_size / 2 + 1;
  NdBuffer<double> fb({config.num_mels, bins});
  for (std::size_t m = 0; m < config.num_mels; ++m) {
    const double l = edges[m];
    const double c = edges[m + 1];
    const double r = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * config.sample_rate / static_cast<double>(config.fft_size);
      const double w = std::min((f - l) / (c - l), (r - f) / (r - c));
      fb.at(m, k) = std::max(0.0, w);
    }
  }
  return fb;
}

std::size_t frame_count(std::size_t num_samples, const FeatureConfig& config) {
  if (num_samples < config.frame_length) return 0;
  return (num_samples - config.frame_length) / config.hop_length + 1;
}

Spectrogram log_mel(std::span<const double> samples, int sample_rate, const FeatureConfig& config) {
  validate(config);
  if (sample_rate != config.sample_rate) {
    throw DataError("log_mel: expected a sample rate of " + std::to_string(config.sample_rate) + " Hz, got " +
                    std::to_string(sample_rate) + " Hz");
  }
  const std::size_t frames = frame_count(samples.size(), config);
  if (frames == 0) {
    throw DataError("log_mel: need at least " + std::to_string(config.frame_length) + " samples (one frame), got " +
                    std::to_string(samples.size()));
  }
  const std::size_t n = config.frame_length;
  std::vector<double> window(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Periodic Hann window.
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  const NdBuffer<double> fb = mel_filterbank(config);
  const std::size_t bins = config.fft_size / 2 + 1;
  // Restrict each filter to its non-zero support.
  std::vector<std::pair<std::size_t, std::size_t>> support(config.num_mels, {0, 0});
  for (std::size_t m = 0; m < config.num_mels; ++m) {
    std::size_t lo = bins, hi = 0;
    for (std::size_t k = 0; k < bins; ++k) {
      if (fb.at(m, k) > 0.0) {
        lo = std::min(lo, k);
        hi = k + 1;
      }
    }
    support[m] = lo < hi ? std::make_pair(lo, hi) : std::make_pair(std::size_t{0}, std::size_t{0});
  }

  Spectrogram spec;
  spec.values = NdBuffer<double>({frames, config.num_mels});
  spec.hop_seconds = config.hop_seconds();
  spec.frame_seconds = config.frame_seconds();
  spec.sample_rate = config.sample_rate;

  RealFft fft(config.fft_size);
  std::vector<double> mag(bins);
  const double log_floor = std::log(config.log_floor);
  for (std::size_t t = 0; t < frames; ++t) {
    double* in = fft.input();
    const double* src = samples.data() + t * config.hop_length;
    for (std::size_t i = 0; i < n; ++i) in[i] = src[i] * window[i];
    std::fill(in + n, in + config.fft_size, 0.0);
    fft.execute();
    const fftw_complex* out = fft.output();
    for (std::size_t k = 0; k < bins; ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
    double* row = spec.values.ptr() + t * config.num_mels;
    for (std::size_t m = 0; m < config.num_mels; ++m) {
      double e = 0.0;
      const double* w = fb.ptr() + m * bins;
      for (std::size_t k = support[m].first; k < support[m].second; ++k) e += w[k] * mag[k];
      row[m] = e > config.log_floor ? std::log(e) : log_floor;
    }
  }
  return spec;
}

std::vector<SegmentRef> segment_layout(std::size_t total_frames, SegmentMode mode, std::size_t segment_frames) {
  if (segment_frames == 0) throw UsageError("segment_layout: segment length must be positive");
  std::vector<SegmentRef> refs;
  if (mode == SegmentMode::train) {
    if (total_frames < segment_frames) {
      throw DataError("segment_layout: training needs at least " + std::to_string(segment_frames) +
                      " frames, got " + std::to_string(total_frames));
    }
    for (std::size_t k = 0; k + segment_frames <= total_frames; ++k) refs.push_back({k, 0});
    return refs;
  }
  for (std::size_t k = 0; k < total_frames; k += segment_frames) {
    const std::size_t end = k + segment_frames;
    refs.push_back({k, end > total_frames ? end - total_frames : 0});
  }
  return refs;
}

NdBuffer<double> extract_segment(const NdBuffer<double>& values, const SegmentRef& ref,
                                 std::span<const double> pad_row, std::size_t segment_frames) {
  if (values.rank() != 2) throw ShapeError("extract_segment: expected [frames, bins], got " + shape_to_string(values.shape()));
  const std::size_t total = values.shape()[0];
  const std::size_t bins = values.shape()[1];
  if (ref.offset >= total) throw ShapeError("extract_segment: offset beyond the spectrogram");
  const std::size_t real = std::min(segment_frames, total - ref.offset);
  if (real < segment_frames && pad_row.size() != bins) {
    throw ShapeError("extract_segment: pad row has " + std::to_string(pad_row.size()) + " bins, expected " +
                     std::to_string(bins));
  }
  NdBuffer<double> seg({segment_frames, bins});
  std::copy_n(values.ptr() + ref.offset * bins, real * bins, seg.ptr());
  for (std::size_t t = real; t < segment_frames; ++t) std::copy(pad_row.begin(), pad_row.end(), seg.ptr() + t * bins);
  return seg;
}

std::vector<Segment> segment_stream(const Spectrogram& spec, SegmentMode mode, const FeatureConfig& config) {
  const std::vector<double> pad(spec.bins(), std::log(config.log_floor));
  std::vector<Segment> out;
  for (const auto& ref : segment_layout(spec.frames(), mode)) {
    out.push_back({extract_segment(spec.values, ref, pad), ref.offset, ref.pad_len});
  }
  return out;
}

FeatureStats compute_stats(std::span<const Spectrogram> spectrograms) {
  if (spectrograms.empty()) throw DataError("compute_stats: no spectrograms");
  const std::size_t bins = spectrograms.front().bins();
  std::vector<double> sum(bins, 0.0);
  std::size_t count = 0;
  for (const auto& s : spectrograms) {
    if (s.bins() != bins) throw ShapeError("compute_stats: spectrograms disagree on the bin count");
    for (std::size_t t = 0; t < s.frames(); ++t) {
      for (std::size_t b = 0; b < bins; ++b) sum[b] += s.values[t * bins + b];
    }
    count += s.frames();
  }
  FeatureStats st;
  st.mean.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) st.mean[b] = sum[b] / static_cast<double>(count);
  // Second pass for a numerically stable (population) variance.
  std::vector<double> sq(bins, 0.0);
  for (const auto& s : spectrograms) {
    for (std::size_t t = 0; t < s.frames(); ++t) {
      for (std::size_t b = 0; b < bins; ++b) {
        const double d = s.values[t * bins + b] - st.mean[b];
        sq[b] += d * d;
      }
    }
  }
  st.std.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) st.std[b] = std::sqrt(sq[b] / static_cast<double>(count));
  return st;
}

NdBuffer<double> standardize(const NdBuffer<double>& values, const FeatureStats& stats) {
  if (stats.empty()) throw DataError("standardize: feature statistics are missing");
  const std::size_t bins = values.shape().back();
  if (stats.mean.size() != bins || stats.std.size() != bins) {
    throw ShapeError("standardize: statistics cover " + std::to_string(stats.mean.size()) + " bins, values have " +
                     std::to_string(bins));
  }
  NdBuffer<double> out(values.shape());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t b = i % bins;
    out[i] = (values[i] - stats.mean[b]) / std::max(stats.std[b], kStdFloor);
  }
  return out;
}

Spectrogram standardize(const Spectrogram& spec, const FeatureStats& stats) {
  Spectrogram out = spec;
  out.values = standardize(spec.values, stats);
  return out;
}

std::vector<double> standardized_floor(const FeatureStats& stats, const FeatureConfig& config) {
  if (stats.empty()) throw DataError("standardized_floor: feature statistics are missing");
  NdBuffer<double> row({1, stats.mean.size()}, std::log(config.log_floor));
  const NdBuffer<double> out = standardize(row, stats);
  return {out.data().begin(), out.data().end()};
}

}  // namespace paed
