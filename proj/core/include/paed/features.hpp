#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "paed/ndbuffer.hpp"

namespace paed {

/// Short-time analysis settings. Defaults: 40 ms frames with 50% overlap at
/// 44.1 kHz, 64 mel bands between 50 Hz and 22050 Hz.
struct FeatureConfig {
  int sample_rate = 44100;
  std::size_t frame_length = 1764;
  std::size_t hop_length = 882;
  /// Frames are Hann-windowed and zero-padded to this length.
  std::size_t fft_size = 2048;
  std::size_t num_mels = 64;
  double fmin = 50.0;
  double fmax = 22050.0;
  /// Mel energies are floored here before the logarithm.
  double log_floor = 1e-10;

  double hop_seconds() const { return static_cast<double>(hop_length) / sample_rate; }
  double frame_seconds() const { return static_cast<double>(frame_length) / sample_rate; }
  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

/// Frames per training/test segment.
inline constexpr std::size_t kSegmentFrames = 128;

/// Log-mel energies [frames, bins] plus frame timing.
struct Spectrogram {
  NdBuffer<double> values;
  double hop_seconds = 0.0;
  double frame_seconds = 0.0;
  int sample_rate = 0;

  std::size_t frames() const { return values.shape().at(0); }
  std::size_t bins() const { return values.shape().at(1); }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Peak frequencies of the triangular filters, one per mel band, in Hz.
std::vector<double> mel_center_frequencies(const FeatureConfig& config = {});

/// [num_mels, fft_size / 2 + 1] unit-peak triangular filters on the FFT bin grid.
NdBuffer<double> mel_filterbank(const FeatureConfig& config = {});

/// floor((n - frame_length) / hop_length) + 1; zero when n < frame_length.
std::size_t frame_count(std::size_t num_samples, const FeatureConfig& config = {});

/// Hann window -> |FFT| -> mel filterbank -> log(max(., floor)). Throws
/// DataError for a mismatched sample rate or fewer samples than one frame.
Spectrogram log_mel(std::span<const double> samples, int sample_rate, const FeatureConfig& config = {});

enum class SegmentMode { train, test };

/// Placement of one segment inside a spectrogram.
struct SegmentRef {
  std::size_t offset = 0;
  /// Trailing frames beyond the end of the spectrogram (test mode only).
  std::size_t pad_len = 0;
  friend bool operator==(const SegmentRef&, const SegmentRef&) = default;
};

struct Segment {
  NdBuffer<double> values;  // [kSegmentFrames, bins]
  std::size_t offset = 0;
  std::size_t pad_len = 0;
};

/// Train: every start 0..T-128 (throws DataError when T < 128). Test:
/// consecutive non-overlapping windows, the last one padded.
std::vector<SegmentRef> segment_layout(std::size_t total_frames, SegmentMode mode,
                                       std::size_t segment_frames = kSegmentFrames);

/// Copies one window of `values` [T, F]; rows past the end are filled with `pad_row`.
NdBuffer<double> extract_segment(const NdBuffer<double>& values, const SegmentRef& ref,
                                 std::span<const double> pad_row, std::size_t segment_frames = kSegmentFrames);

/// Materialized segments, padded with the log floor of `config`.
std::vector<Segment> segment_stream(const Spectrogram& spec, SegmentMode mode, const FeatureConfig& config = {});

/// Per-bin mean and standard deviation of the training spectrograms.
struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> std;

  bool empty() const { return mean.empty(); }
};

/// Standard deviations below this value are replaced by it when dividing.
inline constexpr double kStdFloor = 1e-8;

/// Moments pooled over every frame of every spectrogram.
FeatureStats compute_stats(std::span<const Spectrogram> spectrograms);

/// (v - mean) / max(std, 1e-8) per bin; missing or mismatched stats throw.
NdBuffer<double> standardize(const NdBuffer<double>& values, const FeatureStats& stats);
Spectrogram standardize(const Spectrogram& spec, const FeatureStats& stats);

/// The standardized image of a log-floor (silent) frame, used for padding.
std::vector<double> standardized_floor(const FeatureStats& stats, const FeatureConfig& config = {});

}  // namespace paed
