#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace paed {

/// Mono waveform with samples in [-1, 1].
struct Waveform {
  int sample_rate = 0;
  std::vector<double> samples;
};

/// Reads a RIFF/WAVE file holding 16-bit PCM mono audio. Any other encoding,
/// channel count or a malformed header throws DataError.
Waveform read_wav(const std::filesystem::path& path);

/// Writes 16-bit PCM mono. Samples are scaled by 32768, rounded and clamped to
/// the int16 range, so values read back by read_wav are reproduced exactly.
void write_wav(const std::filesystem::path& path, std::span<const double> samples, int sample_rate);

}  // namespace paed
