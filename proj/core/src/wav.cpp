#include "paed/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "paed/error.hpp"

namespace paed {
namespace {

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
void put32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open WAV file " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DataError(where + "not a RIFF/WAVE file");
  }
  Waveform w;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t len = le32(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw DataError(where + "truncated chunk");
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16) throw DataError(where + "fmt chunk too short");
      const unsigned char* f = bytes.data() + body;
      const std::uint16_t format = le16(f);
      const std::uint16_t channels = le16(f + 2);
      const std::uint16_t bits = le16(f + 14);
      if (format != 1) throw DataError(where + "only PCM encoding is supported (format tag " + std::to_string(format) + ")");
      if (channels != 1) throw DataError(where + "only mono audio is supported (" + std::to_string(channels) + " channels)");
      if (bits != 16) throw DataError(where + "only 16-bit samples are supported (" + std::to_string(bits) + " bits)");
      w.sample_rate = static_cast<int>(le32(f + 4));
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) throw DataError(where + "data chunk precedes fmt chunk");
      const std::size_t n = len / 2;
      w.samples.resize(n);
      const unsigned char* d = bytes.data() + body;
      for (std::size_t i = 0; i < n; ++i) {
        w.samples[i] = static_cast<double>(static_cast<std::int16_t>(le16(d + 2 * i))) / 32768.0;
      }
      return w;
    }
    pos = body + len + (len & 1);
  }
  throw DataError(where + "no data chunk");
}

void write_wav(const std::filesystem::path& path, std::span<const double> samples, int sample_rate) {
  if (sample_rate <= 0) throw UsageError("write_wav: sample rate must be positive");
  std::string out;
  const auto data_len = static_cast<std::uint32_t>(samples.size() * 2);
  out.reserve(44 + data_len);
  out.append("RIFF");
  put32(out, 36 + data_len);
  out.append("WAVEfmt ");
  put32(out, 16);
  put16(out, 1);
  put16(out, 1);
  put32(out, static_cast<std::uint32_t>(sample_rate));
  put32(out, static_cast<std::uint32_t>(sample_rate) * 2);
  put16(out, 2);
  put16(out, 16);
  out.append("data");
  put32(out, data_len);
  for (double s : samples) {
    const long code = std::clamp(std::lround(std::clamp(s, -1.0, 1.0) * 32768.0), -32768L, 32767L);
    put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(code)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write WAV file " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("failed writing WAV file " + path.string());
}

}  // namespace paed
