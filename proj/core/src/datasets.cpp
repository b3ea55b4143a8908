#include "paed/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "paed/error.hpp"
#include "paed/rng.hpp"

namespace paed {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kMixPeak = 0.9;
constexpr double kFadeSeconds = 0.01;
constexpr int kPlacementAttempts = 1000;

std::int64_t to_us(double seconds) { return std::llround(seconds * 1e6); }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

/// Timing of the frame grid in integer microseconds.
struct FrameGrid {
  std::int64_t hop_us;
  std::int64_t frame_us;
  std::int64_t center(std::size_t k) const { return static_cast<std::int64_t>(k) * hop_us + frame_us / 2; }
};

FrameGrid frame_grid(const FeatureConfig& c) {
  return {std::llround(static_cast<double>(c.hop_length) * 1e6 / c.sample_rate),
          std::llround(static_cast<double>(c.frame_length) * 1e6 / c.sample_rate)};
}

/// Integer-millisecond event placed in a recording.
struct Placement {
  std::size_t category;
  std::int64_t on_ms;
  std::int64_t off_ms;
};

/// Sum of `count` random-phase sinusoids spread uniformly over [lo, hi] Hz.
void add_band(std::vector<double>& x, int sr, double lo, double hi, int count, Rng& rng) {
  for (int j = 0; j < count; ++j) {
    const double f = rng.uniform(lo, hi);
    const double phase = rng.uniform(0.0, kTwoPi);
    // Phasor recurrence instead of one sin() call per sample.
    const double w = kTwoPi * f / sr;
    const double cw = std::cos(w);
    const double sw = std::sin(w);
    double re = std::cos(phase);
    double im = std::sin(phase);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += im;
      const double nre = re * cw - im * sw;
      im = re * sw + im * cw;
      re = nre;
    }
  }
}

std::vector<double> render_event(const CategorySound& sound, std::size_t length, int sr, Rng& rng) {
  std::vector<double> x(length, 0.0);
  const double f = sound.center_hz;
  switch (sound.recipe) {
    case Recipe::tone_complex: {
      const double phase = rng.uniform(0.0, kTwoPi);
      for (std::size_t i = 0; i < length; ++i) {
        const double t = static_cast<double>(i) / sr;
        x[i] = std::sin(kTwoPi * f * t + phase) + 0.3 * std::sin(kTwoPi * 2.0 * f * t + 2.0 * phase);
      }
      break;
    }
    case Recipe::chirp: {
      // Linear sweep from f/1.3 to 1.3f across the event.
      const double f0 = f / 1.3;
      const double f1 = f * 1.3;
      const double dur = static_cast<double>(length) / sr;
      for (std::size_t i = 0; i < length; ++i) {
        const double t = static_cast<double>(i) / sr;
        x[i] = std::sin(kTwoPi * (f0 * t + 0.5 * (f1 - f0) / dur * t * t));
      }
      break;
    }
    case Recipe::band_noise:
      add_band(x, sr, f / 1.2, f * 1.2, 48, rng);
      break;
    case Recipe::am_noise: {
      add_band(x, sr, f / 1.15, f * 1.15, 32, rng);
      const double rate = 6.0;
      for (std::size_t i = 0; i < length; ++i) {
        x[i] *= 0.55 + 0.45 * std::sin(kTwoPi * rate * static_cast<double>(i) / sr);
      }
      break;
    }
    case Recipe::pip_train: {
      // 40 ms Hann-shaped pips every 100 ms.
      const auto period = static_cast<std::size_t>(0.1 * sr);
      const auto pip = static_cast<std::size_t>(0.04 * sr);
      for (std::size_t i = 0; i < length; ++i) {
        const std::size_t k = i % period;
        if (k < pip) {
          const double env = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(k) / static_cast<double>(pip));
          x[i] = env * std::sin(kTwoPi * f * static_cast<double>(i) / sr);
        }
      }
      break;
    }
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) {
    for (double& v : x) v /= peak;
  }
  const auto fade = std::min(length / 2, static_cast<std::size_t>(kFadeSeconds * sr));
  for (std::size_t i = 0; i < fade; ++i) {
    const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / static_cast<double>(fade));
    x[i] *= g;
    x[length - 1 - i] *= g;
  }
  return x;
}

std::vector<Placement> schedule(const CorpusSpec& spec, Rng& rng) {
  const auto total_ms = static_cast<std::int64_t>(std::llround(spec.duration * 1000.0));
  const auto min_ms = static_cast<std::int64_t>(std::llround(spec.min_event_duration * 1000.0));
  const auto max_ms = static_cast<std::int64_t>(std::llround(spec.max_event_duration * 1000.0));
  std::vector<Placement> placed;
  for (std::size_t e = 0; e < spec.events_per_recording; ++e) {
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      Placement p;
      p.category = static_cast<std::size_t>(rng.below(spec.categories.size()));
      const std::int64_t len = min_ms + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_ms - min_ms + 1)));
      p.on_ms = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total_ms - len + 1)));
      p.off_ms = p.on_ms + len;
      // Reject same-category overlap; then check the concurrency peak inside
      // the candidate interval, which can only rise at onsets.
      bool clash = false;
      std::vector<std::int64_t> probes{p.on_ms};
      for (const auto& q : placed) {
        const bool overlaps = q.on_ms < p.off_ms && p.on_ms < q.off_ms;
        if (overlaps && q.category == p.category) clash = true;
        if (q.on_ms > p.on_ms && q.on_ms < p.off_ms) probes.push_back(q.on_ms);
      }
      if (clash) continue;
      int peak = 0;
      for (std::int64_t t : probes) {
        int active = 1;
        for (const auto& q : placed) active += q.on_ms <= t && t < q.off_ms;
        peak = std::max(peak, active);
      }
      if (peak > spec.max_polyphony) continue;
      placed.push_back(p);
      ok = true;
    }
    if (!ok) {
      throw DataError("synth_generate: cannot place " + std::to_string(spec.events_per_recording) +
                      " events in " + std::to_string(spec.duration) + " s with polyphony at most " +
                      std::to_string(spec.max_polyphony) + " and no same-category overlap");
    }
  }
  return placed;
}

std::string meta_text(const CorpusSpec& spec) {
  std::ostringstream o;
  o << "# synthetic corpus parameters\n";
  o << "seed = " << spec.seed << '\n';
  o << "categories = ";
  for (std::size_t c = 0; c < spec.categories.size(); ++c) o << (c ? ", " : "") << spec.categories.name(c);
  o << '\n';
  o << "train_recordings = " << spec.train_recordings << '\n';
  o << "val_recordings = " << spec.val_recordings << '\n';
  o << "test_recordings = " << spec.test_recordings << '\n';
  o << "duration = " << spec.duration << '\n';
  o << "events_per_recording = " << spec.events_per_recording << '\n';
  o << "max_polyphony = " << spec.max_polyphony << '\n';
  o << "min_event_duration = " << spec.min_event_duration << '\n';
  o << "max_event_duration = " << spec.max_event_duration << '\n';
  o << "sample_rate = " << spec.sample_rate << '\n';
  for (std::size_t c = 0; c < spec.categories.size(); ++c) {
    const auto s = category_sound(c, spec.categories.size());
    o << "# recipe " << spec.categories.name(c) << ": " << recipe_name(s.recipe) << " @ " << std::llround(s.center_hz)
      << " Hz\n";
  }
  return o.str();
}

}  // namespace

std::vector<Annotation> parse_annotations(std::istream& in, const CategorySet& categories, const std::string& source) {
  std::vector<Annotation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    std::istringstream ls(t);
    Annotation a;
    if (!(ls >> a.onset >> a.offset)) throw DataError(where + "expected 'onset offset label'");
    std::string rest;
    std::getline(ls, rest);
    a.label = trim(rest);
    if (a.label.empty()) throw DataError(where + "missing event label");
    if (!std::isfinite(a.onset) || !std::isfinite(a.offset) || a.onset < 0.0) {
      throw DataError(where + "onset must be a non-negative number");
    }
    if (!(a.onset < a.offset)) throw DataError(where + "offset must be later than onset");
    if (!categories.contains(a.label)) throw DataError(where + "unknown event category '" + a.label + "'");
    out.push_back(std::move(a));
  }
  std::stable_sort(out.begin(), out.end(), [](const Annotation& a, const Annotation& b) { return a.onset < b.onset; });
  return out;
}

std::vector<Annotation> load_annotations(const std::filesystem::path& path, const CategorySet& categories) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file " + path.string());
  return parse_annotations(in, categories, path.string());
}

std::string format_annotations(const std::vector<Annotation>& annotations) {
  std::string out;
  char buf[64];
  for (const auto& a : annotations) {
    std::snprintf(buf, sizeof buf, "%.3f\t%.3f\t", a.onset, a.offset);
    out += buf;
    out += a.label;
    out += '\n';
  }
  return out;
}

void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& annotations) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write annotation file " + path.string());
  out << format_annotations(annotations);
}

const char* recipe_name(Recipe r) {
  switch (r) {
    case Recipe::tone_complex: return "tone complex";
    case Recipe::chirp: return "chirp";
    case Recipe::band_noise: return "band noise";
    case Recipe::am_noise: return "amplitude-modulated noise";
    case Recipe::pip_train: return "tone-pip train";
  }
  return "?";
}

CategorySound category_sound(std::size_t category, std::size_t num_categories) {
  const double lo = 200.0;
  const double hi = 12000.0;
  const double frac = num_categories > 1 ? static_cast<double>(category) / static_cast<double>(num_categories - 1) : 0.5;
  return {static_cast<Recipe>(category % kNumRecipes), lo * std::pow(hi / lo, frac)};
}

void CorpusSpec::validate() const {
  if (max_polyphony < 1 || max_polyphony > 6) throw UsageError("max_polyphony must be in [1, 6]");
  if (!(min_event_duration > 0.0) || min_event_duration > max_event_duration) {
    throw UsageError("event durations must satisfy 0 < min_event_duration <= max_event_duration");
  }
  if (!(duration > max_event_duration)) throw UsageError("duration must exceed max_event_duration");
  if (sample_rate != 44100) throw UsageError("sample_rate must be 44100");
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::vector<Recording>& Corpus::split(Split s) {
  return s == Split::train ? train : (s == Split::val ? val : test);
}
const std::vector<Recording>& Corpus::split(Split s) const { return const_cast<Corpus*>(this)->split(s); }

Recording synth_recording(const CorpusSpec& spec, std::size_t index, const std::string& name) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, index));
  const auto placements = schedule(spec, rng);
  const int sr = spec.sample_rate;
  const auto n = static_cast<std::size_t>(std::llround(spec.duration * sr));
  Recording rec;
  rec.name = name;
  rec.audio.sample_rate = sr;
  rec.audio.samples.assign(n, 0.0);
  for (const auto& p : placements) {
    const auto start = static_cast<std::size_t>(p.on_ms * sr / 1000);
    const auto stop = std::min(n, static_cast<std::size_t>(p.off_ms * sr / 1000));
    const double amp = rng.uniform(0.3, 1.0);
    const auto ev = render_event(category_sound(p.category, spec.categories.size()), stop - start, sr, rng);
    for (std::size_t i = 0; i < ev.size(); ++i) rec.audio.samples[start + i] += amp * ev[i];
    rec.annotations.push_back({static_cast<double>(p.on_ms) / 1000.0, static_cast<double>(p.off_ms) / 1000.0,
                               spec.categories.name(p.category)});
  }
  double peak = 0.0;
  for (double v : rec.audio.samples) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) {
    for (double& v : rec.audio.samples) v *= kMixPeak / peak;
  }
  std::stable_sort(rec.annotations.begin(), rec.annotations.end(),
                   [](const Annotation& a, const Annotation& b) { return a.onset < b.onset; });
  return rec;
}

Corpus synth_generate(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  std::size_t index = 0;
  for (Split s : {Split::train, Split::val, Split::test}) {
    const std::size_t count =
        s == Split::train ? spec.train_recordings : (s == Split::val ? spec.val_recordings : spec.test_recordings);
    for (std::size_t i = 0; i < count; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%s_%03zu", split_name(s), i + 1);
      corpus.split(s).push_back(synth_recording(spec, index++, name));
    }
  }
  return corpus;
}

void write_corpus(const Corpus& corpus, const CorpusSpec& spec, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (Split s : {Split::train, Split::val, Split::test}) {
    const fs::path sub = dir / split_name(s);
    fs::create_directories(sub);
    for (const auto& rec : corpus.split(s)) {
      write_wav(sub / (rec.name + ".wav"), rec.audio.samples, rec.audio.sample_rate);
      write_annotations(sub / (rec.name + ".txt"), rec.annotations);
    }
  }
  std::ofstream meta(dir / "corpus.meta", std::ios::binary | std::ios::trunc);
  if (!meta) throw DataError("cannot write " + (dir / "corpus.meta").string());
  meta << meta_text(spec);
}

Corpus load_corpus(const std::filesystem::path& dir, const CategorySet& categories) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("corpus directory " + dir.string() + " does not exist");
  Corpus corpus;
  for (Split s : {Split::train, Split::val, Split::test}) {
    const fs::path sub = dir / split_name(s);
    if (!fs::is_directory(sub)) continue;
    std::vector<fs::path> wavs;
    for (const auto& entry : fs::directory_iterator(sub)) {
      if (entry.is_regular_file() && entry.path().extension() == ".wav") wavs.push_back(entry.path());
    }
    std::sort(wavs.begin(), wavs.end());
    for (const auto& w : wavs) {
      Recording rec;
      rec.name = w.stem().string();
      rec.audio = read_wav(w);
      auto txt = w;
      txt.replace_extension(".txt");
      if (!fs::exists(txt)) throw DataError("missing annotation file " + txt.string());
      rec.annotations = load_annotations(txt, categories);
      corpus.split(s).push_back(std::move(rec));
    }
  }
  return corpus;
}

FrameLabelMatrix rasterize_labels(const std::vector<Annotation>& annotations, const CategorySet& categories,
                                  std::size_t frames, const FeatureConfig& config) {
  if (frames == 0) throw ShapeError("rasterize_labels: frame count must be positive");
  const FrameGrid g = frame_grid(config);
  FrameLabelMatrix out({frames, categories.size()});
  for (const auto& a : annotations) {
    const std::size_t c = categories.index_of(a.label);
    const std::int64_t on = to_us(a.onset);
    const std::int64_t off = to_us(a.offset);
    for (std::size_t k = 0; k < frames; ++k) {
      const std::int64_t centre = g.center(k);
      if (centre >= off) break;
      if (centre >= on) out.at(k, c) = 1;
    }
  }
  return out;
}

std::vector<Annotation> labels_to_annotations(const FrameLabelMatrix& labels, const CategorySet& categories,
                                              const FeatureConfig& config) {
  if (labels.rank() != 2 || labels.shape()[1] != categories.size()) {
    throw ShapeError("labels_to_annotations: labels " + shape_to_string(labels.shape()) + " do not have " +
                     std::to_string(categories.size()) + " category columns");
  }
  const FrameGrid g = frame_grid(config);
  const std::size_t frames = labels.shape()[0];
  const std::size_t y = categories.size();
  struct Run {
    std::int64_t on_us, off_us;
    std::size_t category;
  };
  std::vector<Run> runs;
  for (std::size_t c = 0; c < y; ++c) {
    std::size_t t = 0;
    while (t < frames) {
      if (!labels.at(t, c)) {
        ++t;
        continue;
      }
      std::size_t b = t;
      while (b + 1 < frames && labels.at(b + 1, c)) ++b;
      runs.push_back({g.center(t) - g.hop_us / 2, g.center(b) + g.hop_us / 2, c});
      t = b + 1;
    }
  }
  std::sort(runs.begin(), runs.end(), [](const Run& a, const Run& b) {
    return a.on_us != b.on_us ? a.on_us < b.on_us : a.category < b.category;
  });
  std::vector<Annotation> out;
  for (const auto& r : runs) {
    out.push_back({std::max<std::int64_t>(0, r.on_us) / 1e6, r.off_us / 1e6, categories.name(r.category)});
  }
  return out;
}

NdBuffer<double> SplitData::segment(std::size_t i) const {
  const auto& item = items.at(i);
  return extract_segment(recordings.at(item.recording).features, item.ref, pad_row);
}

FrameLabelMatrix SplitData::labels(std::size_t i) const {
  const auto& item = items.at(i);
  const FrameLabelMatrix& all = recordings.at(item.recording).labels;
  const std::size_t y = all.shape()[1];
  FrameLabelMatrix out({kSegmentFrames, y});
  const std::size_t real = kSegmentFrames - item.ref.pad_len;
  std::copy_n(all.ptr() + item.ref.offset * y, real * y, out.ptr());
  return out;
}

std::vector<Spectrogram> compute_spectrograms(const std::vector<Recording>& recordings, const FeatureConfig& config) {
  std::vector<Spectrogram> out;
  out.reserve(recordings.size());
  for (const auto& r : recordings) out.push_back(log_mel(r.audio.samples, r.audio.sample_rate, config));
  return out;
}

SplitData prepare_split(const std::vector<Recording>& recordings, const std::vector<Spectrogram>& spectrograms,
                        const CategorySet& categories, const FeatureStats& stats, SegmentMode mode,
                        const FeatureConfig& config, std::vector<std::string>* warnings) {
  if (recordings.size() != spectrograms.size()) {
    throw ShapeError("prepare_split: recording and spectrogram counts differ");
  }
  SplitData data;
  data.mode = mode;
  data.pad_row = standardized_floor(stats, config);
  for (std::size_t r = 0; r < recordings.size(); ++r) {
    const auto& spec = spectrograms[r];
    if (mode == SegmentMode::train && spec.frames() < kSegmentFrames) {
      if (warnings) {
        warnings->push_back("skipping " + recordings[r].name + ": " + std::to_string(spec.frames()) +
                            " frames is shorter than one training segment");
      }
      continue;
    }
    PreparedRecording p;
    p.name = recordings[r].name;
    p.features = standardize(spec.values, stats);
    p.labels = rasterize_labels(recordings[r].annotations, categories, spec.frames(), config);
    const std::size_t index = data.recordings.size();
    for (const auto& ref : segment_layout(spec.frames(), mode)) data.items.push_back({index, ref});
    data.recordings.push_back(std::move(p));
  }
  return data;
}

}  // namespace paed
