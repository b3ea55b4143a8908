#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "paed/features.hpp"
#include "paed/labelspace.hpp"
#include "paed/wav.hpp"

namespace paed {

/// One labelled event; times in seconds, half-open [onset, offset).
struct Annotation {
  double onset = 0.0;
  double offset = 0.0;
  std::string label;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Parses "onset offset label" lines (whitespace or tab separated; the label
/// is the remainder of the line and may contain spaces). Blank lines and lines
/// starting with '#' are skipped. Errors name `source` and the line number.
/// The result is sorted by onset (stable for equal onsets).
std::vector<Annotation> parse_annotations(std::istream& in, const CategorySet& categories,
                                          const std::string& source = "<annotations>");
std::vector<Annotation> load_annotations(const std::filesystem::path& path, const CategorySet& categories);

/// One "onset\toffset\tlabel" line per annotation, times with 3 decimals.
std::string format_annotations(const std::vector<Annotation>& annotations);
void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& annotations);

/// Synthesis recipes assigned to categories in rotation.
enum class Recipe { tone_complex, chirp, band_noise, am_noise, pip_train };
inline constexpr std::size_t kNumRecipes = 5;
const char* recipe_name(Recipe r);

/// Recipe and characteristic frequency of a category.
struct CategorySound {
  Recipe recipe;
  double center_hz;
};
/// Category c of Y uses recipe c mod 5 and a band centred on a log-spaced
/// frequency between 200 Hz and 12 kHz, so categories differ in both texture
/// and spectral position.
CategorySound category_sound(std::size_t category, std::size_t num_categories);

/// Parameters of a synthetic corpus.
struct CorpusSpec {
  std::uint64_t seed = 42;
  CategorySet categories = CategorySet::tut_synthetic_2016();
  std::size_t train_recordings = 60;
  std::size_t val_recordings = 20;
  std::size_t test_recordings = 20;
  double duration = 30.0;
  std::size_t events_per_recording = 12;
  int max_polyphony = 6;
  double min_event_duration = 0.5;
  double max_event_duration = 4.0;
  int sample_rate = 44100;

  /// Throws UsageError on out-of-range values.
  void validate() const;
};

enum class Split { train, val, test };
const char* split_name(Split s);

struct Recording {
  std::string name;
  Waveform audio;
  std::vector<Annotation> annotations;
};

struct Corpus {
  std::vector<Recording> train;
  std::vector<Recording> val;
  std::vector<Recording> test;

  std::vector<Recording>& split(Split s);
  const std::vector<Recording>& split(Split s) const;
};

/// Renders every recording of the three splits. Deterministic in the seed;
/// throws DataError if events cannot be placed within the polyphony limit.
Corpus synth_generate(const CorpusSpec& spec);

/// Renders one recording (exposed for tests). `index` selects the seed stream.
Recording synth_recording(const CorpusSpec& spec, std::size_t index, const std::string& name);

/// Writes `<split>/<name>.wav`, `<split>/<name>.txt` and `corpus.meta`.
void write_corpus(const Corpus& corpus, const CorpusSpec& spec, const std::filesystem::path& dir);

/// Reads the WAV + annotation layout; recordings are ordered by file name.
/// Missing split directories yield empty splits.
Corpus load_corpus(const std::filesystem::path& dir, const CategorySet& categories);

/// Frame k is active for a category iff its centre k*hop + frame_len/2 lies in
/// [onset, offset). Times are compared in integer microseconds.
FrameLabelMatrix rasterize_labels(const std::vector<Annotation>& annotations, const CategorySet& categories,
                                  std::size_t frames, const FeatureConfig& config = {});

/// Inverse of rasterize_labels: each run of active frames a..b becomes
/// [centre(a) - hop/2, centre(b) + hop/2), ordered by onset then category.
std::vector<Annotation> labels_to_annotations(const FrameLabelMatrix& labels, const CategorySet& categories,
                                              const FeatureConfig& config = {});

/// A recording converted to standardized features and aligned frame labels.
struct PreparedRecording {
  std::string name;
  NdBuffer<double> features;  // [T, bins], standardized
  FrameLabelMatrix labels;    // [T, Y]
};

/// One segment of a prepared split.
struct SegmentItem {
  std::size_t recording = 0;
  SegmentRef ref;
};

/// Segments of one split, referenced by index rather than copied.
struct SplitData {
  SegmentMode mode = SegmentMode::test;
  std::vector<PreparedRecording> recordings;
  std::vector<SegmentItem> items;
  /// Feature row used for frames past the end of a recording.
  std::vector<double> pad_row;

  std::size_t size() const { return items.size(); }
  /// [kSegmentFrames, bins] features of item i.
  NdBuffer<double> segment(std::size_t i) const;
  /// [kSegmentFrames, Y] labels of item i; padded rows are zero.
  FrameLabelMatrix labels(std::size_t i) const;
  /// Number of real (non-padded) frames in item i.
  std::size_t valid_frames(std::size_t i) const { return kSegmentFrames - items.at(i).ref.pad_len; }
};

/// Log-mel spectrograms of a list of recordings.
std::vector<Spectrogram> compute_spectrograms(const std::vector<Recording>& recordings,
                                              const FeatureConfig& config = {});

/// Standardizes, rasterizes and lays out segments. In train mode recordings
/// shorter than one segment are skipped and reported in `warnings`.
SplitData prepare_split(const std::vector<Recording>& recordings, const std::vector<Spectrogram>& spectrograms,
                        const CategorySet& categories, const FeatureStats& stats, SegmentMode mode,
                        const FeatureConfig& config = {}, std::vector<std::string>* warnings = nullptr);

}  // namespace paed
