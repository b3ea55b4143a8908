#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "paed/datasets.hpp"
#include "paed/error.hpp"

using namespace paed;

namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.seed = 7;
  s.categories = CategorySet::tut_synthetic_2016().prefix(4);
  s.train_recordings = 3;
  s.val_recordings = 1;
  s.test_recordings = 1;
  s.duration = 8.0;
  s.events_per_recording = 6;
  s.max_polyphony = 3;
  s.min_event_duration = 0.5;
  s.max_event_duration = 2.0;
  return s;
}

int sweep_max(const std::vector<Annotation>& anns) {
  std::vector<std::pair<double, double>> iv;
  for (const auto& a : anns) iv.emplace_back(a.onset, a.offset);
  return oracle::max_concurrency(iv);
}

}  // namespace

TEST_CASE("parse_annotations") {
  const auto cats = CategorySet::tut_synthetic_2016();
  SUBCASE("whitespace or tab separated, labels with spaces") {
    std::istringstream in("0.00 1.50 dog barking\n\n# comment\n2.5\t3.0\talarms & sirens\n1.0  2.0   rain\n");
    auto a = parse_annotations(in, cats);
    REQUIRE(a.size() == 3);
    CHECK(a[0] == Annotation{0.0, 1.5, "dog barking"});
    CHECK(a[1] == Annotation{1.0, 2.0, "rain"});
    CHECK(a[2] == Annotation{2.5, 3.0, "alarms & sirens"});
  }
  SUBCASE("reversed times name the line") {
    std::istringstream in("0 1 bus\n2.0 1.0 rain\n");
    CHECK_THROWS_WITH_AS(parse_annotations(in, cats, "x.txt"), doctest::Contains("x.txt:2"), DataError);
  }
  SUBCASE("negative onset and unknown labels") {
    std::istringstream neg("-1 1 bus\n");
    CHECK_THROWS_AS(parse_annotations(neg, cats), DataError);
    std::istringstream unknown("0 1 trumpet\n");
    CHECK_THROWS_WITH_AS(parse_annotations(unknown, cats), doctest::Contains("trumpet"), DataError);
    std::istringstream garbage("zero one bus\n");
    CHECK_THROWS_AS(parse_annotations(garbage, cats), DataError);
  }
  SUBCASE("write then load round trip") {
    const auto path = std::filesystem::temp_directory_path() / "paed_test_annotations.txt";
    std::vector<Annotation> anns{{0.25, 1.125, "glass smash"}, {0.5, 4.0, "alarms & sirens"}, {3.001, 3.002, "thunder"}};
    write_annotations(path, anns);
    CHECK(load_annotations(path, cats) == anns);
    std::filesystem::remove(path);
  }
}

TEST_CASE("rasterize_labels") {
  const auto cats = CategorySet::tut_synthetic_2016().prefix(3);
  SUBCASE("frame-centre rule") {
    auto m = rasterize_labels({{0.0, 0.1, "baby crying"}}, cats, 10);
    for (std::size_t k = 0; k < 10; ++k) {
      CHECK(m.at(k, 1) == (k <= 3 ? 1 : 0));
      CHECK(m.at(k, 0) == 0);
    }
  }
  SUBCASE("empty annotations") {
    auto m = rasterize_labels({}, cats, 5);
    for (auto v : m.data()) CHECK(v == 0);
  }
  SUBCASE("overlapping events of different categories") {
    auto m = rasterize_labels({{0.0, 0.2, "alarms & sirens"}, {0.1, 0.3, "bird singing"}}, cats, 20);
    for (std::size_t k = 0; k < 20; ++k) {
      const int degree = m.at(k, 0) + m.at(k, 1) + m.at(k, 2);
      const std::size_t centre_ms = 20 * k + 20;
      const int expected = (centre_ms < 200 ? 1 : 0) + (centre_ms >= 100 && centre_ms < 300 ? 1 : 0);
      CHECK(degree == expected);
    }
  }
  SUBCASE("monotone in the interval") {
    auto narrow = rasterize_labels({{0.37, 0.81, "bird singing"}}, cats, 60);
    auto wide = rasterize_labels({{0.2, 0.95, "bird singing"}}, cats, 60);
    for (std::size_t i = 0; i < narrow.size(); ++i) CHECK(wide[i] >= narrow[i]);
  }
}

TEST_CASE("labels_to_annotations inverts rasterization") {
  const auto cats = CategorySet::tut_synthetic_2016().prefix(4);
  SUBCASE("frames 0..4 of one category") {
    FrameLabelMatrix m({10, 4});
    for (std::size_t k = 0; k <= 4; ++k) m.at(k, 2) = 1;
    auto anns = labels_to_annotations(m, cats);
    REQUIRE(anns.size() == 1);
    CHECK(anns[0].label == "bird singing");
    CHECK(anns[0].onset == doctest::Approx(0.01));
    CHECK(anns[0].offset == doctest::Approx(0.11));
    CHECK(rasterize_labels(anns, cats, 10) == m);
  }
  SUBCASE("all inactive") {
    CHECK(labels_to_annotations(FrameLabelMatrix({7, 4}), cats).empty());
  }
  SUBCASE("random matrices round trip through text") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
      FrameLabelMatrix m({1 + rng.below(200), 4});
      for (auto& v : m.data()) v = rng.uniform() < 0.3;
      auto anns = labels_to_annotations(m, cats);
      std::istringstream in(format_annotations(anns));
      auto parsed = parse_annotations(in, cats);
      CHECK(rasterize_labels(parsed, cats, m.shape()[0]) == m);
    }
  }
}

TEST_CASE("synthetic corpus generation") {
  const auto spec = small_spec();
  const Corpus a = synth_generate(spec);
  SUBCASE("split sizes") {
    CHECK(a.train.size() == 3);
    CHECK(a.val.size() == 1);
    CHECK(a.test.size() == 1);
    CHECK(a.train[0].name == "train_001");
    CHECK(a.test[0].name == "test_001");
  }
  SUBCASE("deterministic under the seed") {
    const Corpus b = synth_generate(spec);
    for (Split s : {Split::train, Split::val, Split::test}) {
      for (std::size_t i = 0; i < a.split(s).size(); ++i) {
        CHECK(a.split(s)[i].audio.samples == b.split(s)[i].audio.samples);
        CHECK(a.split(s)[i].annotations == b.split(s)[i].annotations);
      }
    }
    auto other = spec;
    other.seed = 8;
    CHECK(synth_generate(other).train[0].annotations != a.train[0].annotations);
  }
  SUBCASE("annotations respect the constraints") {
    for (Split s : {Split::train, Split::val, Split::test}) {
      for (const auto& rec : a.split(s)) {
        CHECK(rec.annotations.size() == spec.events_per_recording);
        CHECK(rec.audio.samples.size() == 8 * 44100);
        CHECK(sweep_max(rec.annotations) <= spec.max_polyphony);
        for (const auto& ann : rec.annotations) {
          CHECK(ann.onset >= 0.0);
          CHECK(ann.offset <= spec.duration);
          CHECK(ann.offset - ann.onset >= spec.min_event_duration - 1e-9);
          CHECK(std::abs(ann.onset * 1000.0 - std::round(ann.onset * 1000.0)) < 1e-6);
        }
        double peak = 0.0;
        for (double v : rec.audio.samples) peak = std::max(peak, std::abs(v));
        CHECK(peak == doctest::Approx(0.9));
      }
    }
  }
  SUBCASE("zero events renders silence") {
    auto silent = spec;
    silent.events_per_recording = 0;
    const auto rec = synth_recording(silent, 0, "x");
    CHECK(rec.annotations.empty());
    for (double v : rec.audio.samples) CHECK(v == 0.0);
  }
  SUBCASE("unsatisfiable polyphony") {
    auto crowded = spec;
    crowded.max_polyphony = 1;
    crowded.events_per_recording = 40;
    CHECK_THROWS_AS(synth_generate(crowded), DataError);
  }
  SUBCASE("invalid spec") {
    auto bad = spec;
    bad.max_polyphony = 7;
    CHECK_THROWS_AS(synth_generate(bad), UsageError);
    bad = spec;
    bad.duration = 1.0;
    CHECK_THROWS_AS(synth_generate(bad), UsageError);
  }
}

TEST_CASE("polyphony limit holds across seeds") {
  auto spec = small_spec();
  spec.duration = 20.0;
  spec.events_per_recording = 20;
  for (int limit = 1; limit <= 6; ++limit) {
    spec.max_polyphony = limit;
    spec.categories = CategorySet::tut_synthetic_2016();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      spec.seed = seed;
      spec.events_per_recording = limit == 1 ? 8 : 20;
      const auto rec = synth_recording(spec, seed, "r");
      CHECK(sweep_max(rec.annotations) <= limit);
    }
  }
}

TEST_CASE("category sounds are separable in log-mel space") {
  const auto cats = CategorySet::tut_synthetic_2016();
  auto spec = small_spec();
  spec.categories = cats;
  for (std::size_t c = 0; c < cats.size(); ++c) {
    const auto s = category_sound(c, cats.size());
    CHECK(static_cast<std::size_t>(s.recipe) == c % 5);
    if (c > 0) CHECK(s.center_hz > category_sound(c - 1, cats.size()).center_hz);
  }
  CHECK(category_sound(0, 16).center_hz == doctest::Approx(200.0));
  CHECK(category_sound(15, 16).center_hz == doctest::Approx(12000.0));
}

TEST_CASE("corpus on disk") {
  const auto dir = std::filesystem::temp_directory_path() / "paed_test_corpus";
  std::filesystem::remove_all(dir);
  const auto spec = small_spec();
  const Corpus c = synth_generate(spec);
  write_corpus(c, spec, dir);
  CHECK(std::filesystem::exists(dir / "corpus.meta"));
  CHECK(std::filesystem::exists(dir / "train" / "train_002.wav"));
  CHECK(std::filesystem::exists(dir / "val" / "val_001.txt"));
  const Corpus back = load_corpus(dir, spec.categories);
  REQUIRE(back.train.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.train[i].name == c.train[i].name);
    CHECK(back.train[i].annotations == c.train[i].annotations);
    REQUIRE(back.train[i].audio.samples.size() == c.train[i].audio.samples.size());
    double err = 0.0;
    for (std::size_t k = 0; k < c.train[i].audio.samples.size(); ++k) {
      err = std::max(err, std::abs(back.train[i].audio.samples[k] - c.train[i].audio.samples[k]));
    }
    CHECK(err <= 0.5 / 32768.0 + 1e-12);
  }
  CHECK_THROWS_AS(load_corpus(dir / "nope", spec.categories), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("prepare_split aligns segments and labels") {
  auto spec = small_spec();
  spec.duration = 3.0;  // 149 frames
  spec.max_event_duration = 1.0;
  spec.events_per_recording = 3;
  const Corpus c = synth_generate(spec);
  const auto specs = compute_spectrograms(c.train);
  const auto stats = compute_stats(specs);
  const auto train = prepare_split(c.train, specs, spec.categories, stats, SegmentMode::train);
  REQUIRE(specs[0].frames() == 149);
  CHECK(train.size() == 3 * (149 - 128 + 1));
  for (std::size_t i : {0u, 5u, 30u, 65u}) {
    const auto& item = train.items[i];
    const auto& rec = train.recordings[item.recording];
    const auto seg = train.segment(i);
    const auto lab = train.labels(i);
    for (std::size_t j = 0; j < 128; ++j) {
      CHECK(seg.at(j, 7) == rec.features.at(item.ref.offset + j, 7));
      for (std::size_t y = 0; y < 4; ++y) CHECK(lab.at(j, y) == rec.labels.at(item.ref.offset + j, y));
    }
  }
  const auto test = prepare_split(c.train, specs, spec.categories, stats, SegmentMode::test);
  CHECK(test.size() == 3 * 2);
  CHECK(test.valid_frames(1) == 149 - 128);
  const auto padded = test.labels(1);
  for (std::size_t j = 21; j < 128; ++j) {
    for (std::size_t y = 0; y < 4; ++y) CHECK(padded.at(j, y) == 0);
  }
  // Too-short recordings are skipped in train mode with a warning.
  auto short_spec = spec;
  short_spec.duration = 2.0;
  const Corpus s = synth_generate(short_spec);
  const auto short_specs = compute_spectrograms(s.train);
  std::vector<std::string> warnings;
  const auto skipped = prepare_split(s.train, short_specs, spec.categories, stats, SegmentMode::train, {}, &warnings);
  CHECK(skipped.size() == 0);
  CHECK(warnings.size() == 3);
}
