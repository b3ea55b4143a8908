#include <doctest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "paed/error.hpp"
#include "paed/gradcheck.hpp"
#include "paed/training.hpp"

using namespace paed;
using Buf = NdBuffer<double>;

namespace {

/// Row-stochastic [rows, k] matrix with entries bounded away from zero.
Buf random_distribution(Rng& rng, std::size_t rows, std::size_t k) {
  Buf p({rows, k});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += p.at(r, j) = rng.uniform(0.05, 1.0);
    for (std::size_t j = 0; j < k; ++j) p.at(r, j) /= s;
  }
  return p;
}

/// Straight Adam, one scalar at a time.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double x, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    return x - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

/// A tiny two-category corpus and the splits derived from it.
struct TinySetup {
  CategorySet categories = CategorySet::tut_synthetic_2016().prefix(2);
  SplitData train, val, train_eval;

  TinySetup() {
    CorpusSpec spec;
    spec.seed = 5;
    spec.categories = categories;
    spec.train_recordings = 2;
    spec.val_recordings = 1;
    spec.test_recordings = 1;
    spec.duration = 4.0;
    spec.max_event_duration = 1.5;
    spec.events_per_recording = 3;
    spec.max_polyphony = 2;
    const Corpus corpus = synth_generate(spec);
    const auto tr = compute_spectrograms(corpus.train);
    const auto va = compute_spectrograms(corpus.val);
    const FeatureStats stats = compute_stats(tr);
    train = prepare_split(corpus.train, tr, categories, stats, SegmentMode::train);
    train_eval = prepare_split(corpus.train, tr, categories, stats, SegmentMode::test);
    val = prepare_split(corpus.val, va, categories, stats, SegmentMode::test);
  }
};

const TinySetup& tiny_setup() {
  static const TinySetup setup;
  return setup;
}

ModelConfig tiny_model(ModelKind kind = ModelKind::multitask) {
  ModelConfig c;
  c.kind = kind;
  c.filters = {2, 2, 4};
  c.gru_hidden = 4;
  c.fc_units = 4;
  c.dropout = 0.25;
  return c;
}

TrainConfig tiny_train(std::size_t epochs, std::size_t steps) {
  TrainConfig t;
  t.learning_rate = 3e-3;
  t.batch_size = 4;
  t.epochs = epochs;
  t.steps_per_epoch = steps;
  t.seed = 9;
  return t;
}

}  // namespace

TEST_CASE("multi-task loss values") {
  Tape<double> tape;
  SUBCASE("one-hot predictions at the targets give zero") {
    Buf p({2, 4}, {0, 0, 1, 0, 1, 0, 0, 0});
    auto loss = multitask_loss<double>({tape.constant(p)}, ClassIndexMatrix({2, 1}, {2, 0}));
    CHECK(loss.value()[0] == 0.0);
  }
  SUBCASE("uniform predictions over four classes give ln 4") {
    auto loss = multitask_loss<double>({tape.constant(Buf({3, 4}, 0.25)), tape.constant(Buf({3, 4}, 0.25))},
                                       ClassIndexMatrix({3, 2}, {0, 1, 2, 3, 3, 0}));
    CHECK(loss.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  }
  SUBCASE("random case against a double loop") {
    Rng rng(3);
    const std::size_t rows = 7;
    const std::vector<std::size_t> ks{4, 2, 8};
    std::vector<Var<double>> outs;
    std::vector<Buf> probs;
    ClassIndexMatrix targets({rows, ks.size()});
    for (std::size_t n = 0; n < ks.size(); ++n) {
      probs.push_back(random_distribution(rng, rows, ks[n]));
      outs.push_back(tape.constant(probs.back()));
      for (std::size_t r = 0; r < rows; ++r) targets.at(r, n) = static_cast<std::int64_t>(rng.below(ks[n]));
    }
    double expect = 0.0;
    for (std::size_t n = 0; n < ks.size(); ++n) {
      double task = 0.0;
      for (std::size_t r = 0; r < rows; ++r) task -= std::log(probs[n].at(r, targets.at(r, n)));
      expect += task / rows;
    }
    expect /= ks.size();
    CHECK(std::abs(multitask_loss(outs, targets).value()[0] - expect) < 1e-12);
  }
  SUBCASE("leading batch axes are flattened into rows") {
    Rng rng(4);
    Buf p = random_distribution(rng, 6, 4);
    ClassIndexMatrix t({6, 1}, {0, 1, 2, 3, 0, 1});
    const double flat = multitask_loss<double>({tape.constant(p)}, t).value()[0];
    const double batched = multitask_loss<double>({tape.constant(p.reshaped({2, 3, 4}))}, t).value()[0];
    CHECK(flat == batched);
  }
  SUBCASE("invalid targets") {
    CHECK_THROWS_AS(multitask_loss<double>({tape.constant(Buf({1, 4}, 0.25))}, ClassIndexMatrix({1, 1}, {4})),
                    DataError);
    CHECK_THROWS_AS(multitask_loss<double>({tape.constant(Buf({1, 4}, 0.25))}, ClassIndexMatrix({1, 1}, {-1})),
                    DataError);
    CHECK_THROWS_AS(multitask_loss<double>({tape.constant(Buf({2, 4}, 0.25))}, ClassIndexMatrix({1, 1}, {0})),
                    ShapeError);
    CHECK_THROWS_AS(multitask_loss<double>({tape.constant(Buf({1, 4}, 0.25))}, ClassIndexMatrix({1, 2}, {0, 0})),
                    ShapeError);
  }
}

TEST_CASE("multi-label loss values") {
  Tape<double> tape;
  SUBCASE("one half everywhere gives ln 2") {
    auto loss = multilabel_loss(tape.constant(Buf({3, 2}, 0.5)), FrameLabelMatrix({3, 2}, {0, 1, 1, 1, 0, 0}));
    CHECK(loss.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }
  SUBCASE("exact predictions give zero") {
    auto loss = multilabel_loss(tape.constant(Buf({1, 3}, {1, 0, 1})), FrameLabelMatrix({1, 3}, {1, 0, 1}));
    CHECK(loss.value()[0] == 0.0);
  }
  SUBCASE("clamping keeps confident mistakes finite") {
    auto loss = multilabel_loss(tape.constant(Buf({1, 2}, {0.0, 1.0})), FrameLabelMatrix({1, 2}, {1, 0}));
    CHECK(std::isfinite(loss.value()[0]));
    CHECK(loss.value()[0] == doctest::Approx(-std::log(1e-12)).epsilon(1e-9));
  }
  SUBCASE("random case against a double loop") {
    Rng rng(5);
    Buf p = oracle::random_buffer(rng, {2, 5, 3}, 0.01, 0.99);
    FrameLabelMatrix y({10, 3});
    for (auto& v : y.data()) v = static_cast<std::uint8_t>(rng.below(2));
    double expect = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) expect -= y[i] ? std::log(p[i]) : std::log(1.0 - p[i]);
    expect /= static_cast<double>(p.size());
    CHECK(std::abs(multilabel_loss(tape.constant(p), y).value()[0] - expect) < 1e-12);
  }
  SUBCASE("non-binary targets") {
    CHECK_THROWS_AS(multilabel_loss(tape.constant(Buf({1, 2}, 0.5)), FrameLabelMatrix({1, 2}, {0, 2})), DataError);
    CHECK_THROWS_AS(multilabel_loss(tape.constant(Buf({1, 2}, 0.5)), FrameLabelMatrix({2, 2})), ShapeError);
  }
}

TEST_CASE("two-class tasks reduce to binary cross-entropy") {
  // With one category per task, class 1 means "active" and the two-class
  // distribution (1 - p, p) carries the same information as the sigmoid p.
  Rng rng(6);
  const std::size_t rows = 9, cats = 4;
  Buf p = oracle::random_buffer(rng, {rows, cats}, 0.02, 0.98);
  FrameLabelMatrix y({rows, cats});
  for (auto& v : y.data()) v = static_cast<std::uint8_t>(rng.below(2));
  std::vector<TaskGroup> groups;
  for (std::size_t c = 0; c < cats; ++c) groups.push_back({c});
  const TaskDecomposition d(groups, cats);
  Tape<double> tape;
  std::vector<Var<double>> outs;
  for (std::size_t c = 0; c < cats; ++c) {
    Buf two({rows, 2});
    for (std::size_t r = 0; r < rows; ++r) {
      two.at(r, 0) = 1.0 - p.at(r, c);
      two.at(r, 1) = p.at(r, c);
    }
    outs.push_back(tape.constant(two));
  }
  const double ce = multitask_loss(outs, encode_targets(y, d)).value()[0];
  const double bce = multilabel_loss(tape.constant(p), y).value()[0];
  CHECK(std::abs(ce - bce) < 1e-10);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(7);
  ParamStore<double> params;
  params.add("p1", random_distribution(rng, 5, 4));
  params.add("p2", random_distribution(rng, 5, 2));
  params.add("q", oracle::random_buffer(rng, {5, 3}, 0.05, 0.95));
  const ClassIndexMatrix targets({5, 2}, {0, 1, 3, 0, 2, 1, 1, 1, 0, 0});
  FrameLabelMatrix y({5, 3});
  for (auto& v : y.data()) v = static_cast<std::uint8_t>(rng.below(2));
  auto loss = [&](Tape<double>& tape, ParamStore<double>& ps) {
    auto a = multitask_loss<double>({tape.parameter(ps.get("p1")), tape.parameter(ps.get("p2"))}, targets);
    auto b = multilabel_loss(tape.parameter(ps.get("q")), y);
    return ops::add(a, b);
  };
  CHECK(finite_diff_check<double>(loss, params, 1e-6).max_rel_error < 1e-6);
}

TEST_CASE("adam update rule") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParamStore<double> ps;
    ps.add("w", Buf({3}, {1.0, -2.0, 0.5}));
    AdamState<double> st;
    for (int i = 0; i < 3; ++i) adam_step(ps, st, 0.1);
    CHECK(ps.get("w").value == Buf({3}, {1.0, -2.0, 0.5}));
    CHECK(st.step == 3);
  }
  SUBCASE("the first step moves by the learning rate against the gradient sign") {
    ParamStore<double> ps;
    ps.add("w", Buf({3}, {0.0, 0.0, 0.0}));
    ps.get("w").grad = Buf({3}, {5.0, -0.3, 1e3});
    AdamState<double> st;
    adam_step(ps, st, 0.01);
    CHECK(ps.get("w").value[0] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(ps.get("w").value[1] == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(ps.get("w").value[2] == doctest::Approx(-0.01).epsilon(1e-6));
  }
  SUBCASE("ten steps on a quadratic agree with a scalar reference") {
    // loss = sum_i a_i (w_i - c_i)^2
    const std::vector<double> a{0.5, 2.0, 7.0, 0.01}, c{1.0, -1.0, 0.25, 3.0};
    ParamStore<double> ps;
    ps.add("w", Buf({4}, {0.0, 0.0, 0.0, 0.0}));
    ps.add("frozen", Buf({1}, 4.0), false);
    AdamState<double> st;
    std::vector<ScalarAdam> ref(4);
    std::vector<double> w(4, 0.0);
    for (int s = 0; s < 10; ++s) {
      for (std::size_t i = 0; i < 4; ++i) {
        ps.get("w").grad[i] = 2.0 * a[i] * (ps.get("w").value[i] - c[i]);
        w[i] = ref[i].step(w[i], 2.0 * a[i] * (w[i] - c[i]), 0.05);
      }
      adam_step(ps, st, 0.05);
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(ps.get("w").value[i] - w[i]) < 1e-10);
    CHECK(ps.get("frozen").value[0] == 4.0);
  }
  SUBCASE("a store that changed layout is rejected") {
    ParamStore<double> ps;
    ps.add("w", Buf({2}));
    AdamState<double> st;
    adam_step(ps, st, 0.1);
    ps.add("x", Buf({2}));
    CHECK_THROWS_AS(adam_step(ps, st, 0.1), ShapeError);
  }
}

TEST_CASE("training configuration validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = TrainConfig{};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = TrainConfig{};
  c.learning_rate = -1.0;
  CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("training runs are reproducible") {
  const auto& s = tiny_setup();
  const auto decomp = TaskDecomposition::equal_split(2, 1);
  auto run = [&](std::uint64_t seed, std::string& log_text) {
    Model<float> m(tiny_model(), s.categories, decomp, 3);
    TrainConfig tc = tiny_train(2, 5);
    tc.seed = seed;
    std::ostringstream log;
    train_run(m, s.train, s.val, tc, &log);
    log_text = log.str();
    return m.params();
  };
  std::string la, lb, lc;
  const auto a = run(1, la), b = run(1, lb), c = run(2, lc);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entries()[i].param.value == b.entries()[i].param.value);
    differs = differs || a.entries()[i].param.value != c.entries()[i].param.value;
  }
  CHECK(differs);
  CHECK(la == lb);
  CHECK(la.rfind("epoch,step,train_loss,val_microF1\n1,5,", 0) == 0);
  std::istringstream lines(la);
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) ++count;
  CHECK(count == 3);
}

TEST_CASE("training lowers the loss and keeps the best epoch") {
  const auto& s = tiny_setup();
  for (ModelKind kind : {ModelKind::multitask, ModelKind::baseline}) {
    CAPTURE(static_cast<int>(kind));
    ModelConfig mc = tiny_model(kind);
    mc.dropout = 0.0;
    Model<float> m(mc, s.categories, TaskDecomposition::equal_split(2, 2), 4);
    const TrainResult r = train_run(m, s.train, s.val, tiny_train(4, 50), nullptr);
    REQUIRE(r.epochs.size() == 4);
    CHECK(r.epochs.back().step == 200);
    CHECK(r.epochs.back().train_loss < r.initial_loss);
    double best = -1.0;
    std::size_t best_epoch = 0;
    for (const auto& e : r.epochs) {
      if (e.val_micro_f1 > best) {
        best = e.val_micro_f1;
        best_epoch = e.epoch;
      }
    }
    CHECK(r.best_epoch == best_epoch);
    CHECK(r.best_val_micro_f1 == best);
    // The returned model holds the best epoch's parameters.
    CHECK(evaluate_model(m, s.val, 0.5).micro_f1() == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("a zero learning rate leaves trainable parameters unchanged") {
  const auto& s = tiny_setup();
  Model<float> m(tiny_model(), s.categories, TaskDecomposition::equal_split(2, 2), 8);
  const ParamStore<float> before = m.params();
  TrainConfig tc = tiny_train(2, 3);
  tc.learning_rate = 0.0;
  train_run(m, s.train, s.val, tc, nullptr);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& e = m.params().entries()[i];
    if (e.param.trainable) CHECK(e.param.value == before.entries()[i].param.value);
  }
}

TEST_CASE("empty splits are rejected") {
  const auto& s = tiny_setup();
  Model<float> m(tiny_model(), s.categories, TaskDecomposition::equal_split(2, 2), 8);
  SplitData empty;
  CHECK_THROWS_AS(train_run(m, empty, s.val, tiny_train(1, 1), nullptr), DataError);
  CHECK_THROWS_AS(train_run(m, s.train, empty, tiny_train(1, 1), nullptr), DataError);
}

TEST_CASE("evaluation counts only real frames") {
  const auto& s = tiny_setup();
  Model<float> m(tiny_model(), s.categories, TaskDecomposition::equal_split(2, 1), 8);
  train_run(m, s.train, s.val, tiny_train(1, 20), nullptr);
  const auto preds = predict_split(m, s.train_eval, 0.5, 3);
  REQUIRE(preds.size() == s.train_eval.size());

  // Concatenate the valid rows of every segment and score them in one go.
  std::size_t total = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) total += s.train_eval.valid_frames(i);
  FrameLabelMatrix all_pred({total, 2}), all_truth({total, 2});
  std::size_t row = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const FrameLabelMatrix truth = s.train_eval.labels(i);
    for (std::size_t t = 0; t < s.train_eval.valid_frames(i); ++t, ++row) {
      for (std::size_t c = 0; c < 2; ++c) {
        all_pred.at(row, c) = preds[i].at(t, c);
        all_truth.at(row, c) = truth.at(t, c);
      }
    }
  }
  const EvalReport direct = frame_prf(all_pred, all_truth, s.categories.names());
  const EvalReport report = evaluate_model(m, s.train_eval, 0.5, 5);
  CHECK(report.frames == total);
  CHECK(report.pooled == direct.pooled);
  for (std::size_t c = 0; c < 2; ++c) CHECK(report.per_class[c].counts == direct.per_class[c].counts);

  // Whole-recording prediction stitches the same segment decisions together.
  const auto& rec = s.train_eval.recordings[0];
  const FrameLabelMatrix frames = predict_frames(m, rec.features, s.train_eval.pad_row, 0.5);
  CHECK(frames.shape() == rec.labels.shape());
  std::size_t t0 = 0;
  for (std::size_t i = 0; i < s.train_eval.size() && s.train_eval.items[i].recording == 0; ++i) {
    for (std::size_t t = 0; t < s.train_eval.valid_frames(i); ++t)
      for (std::size_t c = 0; c < 2; ++c) CHECK(frames.at(t0 + t, c) == preds[i].at(t, c));
    t0 += s.train_eval.valid_frames(i);
  }
  CHECK(t0 == rec.labels.shape()[0]);
}
