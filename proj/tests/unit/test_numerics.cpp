#include <doctest.h>

#include <cmath>
#include <cstdint>

#include "oracles.hpp"
#include "paed/gradcheck.hpp"
#include "paed/ops.hpp"

using namespace paed;
using Buf = NdBuffer<double>;

namespace {

Var<double> constant(Tape<double>& tape, Buf b) { return tape.constant(std::move(b)); }

/// Checks the tape gradient of `build` with respect to each named parameter.
double op_gradcheck(ParamStore<double>& params, const std::function<Var<double>(Tape<double>&, ParamStore<double>&)>& f,
                    double eps = 1e-5) {
  return finite_diff_check<double>(f, params, eps).max_rel_error;
}

/// Weighted sum with fixed random weights makes every output element matter.
Var<double> weighted_sum(Var<double> y, std::uint64_t seed) {
  Rng rng(seed);
  Buf w = oracle::random_buffer(rng, y.value().shape());
  return ops::sum(ops::mul(y, y.tape().constant(std::move(w))));
}

}  // namespace

TEST_CASE("row-major layout with (time, frequency, channel) order") {
  Buf b({2, 3, 4});
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<double>(i);
  CHECK(b.at(0, 0, 1) == 1.0);
  CHECK(b.at(0, 1, 0) == 4.0);
  CHECK(b.at(1, 0, 0) == 12.0);
  CHECK_THROWS_AS(Buf({2, 0}), ShapeError);
  CHECK_THROWS_AS(Buf({2, 2}, std::vector<double>(3)), ShapeError);
}

TEST_CASE("buffers are allocated on a fixed alignment") {
  // Vectorized kernels peel leading elements according to the address, so a
  // fixed alignment is what makes repeated evaluations bit-identical.
  for (std::size_t n : {1, 3, 17, 1000}) {
    const NdBuffer<float> f({n});
    const Buf d({n, 2});
    CHECK(reinterpret_cast<std::uintptr_t>(f.ptr()) % kBufferAlignment == 0);
    CHECK(reinterpret_cast<std::uintptr_t>(d.ptr()) % kBufferAlignment == 0);
    CHECK(reinterpret_cast<std::uintptr_t>(d.cast<float>().ptr()) % kBufferAlignment == 0);
  }
}

TEST_CASE("conv2d examples") {
  Tape<double> tape;
  SUBCASE("scalar product") {
    auto y = ops::conv2d(constant(tape, Buf({1, 1, 1}, {2.0})), constant(tape, Buf({1, 1, 1, 1}, {3.0})),
                         constant(tape, Buf({1}, {0.0})));
    CHECK(y.value()[0] == 6.0);
  }
  SUBCASE("delta kernel is the identity") {
    Rng rng(1);
    Buf x = oracle::random_buffer(rng, {3, 3, 1});
    Buf k({3, 3, 1, 1});
    k.at(1, 1, 0, 0) = 1.0;
    auto y = ops::conv2d(constant(tape, x), constant(tape, k), constant(tape, Buf({1})));
    CHECK(y.value() == x);
  }
  SUBCASE("matches nested-loop convolution") {
    Rng rng(2);
    Buf x = oracle::random_buffer(rng, {4, 4, 2});
    Buf k = oracle::random_buffer(rng, {3, 3, 2, 3});
    Buf b = oracle::random_buffer(rng, {3});
    auto y = ops::conv2d(constant(tape, x), constant(tape, k), constant(tape, b));
    CHECK(oracle::max_abs_diff(y.value(), oracle::conv2d(x, k, b)) < 1e-12);
  }
  SUBCASE("shape errors name the dimension") {
    auto x = constant(tape, Buf({4, 4, 2}));
    CHECK_THROWS_WITH_AS(ops::conv2d(x, constant(tape, Buf({3, 3, 3, 1})), constant(tape, Buf({1}))),
                         doctest::Contains("input channel"), ShapeError);
    CHECK_THROWS_AS(ops::conv2d(x, constant(tape, Buf({2, 3, 2, 1})), constant(tape, Buf({1}))), ShapeError);
    CHECK_THROWS_AS(ops::conv2d(x, constant(tape, Buf({3, 3, 2, 1})), constant(tape, Buf({2}))), ShapeError);
  }
}

TEST_CASE("conv2d with a batch axis equals per-sample convolution") {
  Rng rng(3);
  Buf x = oracle::random_buffer(rng, {3, 5, 6, 2});
  Buf k = oracle::random_buffer(rng, {3, 3, 2, 4});
  Buf b = oracle::random_buffer(rng, {4});
  Tape<double> tape;
  auto y = ops::conv2d(tape.constant(x), tape.constant(k), tape.constant(b));
  for (std::size_t n = 0; n < 3; ++n) {
    Buf xn({5, 6, 2}, std::vector<double>(x.ptr() + n * 60, x.ptr() + (n + 1) * 60));
    Buf want = oracle::conv2d(xn, k, b);
    Buf got({5, 6, 4}, std::vector<double>(y.value().ptr() + n * 120, y.value().ptr() + (n + 1) * 120));
    CHECK(oracle::max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("pool_freq_max") {
  Tape<double> tape;
  SUBCASE("adjacent pairs") {
    auto y = ops::pool_freq_max(tape.constant(Buf({1, 4, 1}, {1, 2, 3, 4})));
    CHECK(y.value() == Buf({1, 2, 1}, {2, 4}));
  }
  SUBCASE("halves the frequency extent only") {
    auto y = ops::pool_freq_max(tape.constant(Buf({128, 64, 64})));
    CHECK(y.shape() == Shape{128, 32, 64});
  }
  SUBCASE("odd frequency extent fails") {
    CHECK_THROWS_AS(ops::pool_freq_max(tape.constant(Buf({2, 3, 1}))), ShapeError);
  }
  SUBCASE("gradient reaches only the maximum; ties go low") {
    ParamStore<double> ps;
    auto& p = ps.add("x", Buf({1, 4, 1}, {5, 1, 2, 2}));
    Tape<double> t2;
    auto y = ops::sum(ops::pool_freq_max(t2.parameter(p)));
    t2.backward(y);
    CHECK(p.grad == Buf({1, 4, 1}, {1, 0, 1, 0}));
  }
  SUBCASE("random input matches elementwise max") {
    Rng rng(4);
    Buf x = oracle::random_buffer(rng, {5, 8, 3});
    CHECK(oracle::max_abs_diff(ops::pool_freq_max(tape.constant(x)).value(), oracle::pool_freq_max(x)) == 0.0);
  }
}

TEST_CASE("batch_norm") {
  ParamStore<double> ps;
  auto& mean = ps.add("m", Buf({2}), false);
  auto& var = ps.add("v", Buf({2}, 1.0), false);
  auto& count = ps.add("n", Buf({1}), false);
  ops::RunningStats<double> stats{&mean.value, &var.value, &count.value};
  Tape<double> tape;
  auto gamma = tape.constant(Buf({2}, 1.0));

  SUBCASE("inference before training statistics fails") {
    CHECK_THROWS_AS(ops::batch_norm(tape.constant(Buf({3, 2})), gamma, tape.constant(Buf({2})), stats, Mode::infer),
                    Error);
  }
  SUBCASE("constant channels normalize to zero") {
    Buf x({4, 2});
    for (std::size_t r = 0; r < 4; ++r) {
      x.at(r, 0) = 3.0;
      x.at(r, 1) = -7.0;
    }
    auto y = ops::batch_norm(tape.constant(x), gamma, tape.constant(Buf({2})), stats, Mode::train);
    for (double v : y.value().data()) CHECK(v == 0.0);
    CHECK(count.value[0] == 1.0);
    CHECK(mean.value[0] == doctest::Approx(0.3));
    CHECK(mean.value[1] == doctest::Approx(-0.7));
  }
  SUBCASE("beta shifts the mean") {
    Rng rng(5);
    auto y = ops::batch_norm(tape.constant(oracle::random_buffer(rng, {50, 2})), gamma, tape.constant(Buf({2}, 5.0)),
                             stats, Mode::train);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0.0;
      for (std::size_t r = 0; r < 50; ++r) m += y.value().at(r, c) / 50.0;
      CHECK(m == doctest::Approx(5.0).epsilon(1e-9));
    }
  }
  SUBCASE("normalized moments") {
    Rng rng(6);
    Buf x = oracle::random_buffer(rng, {4, 6, 5, 2}, -3.0, 9.0);
    auto y = ops::batch_norm(tape.constant(x), gamma, tape.constant(Buf({2})), stats, Mode::train);
    const std::size_t rows = x.size() / 2;
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0.0, v = 0.0;
      for (std::size_t r = 0; r < rows; ++r) m += y.value()[r * 2 + c];
      m /= static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) v += std::pow(y.value()[r * 2 + c] - m, 2);
      v /= static_cast<double>(rows);
      CHECK(std::abs(m) < 1e-6);
      // The variance floor shrinks the unit variance by a factor var / (var + eps).
      CHECK(std::abs(v - 1.0) < 1e-5);
    }
    CHECK(oracle::max_abs_diff(y.value(), oracle::batch_norm_train(x, Buf({2}, 1.0), Buf({2}), 1e-5)) < 1e-10);
  }
  SUBCASE("inference is a fixed affine map") {
    mean.value = Buf({2}, {1.0, -1.0});
    var.value = Buf({2}, {4.0, 0.25});
    count.value[0] = 1.0;
    auto y = ops::batch_norm(tape.constant(Buf({1, 2}, {3.0, 0.0})), tape.constant(Buf({2}, {2.0, 1.0})),
                             tape.constant(Buf({2}, {0.5, 0.0})), stats, Mode::infer);
    CHECK(y.value()[0] == doctest::Approx(2.0 * 2.0 / std::sqrt(4.0 + 1e-5) + 0.5));
    CHECK(y.value()[1] == doctest::Approx(1.0 / std::sqrt(0.25 + 1e-5)));
    CHECK(count.value[0] == 1.0);
  }
}

TEST_CASE("activations") {
  Tape<double> tape;
  CHECK(ops::sigmoid(tape.constant(Buf({1}, 0.0))).value()[0] == 0.5);
  auto s = ops::softmax(tape.constant(Buf({1, 4}, 0.7)));
  for (double v : s.value().data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(ops::relu(tape.constant(Buf({3}, {-1.0, 0.0, 2.0}))).value() == Buf({3}, {0.0, 0.0, 2.0}));

  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Buf x = oracle::random_buffer(rng, {6, 9}, -30.0, 30.0);
    auto y = ops::softmax(tape.constant(x));
    CHECK(oracle::max_abs_diff(y.value(), oracle::softmax_rows(x)) < 1e-12);
    for (std::size_t r = 0; r < 6; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 9; ++j) total += y.value().at(r, j);
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
    auto sg = ops::sigmoid(tape.constant(x));
    for (double v : sg.value().data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
  // Large logits stay finite thanks to the max shift.
  auto big = ops::softmax(tape.constant(Buf({1, 2}, {1000.0, 999.0})));
  CHECK(std::isfinite(big.value()[0]));
  CHECK(big.value()[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("dropout") {
  Buf x({1000}, 1.0);
  SUBCASE("identity in inference mode") {
    Tape<double> tape(Mode::infer, 1);
    auto v = tape.constant(x);
    CHECK(ops::dropout(v, 0.25).id() == v.id());
  }
  SUBCASE("inverted scaling with a seeded stream") {
    Tape<double> a(Mode::train, 9);
    Tape<double> b(Mode::train, 9);
    auto ya = ops::dropout(a.constant(x), 0.25);
    auto yb = ops::dropout(b.constant(x), 0.25);
    CHECK(ya.value() == yb.value());
    std::size_t zeros = 0;
    for (double v : ya.value().data()) {
      if (v == 0.0) {
        ++zeros;
      } else {
        CHECK(v == doctest::Approx(1.0 / 0.75));
      }
    }
    CHECK(zeros > 180);
    CHECK(zeros < 320);
  }
}

TEST_CASE("gru_bidirectional") {
  Rng rng(8);
  const std::size_t D = 3, H = 4;
  auto make = [&](Tape<double>& tape, const Buf& w, const Buf& u, const Buf& b) {
    return ops::GruWeights<double>{tape.constant(w), tape.constant(u), tape.constant(b)};
  };
  SUBCASE("zero parameters give zero output") {
    Tape<double> tape;
    auto z = make(tape, Buf({D, 3 * H}), Buf({H, 3 * H}), Buf({3 * H}));
    auto y = ops::gru_bidirectional(tape.constant(oracle::random_buffer(rng, {5, D})), z, z);
    CHECK(y.shape() == Shape{5, 2 * H});
    for (double v : y.value().data()) CHECK(v == 0.0);
  }
  SUBCASE("single step with shared parameters is symmetric") {
    Tape<double> tape;
    auto w = make(tape, oracle::random_buffer(rng, {D, 3 * H}), oracle::random_buffer(rng, {H, 3 * H}),
                  oracle::random_buffer(rng, {3 * H}));
    auto y = ops::gru_bidirectional(tape.constant(oracle::random_buffer(rng, {1, D})), w, w);
    for (std::size_t j = 0; j < H; ++j) CHECK(y.value()[j] == y.value()[H + j]);
  }
  SUBCASE("matches the unrolled recurrence") {
    Buf x = oracle::random_buffer(rng, {3, D});
    Buf wf = oracle::random_buffer(rng, {D, 3 * H}), uf = oracle::random_buffer(rng, {H, 3 * H}),
        bf = oracle::random_buffer(rng, {3 * H});
    Buf wb = oracle::random_buffer(rng, {D, 3 * H}), ub = oracle::random_buffer(rng, {H, 3 * H}),
        bb = oracle::random_buffer(rng, {3 * H});
    Tape<double> tape;
    auto y = ops::gru_bidirectional(tape.constant(x), make(tape, wf, uf, bf), make(tape, wb, ub, bb));
    auto fw = oracle::gru_direction(x, wf, uf, bf, false);
    auto bw = oracle::gru_direction(x, wb, ub, bb, true);
    double err = 0.0;
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t j = 0; j < H; ++j) {
        err = std::max(err, std::abs(y.value().at(t, j) - fw[t][j]));
        err = std::max(err, std::abs(y.value().at(t, H + j) - bw[t][j]));
      }
    CHECK(err < 1e-10);
  }
  SUBCASE("weight shape mismatch") {
    Tape<double> tape;
    auto w = make(tape, Buf({D + 1, 3 * H}), Buf({H, 3 * H}), Buf({3 * H}));
    CHECK_THROWS_AS(ops::gru_bidirectional(tape.constant(Buf({2, D})), w, w), ShapeError);
  }
}

TEST_CASE("backward") {
  ParamStore<double> ps;
  auto& x = ps.add("x", Buf({2}, {1.0, 2.0}));
  auto& unused = ps.add("unused", Buf({3}, 4.0));
  unused.grad.fill(9.0);
  SUBCASE("sum gives ones") {
    Tape<double> tape;
    tape.backward(ops::sum(tape.parameter(x)));
    CHECK(x.grad == Buf({2}, 1.0));
  }
  SUBCASE("sum of squares gives 2x") {
    ps.zero_grad();
    Tape<double> tape;
    tape.parameter(unused);
    tape.backward(ops::sum(ops::square(tape.parameter(x))));
    CHECK(x.grad == Buf({2}, {2.0, 4.0}));
    CHECK(unused.grad == Buf({3}));
  }
  SUBCASE("non-scalar loss fails") {
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(ops::square(tape.parameter(x))), ShapeError);
  }
  SUBCASE("a parameter used twice gets one accumulated gradient") {
    Tape<double> tape;
    auto a = tape.parameter(x);
    auto b = tape.parameter(x);
    CHECK(a.id() == b.id());
    tape.backward(ops::sum(ops::mul(a, b)));
    CHECK(x.grad == Buf({2}, {2.0, 4.0}));
  }
  SUBCASE("replaying the tape is bit-identical") {
    Rng rng(10);
    auto& k = ps.add("k", oracle::random_buffer(rng, {3, 3, 2, 2}));
    auto& b = ps.add("b", oracle::random_buffer(rng, {2}));
    Tape<double> tape;
    auto y = ops::relu(ops::conv2d(tape.constant(oracle::random_buffer(rng, {5, 4, 2})), tape.parameter(k),
                                   tape.parameter(b)));
    auto loss = weighted_sum(y, 11);
    tape.backward(loss);
    const Buf first = k.grad;
    tape.backward(loss);
    CHECK(k.grad == first);
  }
}

TEST_CASE("finite_diff_check") {
  Rng rng(12);
  SUBCASE("quadratic form") {
    ParamStore<double> ps;
    ps.add("x", oracle::random_buffer(rng, {5}));
    Buf a = oracle::random_buffer(rng, {5});
    auto f = [a](Tape<double>& t, ParamStore<double>& p) {
      auto x = t.parameter(p.get("x"));
      return ops::add(ops::sum(ops::square(x)), ops::sum(ops::mul(x, t.constant(a))));
    };
    CHECK(finite_diff_check<double>(f, ps).max_rel_error < 1e-9);
  }
  SUBCASE("conv2d then relu away from the kink") {
    ParamStore<double> ps;
    ps.add("k", oracle::random_buffer(rng, {3, 3, 2, 3}));
    ps.add("b", Buf({3}, 20.0));
    Buf x = oracle::random_buffer(rng, {4, 4, 2});
    auto f = [x](Tape<double>& t, ParamStore<double>& p) {
      return weighted_sum(ops::relu(ops::conv2d(t.constant(x), t.parameter(p.get("k")), t.parameter(p.get("b")))), 13);
    };
    auto r = finite_diff_check<double>(f, ps);
    CHECK(r.max_rel_error < 1e-6);
    CHECK(r.checked == 57);
  }
  SUBCASE("non-deterministic function is rejected") {
    ParamStore<double> ps;
    ps.add("x", Buf({1}, 1.0));
    int calls = 0;
    auto f = [&calls](Tape<double>& t, ParamStore<double>& p) {
      ++calls;
      return ops::scale(ops::sum(t.parameter(p.get("x"))), static_cast<double>(calls));
    };
    CHECK_THROWS_AS(finite_diff_check<double>(f, ps), Error);
  }
}

TEST_CASE("every differentiable op agrees with central differences") {
  Rng rng(14);
  ParamStore<double> ps;

  SUBCASE("conv2d input and kernel, 1x1 and 3x3") {
    ps.add("x", oracle::random_buffer(rng, {2, 4, 6, 3}));
    ps.add("k3", oracle::random_buffer(rng, {3, 3, 3, 2}));
    ps.add("k1", oracle::random_buffer(rng, {1, 1, 2, 2}));
    ps.add("b", oracle::random_buffer(rng, {2}));
    CHECK(op_gradcheck(ps, [](Tape<double>& t, ParamStore<double>& p) {
            auto b = t.parameter(p.get("b"));
            auto y = ops::conv2d(t.parameter(p.get("x")), t.parameter(p.get("k3")), b);
            return weighted_sum(ops::conv2d(y, t.parameter(p.get("k1")), b), 1);
          }) < 1e-7);
  }
  SUBCASE("pooling, channel statistics, broadcasting and concatenation") {
    ps.add("x", oracle::random_buffer(rng, {2, 3, 4, 5}));
    ps.add("m", oracle::random_buffer(rng, {2, 3, 4, 1}));
    ps.add("c", oracle::random_buffer(rng, {2, 1, 1, 5}));
    CHECK(op_gradcheck(ps, [](Tape<double>& t, ParamStore<double>& p) {
            auto x = t.parameter(p.get("x"));
            auto a = ops::mul(t.parameter(p.get("m")), x);
            auto b = ops::mul(x, t.parameter(p.get("c")));
            auto cat = ops::concat_last(a, b);
            auto pooled = ops::pool_freq_max(cat);
            auto stats = ops::channel_pool(cat);
            auto gap = ops::global_avg_pool(x);
            return ops::add(ops::add(weighted_sum(pooled, 2), weighted_sum(stats, 3)), weighted_sum(gap, 4));
          }) < 1e-7);
  }
  SUBCASE("batch norm in both modes") {
    ps.add("x", oracle::random_buffer(rng, {3, 4, 2, 3}));
    ps.add("g", oracle::random_buffer(rng, {3}, 0.5, 1.5));
    ps.add("be", oracle::random_buffer(rng, {3}));
    ps.add("rm", oracle::random_buffer(rng, {3}), false);
    ps.add("rv", oracle::random_buffer(rng, {3}, 0.5, 2.0), false);
    ps.add("rn", Buf({1}, 1.0), false);
    for (Mode mode : {Mode::train, Mode::infer}) {
      CHECK(op_gradcheck(ps, [mode](Tape<double>& t, ParamStore<double>& p) {
              ops::RunningStats<double> s{&p.get("rm").value, &p.get("rv").value, &p.get("rn").value};
              // Train mode updates running statistics; work on a scratch copy so the
              // loss stays a pure function of the parameters.
              NdBuffer<double> m = *s.mean, v = *s.var, n = *s.count;
              ops::RunningStats<double> scratch{&m, &v, &n};
              auto y = ops::batch_norm(t.parameter(p.get("x")), t.parameter(p.get("g")), t.parameter(p.get("be")),
                                       mode == Mode::train ? scratch : s, mode);
              return weighted_sum(y, 5);
            }) < 1e-7);
    }
  }
  SUBCASE("dense, sigmoid, softmax, reshape") {
    ps.add("x", oracle::random_buffer(rng, {2, 3, 4}));
    ps.add("w", oracle::random_buffer(rng, {4, 5}));
    ps.add("b", oracle::random_buffer(rng, {5}));
    CHECK(op_gradcheck(ps, [](Tape<double>& t, ParamStore<double>& p) {
            auto h = ops::dense(t.parameter(p.get("x")), t.parameter(p.get("w")), t.parameter(p.get("b")));
            auto flat = ops::reshape(h, {6, 5});
            return ops::add(weighted_sum(ops::softmax(flat), 6), weighted_sum(ops::sigmoid(h), 7));
          }) < 1e-7);
  }
  SUBCASE("bidirectional GRU through time") {
    const std::size_t D = 3, H = 4;
    ps.add("x", oracle::random_buffer(rng, {2, 5, D}));
    for (const char* dir : {"f", "b"}) {
      ps.add(std::string(dir) + ".w", oracle::random_buffer(rng, {D, 3 * H}));
      ps.add(std::string(dir) + ".u", oracle::random_buffer(rng, {H, 3 * H}));
      ps.add(std::string(dir) + ".b", oracle::random_buffer(rng, {3 * H}));
    }
    CHECK(op_gradcheck(ps, [](Tape<double>& t, ParamStore<double>& p) {
            auto gw = [&](const std::string& d) {
              return ops::GruWeights<double>{t.parameter(p.get(d + ".w")), t.parameter(p.get(d + ".u")),
                                             t.parameter(p.get(d + ".b"))};
            };
            return weighted_sum(ops::gru_bidirectional(t.parameter(p.get("x")), gw("f"), gw("b")), 8);
          }) < 1e-7);
  }
  SUBCASE("losses with respect to their inputs") {
    ps.add("logits", oracle::random_buffer(rng, {2, 3, 4}));
    ps.add("q", oracle::random_buffer(rng, {3, 5}, 0.05, 0.95));
    Buf y({3, 5});
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = (i * 7) % 3 == 0 ? 1.0 : 0.0;
    CHECK(op_gradcheck(
              ps,
              [y](Tape<double>& t, ParamStore<double>& p) {
                auto ce = ops::cross_entropy(ops::softmax(t.parameter(p.get("logits"))), {0, 3, 2, 1, 1, 0});
                auto bce = ops::binary_cross_entropy(t.parameter(p.get("q")), y);
                return ops::average(std::vector<Var<double>>{ce, bce});
              },
              1e-6) < 1e-6);
  }
}
