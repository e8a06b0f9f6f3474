#include "doctest.h"

#include <cmath>

#include "gradcheck.hpp"
#include "pacn/ops.hpp"

using namespace pacn;
using pacn::testing::TensorD;

namespace {

TensorD conv_reference(const TensorD& x, const TensorD& pw, const TensorD& pb, const TensorD& dw,
                       const TensorD& db, Stride2 s) {
  const auto n = x.dim(0), cin = x.dim(1), F = x.dim(2), T = x.dim(3), cout = pw.dim(0);
  TensorD mid({n, cout, F, T});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t t = 0; t < T; ++t) {
          double acc = pb[o];
          for (std::int64_t c = 0; c < cin; ++c) acc += pw.at(o, c) * x.at(i, c, f, t);
          mid.at(i, o, f, t) = acc;
        }
  const auto Fo = (F + s.f - 1) / s.f, To = (T + s.t - 1) / s.t;
  const auto pf = std::max<std::int64_t>(0, ((Fo - 1) * s.f + 3 - F)) / 2;
  const auto pt = std::max<std::int64_t>(0, ((To - 1) * s.t + 3 - T)) / 2;
  TensorD out({n, cout, Fo, To});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t f = 0; f < Fo; ++f)
        for (std::int64_t t = 0; t < To; ++t) {
          double acc = db[o];
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              const auto ff = f * s.f + a - pf, tt = t * s.t + b - pt;
              if (ff < 0 || ff >= F || tt < 0 || tt >= T) continue;
              acc += dw.at(o, a, b) * mid.at(i, o, ff, tt);
            }
          out.at(i, o, f, t) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ConfigError);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ConfigError);
}

TEST_CASE("backward of sum and relu") {
  Tape<double> tape;
  Var x = tape.leaf(TensorD({4}, std::vector<double>{-1.0, 2.0, -0.5, 3.0}), true);
  tape.backward(sum(tape, x));
  for (int i = 0; i < 4; ++i) CHECK(tape.grad(x)[i] == 1.0);

  Tape<double> t2;
  Var y = t2.leaf(TensorD({4}, std::vector<double>{-1.0, 2.0, -0.5, 3.0}), true);
  t2.backward(sum(t2, relu(t2, y)));
  CHECK(t2.grad(y).vec() == std::vector<double>{0.0, 1.0, 0.0, 1.0});
}

TEST_CASE("backward needs a scalar loss") {
  Tape<double> tape;
  Var x = tape.leaf(TensorD({3}, 1.0), true);
  CHECK_THROWS_AS(tape.backward(relu(tape, x)), UsageError);
}

TEST_CASE("relu and softmax examples") {
  Tape<float> tape;
  Var x = tape.constant(Tensor({2}, std::vector<float>{-1.0f, 2.0f}));
  CHECK(tape.value(relu(tape, x)).vec() == std::vector<float>{0.0f, 2.0f});
  Var c = tape.constant(Tensor({10}, 3.0f));
  for (float v : tape.value(softmax(tape, c, 0)).vec()) CHECK(v == doctest::Approx(0.1f).epsilon(1e-6));
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(3);
  Tape<double> tape;
  Var x = tape.constant(pacn::testing::random_tensor({5, 7}, rng, -5, 5));
  const auto& y = tape.value(softmax(tape, x, 1));
  for (int r = 0; r < 5; ++r) {
    double s = 0;
    for (int j = 0; j < 7; ++j) {
      CHECK(y.at(r, j) >= 0.0);
      s += y.at(r, j);
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("bsconv examples") {
  SUBCASE("constant averaging") {
    Tape<float> tape;
    Var x = tape.constant(Tensor({1, 1, 4, 4}, 1.0f));
    Var pw = tape.constant(Tensor({1, 1}, 1.0f));
    Var pb = tape.constant(Tensor({1}, 0.0f));
    Var dw = tape.constant(Tensor({1, 3, 3}, 1.0f / 9.0f));
    Var db = tape.constant(Tensor({1}, 0.0f));
    const auto& y = tape.value(bsconv(tape, x, pw, pb, dw, db, Stride2{1, 1}));
    for (int f = 1; f < 3; ++f)
      for (int t = 1; t < 3; ++t) CHECK(y.at(0, 0, f, t) == doctest::Approx(1.0f).epsilon(1e-6));
  }
  SUBCASE("identity kernels") {
    Rng rng(4);
    Tape<double> tape;
    const TensorD xin = pacn::testing::random_tensor({2, 3, 5, 4}, rng);
    TensorD pw({3, 3}), dw({3, 3, 3});
    for (int c = 0; c < 3; ++c) {
      pw.at(c, c) = 1.0;
      dw.at(c, 1, 1) = 1.0;
    }
    Var y = bsconv(tape, tape.constant(xin), tape.constant(pw), tape.constant(TensorD({3})),
                   tape.constant(dw), tape.constant(TensorD({3})), Stride2{1, 1});
    CHECK(tape.value(y).vec() == xin.vec());
  }
  SUBCASE("matches dense reference") {
    Rng rng(5);
    for (Stride2 s : {Stride2{1, 1}, Stride2{2, 2}, Stride2{2, 1}}) {
      const TensorD x = pacn::testing::random_tensor({1, 2, 5, 5}, rng);
      const TensorD pw = pacn::testing::random_tensor({2, 2}, rng), pb = pacn::testing::random_tensor({2}, rng);
      const TensorD dw = pacn::testing::random_tensor({2, 3, 3}, rng), db = pacn::testing::random_tensor({2}, rng);
      Tape<float> tape;
      const auto& y = tape.value(bsconv(tape, tape.constant(x.cast<float>()), tape.constant(pw.cast<float>()),
                                        tape.constant(pb.cast<float>()), tape.constant(dw.cast<float>()),
                                        tape.constant(db.cast<float>()), s));
      const TensorD ref = conv_reference(x, pw, pb, dw, db, s);
      REQUIRE(y.shape() == ref.shape());
      CHECK(y.dim(2) == (5 + s.f - 1) / s.f);
      for (std::int64_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-5);
    }
  }
  SUBCASE("channel mismatch") {
    Tape<float> tape;
    Var x = tape.constant(Tensor({1, 2, 4, 4}));
    CHECK_THROWS_AS(bsconv(tape, x, tape.constant(Tensor({3, 2})), tape.constant(Tensor({3})),
                           tape.constant(Tensor({4, 3, 3})), tape.constant(Tensor({4})), Stride2{1, 1}),
                    ConfigError);
  }
}

TEST_CASE("mha examples") {
  Rng rng(8);
  auto weights = [&](Tape<double>& tape, std::int64_t d) {
    std::vector<Var> w;
    for (int i = 0; i < 4; ++i) {
      w.push_back(tape.constant(pacn::testing::random_tensor({d, d}, rng)));
      w.push_back(tape.constant(pacn::testing::random_tensor({d}, rng)));
    }
    return MhaWeights{w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7]};
  };
  SUBCASE("attention rows sum to one") {
    const TensorD x = pacn::testing::random_tensor({2, 5, 8}, rng);
    const TensorD wq = pacn::testing::random_tensor({8, 8}, rng), bq = pacn::testing::random_tensor({8}, rng);
    const TensorD wk = pacn::testing::random_tensor({8, 8}, rng), bk = pacn::testing::random_tensor({8}, rng);
    const TensorD p = attention_probs(x, wq, bq, wk, bk, 2);
    for (std::int64_t r = 0; r < p.size() / 5; ++r) {
      double s = 0;
      for (int j = 0; j < 5; ++j) s += p[r * 5 + j];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  SUBCASE("single token ignores query and key") {
    Tape<double> tape;
    auto w = weights(tape, 4);
    const TensorD x = pacn::testing::random_tensor({1, 4}, rng);
    const auto& y = tape.value(mha(tape, tape.constant(x), w, 2));
    const auto& wv = tape.value(w.wv);
    const auto& bv = tape.value(w.bv);
    const auto& wo = tape.value(w.wo);
    const auto& bo = tape.value(w.bo);
    for (int o = 0; o < 4; ++o) {
      double acc = bo[o];
      for (int i = 0; i < 4; ++i) {
        double v = bv[i];
        for (int j = 0; j < 4; ++j) v += wv.at(i, j) * x[j];
        acc += wo.at(o, i) * v;
      }
      CHECK(std::abs(y[o] - acc) < 1e-12);
    }
  }
  SUBCASE("hand computation, 3 tokens, d=2") {
    // Q = X Wq, K = X Wk, V = X Wv with integer weights; scores / sqrt(2).
    Tape<double> tape;
    const TensorD x({3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1});
    const TensorD eye({2, 2}, std::vector<double>{1, 0, 0, 1});
    const TensorD wv({2, 2}, std::vector<double>{2, 0, 1, 1});
    const TensorD zero({2});
    MhaWeights w{tape.constant(eye), tape.constant(zero), tape.constant(eye), tape.constant(zero),
                 tape.constant(wv),  tape.constant(zero), tape.constant(eye), tape.constant(zero)};
    const auto& y = tape.value(mha(tape, tape.constant(x), w, 1));
    // Scores S_ij = x_i . x_j / sqrt(2); V rows: (2,1), (0,1), (2,2).
    const double r = 1.0 / std::sqrt(2.0);
    const double S[3][3] = {{1 * r, 0, 1 * r}, {0, 1 * r, 1 * r}, {1 * r, 1 * r, 2 * r}};
    const double V[3][2] = {{2, 1}, {0, 1}, {2, 2}};
    for (int i = 0; i < 3; ++i) {
      double z = 0, e[3];
      for (int j = 0; j < 3; ++j) z += (e[j] = std::exp(S[i][j]));
      for (int c = 0; c < 2; ++c) {
        double acc = 0;
        for (int j = 0; j < 3; ++j) acc += e[j] / z * V[j][c];
        CHECK(std::abs(y.at(i, c) - acc) < 1e-12);
      }
    }
  }
  SUBCASE("heads must divide d") {
    Tape<double> tape;
    auto w = weights(tape, 4);
    CHECK_THROWS_AS(mha(tape, tape.constant(TensorD({2, 4})), w, 3), ConfigError);
  }
}

TEST_CASE("grn examples") {
  Rng rng(9);
  SUBCASE("gamma = beta = 0 is the identity") {
    Tape<float> tape;
    const Tensor x = pacn::testing::random_tensor({2, 3, 4, 4}, rng).cast<float>();
    Var y = grn(tape, tape.constant(x), tape.constant(Tensor({3})), tape.constant(Tensor({3})));
    CHECK(tape.value(y).vec() == x.vec());
  }
  SUBCASE("identical channels") {
    Tape<double> tape;
    TensorD x({1, 3, 2, 2});
    const double base[4] = {0.3, -1.2, 0.7, 2.0};
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 4; ++k) x[c * 4 + k] = base[k];
    const TensorD g({3}, std::vector<double>{0.5, 1.0, -0.3}), b({3}, std::vector<double>{0.1, 0.0, 0.2});
    const auto& y = tape.value(grn(tape, tape.constant(x), tape.constant(g), tape.constant(b)));
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 4; ++k) CHECK(std::abs(y[c * 4 + k] - ((g[c] + 1) * base[k] + b[c])) < 1e-4);
  }
  SUBCASE("random input against 64-bit formula") {
    const TensorD x = pacn::testing::random_tensor({1, 3, 2, 2}, rng);
    double G[3], meanG = 0;
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += x[c * 4 + k] * x[c * 4 + k];
      meanG += (G[c] = std::sqrt(s)) / 3.0;
    }
    Tape<float> tape;
    const auto& y = tape.value(grn(tape, tape.constant(x.cast<float>()), tape.constant(Tensor({3}, 1.0f)),
                                   tape.constant(Tensor({3}))));
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 4; ++k) {
        const double xv = x[c * 4 + k];
        CHECK(std::abs(y[c * 4 + k] - (xv * G[c] / (meanG + kNormEps) + xv)) < 1e-5);
      }
  }
}

TEST_CASE("channel shuffle") {
  Tape<float> tape;
  Tensor x({1, 4, 1, 1}, std::vector<float>{0, 1, 2, 3});
  CHECK(tape.value(channel_shuffle(tape, tape.constant(x), 2)).vec() == std::vector<float>{0, 2, 1, 3});
  CHECK(tape.value(channel_shuffle(tape, tape.constant(x), 1)).vec() == x.vec());
  Rng rng(2);
  const Tensor y = pacn::testing::random_tensor({2, 8, 3}, rng).cast<float>();
  Var s = channel_shuffle(tape, tape.constant(y), 2);
  CHECK(tape.value(channel_shuffle(tape, s, 4)).vec() == y.vec());
  CHECK_THROWS_AS(channel_shuffle(tape, tape.constant(x), 3), ConfigError);
}

TEST_CASE("batch norm training statistics") {
  Rng rng(12);
  Tape<double> tape;
  const TensorD x = pacn::testing::random_tensor({4, 3, 5, 6}, rng, -3, 5);
  BatchNormStats<double> st{TensorD({3}), TensorD({3}, 1.0)};
  const auto& y = tape.value(
      batch_norm(tape, tape.constant(x), tape.constant(TensorD({3}, 1.0)), tape.constant(TensorD({3})), st, true));
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < 30; ++k) m += y[(i * 3 + c) * 30 + k];
    m /= 120;
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < 30; ++k) v += std::pow(y[(i * 3 + c) * 30 + k] - m, 2);
    v /= 120;
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("forward determinism") {
  Rng rng(13);
  const Tensor x = pacn::testing::random_tensor({2, 3, 4, 5}, rng).cast<float>();
  auto run = [&] {
    Tape<float> tape;
    return tape.value(grn(tape, relu(tape, tape.constant(x)), tape.constant(Tensor({3}, 0.5f)),
                          tape.constant(Tensor({3}, 0.1f))));
  };
  CHECK(run().vec() == run().vec());
}

TEST_CASE("finite-difference gradient checks for every primitive") {
  for (const auto& c : pacn::testing::primitive_cases()) {
    for (std::uint64_t point = 0; point < 5; ++point) {
      Rng rng(derive_seed({0x6c, point}));
      const auto r = pacn::testing::grad_check(c.build, c.inputs(rng));
      INFO(c.name << " point " << point << " input " << r.worst_input);
      CHECK(r.max_rel_error < 1e-3);
    }
  }
}
