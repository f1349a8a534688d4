#include <doctest.h>

#include <cmath>

#include "metafew/tensor.hpp"
#include "test_util.hpp"

using namespace metafew;
using testutil::conv2d_oracle;
using testutil::max_rel_err;
using testutil::random_tensor;

namespace {

// autodiff vs central differences for a scalar-valued graph builder
double gradcheck(const std::function<Tensor(Tape&, const ParamSet&)>& build,
                 const ParamSet& point, double eps = 1e-4) {
  auto tape = Tape::make(Dtype::f64);
  ParamSet attached = tape->watch_all(point);
  Tensor loss = build(*tape, attached);
  GradMap got = tape->backward(loss, attached);

  GradMap want = finite_diff_grad(
      [&](const ParamSet& p) {
        auto t2 = Tape::make(Dtype::f64);
        ParamSet a2 = t2->watch_all(p);
        return build(*t2, a2).item();
      },
      point, eps);
  return max_rel_err(got, want);
}

}  // namespace

TEST_CASE("relu definition") {
  Tensor x = Tensor::from({3}, {-1, 0, 2});
  Tensor y = relu(x);
  CHECK(y.at(0) == 0.0f);
  CHECK(y.at(1) == 0.0f);
  CHECK(y.at(2) == 2.0f);
}

TEST_CASE("matmul identity") {
  Rng rng(7);
  Tensor a = random_tensor({3, 5}, rng, Dtype::f32);
  Tensor eye = Tensor::zeros({3, 3}, Dtype::f32);
  for (int i = 0; i < 3; ++i) eye.set(size_t(i * 3 + i), 1.0);
  Tensor out = matmul(eye, a);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(out.at(size_t(i)) == a.at(size_t(i)));
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("(2,3)"), ShapeError);
}

TEST_CASE("conv2d matches the brute-force oracle") {
  SUBCASE("3x3 averaging kernel, center element is the neighborhood mean") {
    Rng rng(11);
    Tensor x = random_tensor({1, 1, 4, 4}, rng);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0, Dtype::f64);
    Tensor y = conv2d(x, w, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    // center element (1,1): mean over rows 0..2, cols 0..2
    double mean = 0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) mean += x.at(size_t(r * 4 + c));
    mean /= 9.0;
    CHECK(y.at(size_t(1 * 4 + 1)) == doctest::Approx(mean).epsilon(1e-12));

    auto want = conv2d_oracle(x.to_vector(), w.to_vector(), 1, 1, 4, 4, 1, 3, 3, 1, 1);
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(y.at(i) == doctest::Approx(want[i]).epsilon(1e-12));
  }
  SUBCASE("random geometry against the oracle") {
    Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
      int64_t B = 1 + int64_t(rng.below(2)), IC = 1 + int64_t(rng.below(3));
      int64_t OC = 1 + int64_t(rng.below(3)), IH = 5 + int64_t(rng.below(4));
      int64_t IW = 5 + int64_t(rng.below(4));
      Tensor x = random_tensor({B, IC, IH, IW}, rng);
      Tensor w = random_tensor({OC, IC, 3, 3}, rng);
      Tensor y = conv2d(x, w, 1, 1);
      auto want = conv2d_oracle(x.to_vector(), w.to_vector(), B, IC, IH, IW, OC, 3, 3, 1, 1);
      for (size_t i = 0; i < want.size(); ++i)
        CHECK(y.at(i) == doctest::Approx(want[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("backward basics") {
  SUBCASE("d/dx x*x at 3 is 6") {
    auto tape = Tape::make(Dtype::f64);
    ParamSet p;
    p.add("x", Tensor::scalar(3.0, Dtype::f64));
    ParamSet a = tape->watch_all(p);
    Tensor loss = mul(a.at("x"), a.at("x"));
    GradMap g = tape->backward(loss, a);
    CHECK(g.at("x").item() == doctest::Approx(6.0));
  }
  SUBCASE("create_graph: d2/dx2 x^3 at 2 is 12") {
    auto tape = Tape::make(Dtype::f64);
    ParamSet p;
    p.add("x", Tensor::scalar(2.0, Dtype::f64));
    ParamSet a = tape->watch_all(p);
    Tensor loss = mul(mul(a.at("x"), a.at("x")), a.at("x"));
    GradMap g1 = tape->backward(loss, a, /*create_graph=*/true);
    CHECK(g1.at("x").item() == doctest::Approx(12.0));  // 3x^2
    CHECK(g1.at("x").on_tape());
    GradMap g2 = tape->backward(g1.at("x"), a);
    CHECK(g2.at("x").item() == doctest::Approx(12.0));  // 6x
  }
  SUBCASE("softmax_xent gradient is softmax minus one-hot") {
    auto tape = Tape::make(Dtype::f64);
    ParamSet p;
    p.add("z", Tensor::zeros({5}, Dtype::f64));
    ParamSet a = tape->watch_all(p);
    Tensor loss = softmax_xent(a.at("z"), {2});
    GradMap g = tape->backward(loss, a);
    for (int i = 0; i < 5; ++i)
      CHECK(g.at("z").at(size_t(i)) == doctest::Approx(i == 2 ? -0.8 : 0.2).epsilon(1e-12));
  }
  SUBCASE("loss must be scalar") {
    auto tape = Tape::make(Dtype::f64);
    ParamSet p;
    p.add("x", Tensor::zeros({3}, Dtype::f64));
    ParamSet a = tape->watch_all(p);
    Tensor y = relu(a.at("x"));
    CHECK_THROWS_AS((void)tape->backward(y, a), ShapeError);
  }
}

TEST_CASE("uniform cross-entropy equals ln N") {
  Tensor z = Tensor::zeros({4, 5}, Dtype::f64);
  double loss = softmax_xent(z, {0, 1, 2, 3}).item();
  CHECK(std::abs(loss - std::log(5.0)) < 1e-9);
  CHECK(loss == doctest::Approx(1.6094379).epsilon(1e-7));
}

TEST_CASE("finite_diff_grad basics") {
  SUBCASE("f(x^2) at 3") {
    ParamSet p;
    p.add("x", Tensor::scalar(3.0, Dtype::f64));
    GradMap g = finite_diff_grad([](const ParamSet& q) { return q.at("x").item() * q.at("x").item(); },
                                 p, 1e-4);
    CHECK(std::abs(g.at("x").item() - 6.0) < 1e-6);
  }
  SUBCASE("constant f gives zero gradient") {
    ParamSet p;
    p.add("x", Tensor::zeros({4}, Dtype::f64));
    GradMap g = finite_diff_grad([](const ParamSet&) { return 1.25; }, p, 1e-4);
    for (int64_t i = 0; i < 4; ++i) CHECK(g.at("x").at(size_t(i)) == 0.0);
  }
  SUBCASE("rejects 32-bit points") {
    ParamSet p;
    p.add("x", Tensor::scalar(1.0, Dtype::f32));
    CHECK_THROWS_AS((void)finite_diff_grad([](const ParamSet&) { return 0.0; }, p, 1e-4),
                    ShapeError);
  }
}

TEST_CASE("gradcheck: every primitive against central differences") {
  Rng rng(101);
  const double tol = 1e-4;

  auto weighted = [](Tape& tape, const Tensor& y, Rng& rng) {
    // random linear functional of the output makes the scalar sensitive to
    // every output coordinate
    Tensor c = testutil::random_tensor(y.shape(), rng);
    (void)tape;
    return sum_all(mul(y, c));
  };

  SUBCASE("elementwise and matmul family") {
    for (int trial = 0; trial < 10; ++trial) {
      ParamSet p;
      p.add("a", random_tensor({4, 3}, rng));
      p.add("b", random_tensor({4, 3}, rng));
      p.add("m", random_tensor({3, 6}, rng));
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Tensor t = add(a.at("a"), a.at("b"));
            t = mul(t, sub(a.at("a"), scale(a.at("b"), 0.7)));
            t = matmul(t, a.at("m"));
            t = add_scalar(t, 0.3);
            Rng w = wr;
            return weighted(tape, t, w);
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("transcendental: exp, log, pow") {
    for (int trial = 0; trial < 10; ++trial) {
      ParamSet p;
      p.add("x", random_tensor({2, 5}, rng, Dtype::f64, 0.3, 2.0));  // positive domain
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Tensor t = add(log_e(a.at("x")), exp_e(scale(a.at("x"), -0.5)));
            t = add(t, pow_const(a.at("x"), 1.7));
            Rng w = wr;
            return weighted(tape, t, w);
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("relu away from the kink") {
    for (int trial = 0; trial < 10; ++trial) {
      ParamSet p;
      Tensor x = random_tensor({3, 4}, rng);
      for (int64_t i = 0; i < x.numel(); ++i)
        if (std::abs(x.at(size_t(i))) < 0.05) x.set(size_t(i), 0.1);  // keep clear of 0
      p.add("x", x);
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Rng w = wr;
            return weighted(tape, relu(a.at("x")), w);
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("reductions and broadcasts") {
    for (int trial = 0; trial < 10; ++trial) {
      ParamSet p;
      p.add("x", random_tensor({4, 5}, rng));
      p.add("v", random_tensor({5}, rng));
      p.add("u", random_tensor({4}, rng));
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Tensor t = add(a.at("x"), broadcast_rows(a.at("v"), 4));
            t = add(t, broadcast_cols(a.at("u"), 5));
            Tensor r = add(sum_rows(t), scale(mean_rows(t), 0.5));
            Tensor c = sum_cols(t);
            Rng w = wr;
            Tensor s1 = weighted(tape, r, w);
            Tensor s2 = weighted(tape, c, w);
            return add(s1, s2);
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("softmax and cross-entropy") {
    for (int trial = 0; trial < 10; ++trial) {
      ParamSet p;
      p.add("z", random_tensor({6, 5}, rng, Dtype::f64, -2.0, 2.0));
      std::vector<int32_t> labels;
      for (int i = 0; i < 6; ++i) labels.push_back(int32_t(rng.below(5)));
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Tensor s = softmax(a.at("z"));
            Rng w = wr;
            Tensor t = weighted(tape, s, w);
            return add(t, softmax_xent(a.at("z"), labels));
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("conv2d, both arguments") {
    for (int trial = 0; trial < 4; ++trial) {
      ParamSet p;
      p.add("x", random_tensor({2, 2, 6, 6}, rng));
      p.add("w", random_tensor({3, 2, 3, 3}, rng));
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Rng w = wr;
            return weighted(tape, conv2d(a.at("x"), a.at("w"), 1, 1), w);
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("maxpool away from ties") {
    for (int trial = 0; trial < 6; ++trial) {
      ParamSet p;
      // distinct values so no tied window entries
      Tensor x = Tensor::zeros({1, 2, 6, 6}, Dtype::f64);
      std::vector<double> vals;
      for (int64_t i = 0; i < x.numel(); ++i) vals.push_back(double(i) * 0.013);
      Rng sh(rng.next_u64());
      sh.shuffle(vals);
      for (int64_t i = 0; i < x.numel(); ++i) x.set(size_t(i), vals[size_t(i)]);
      p.add("x", x);
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Rng w = wr;
            return weighted(tape, maxpool2x2(a.at("x")), w);
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("global average pool and batch norm") {
    for (int trial = 0; trial < 5; ++trial) {
      ParamSet p;
      p.add("x", random_tensor({3, 2, 4, 4}, rng));
      p.add("g", random_tensor({2}, rng, Dtype::f64, 0.5, 1.5));
      p.add("b", random_tensor({2}, rng));
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Tensor bn = batch_norm(a.at("x"), a.at("g"), a.at("b"));
            Rng w = wr;
            return weighted(tape, global_avg_pool(bn), w);
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("concat and slice") {
    for (int trial = 0; trial < 6; ++trial) {
      ParamSet p;
      p.add("a", random_tensor({3, 2}, rng));
      p.add("b", random_tensor({3, 4}, rng));
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Tensor t = concat_cols({a.at("a"), a.at("b")});
            Tensor s = slice_cols(t, 1, 3);
            Rng w = wr;
            return weighted(tape, s, w);
          },
          p);
      CHECK(err < tol);
    }
  }

  SUBCASE("reshape and transpose") {
    for (int trial = 0; trial < 5; ++trial) {
      ParamSet p;
      p.add("x", random_tensor({4, 6}, rng));
      Rng wr(rng.next_u64());
      double err = gradcheck(
          [&](Tape& tape, const ParamSet& a) {
            Tensor t = transpose2d(reshape(a.at("x"), {8, 3}));
            Rng w = wr;
            return weighted(tape, t, w);
          },
          p);
      CHECK(err < tol);
    }
  }
}

TEST_CASE("second order: gradient-through-gradient matches finite differences of the first gradient") {
  // f(theta) = L_Q(theta - alpha * dL_S/dtheta) with smooth primitives
  Rng rng(202);
  const double alpha = 0.25;
  ParamSet p;
  p.add("w", random_tensor({2, 2}, rng));
  Tensor sx = random_tensor({4, 2}, rng);
  Tensor qx = random_tensor({4, 2}, rng);
  std::vector<int32_t> sy = {0, 1, 0, 1}, qy = {1, 0, 1, 0};

  auto adapted_loss = [&](Tape& tape, const ParamSet& a, bool create_graph) {
    Tensor w = a.at("w");
    Tensor ls = softmax_xent(matmul(tape.constant(sx), w), sy);
    std::vector<Tensor> g = tape.gradients(ls, {w}, create_graph);
    Tensor w2 = sub(w, scale(g[0], alpha));
    return softmax_xent(matmul(tape.constant(qx), w2), qy);
  };

  auto tape = Tape::make(Dtype::f64);
  ParamSet a = tape->watch_all(p);
  Tensor meta = adapted_loss(*tape, a, true);
  GradMap got = tape->backward(meta, a);

  GradMap want = finite_diff_grad(
      [&](const ParamSet& q) {
        auto t2 = Tape::make(Dtype::f64);
        ParamSet a2 = t2->watch_all(q);
        return adapted_loss(*t2, a2, false).item();
      },
      p, 1e-4);
  CHECK(max_rel_err(got, want) < 1e-3);
}

TEST_CASE("determinism: identical graphs give bit-identical results") {
  auto run = [] {
    Rng rng(55);
    auto tape = Tape::make(Dtype::f32);
    ParamSet p;
    p.add("w", random_tensor({8, 8}, rng, Dtype::f32));
    ParamSet a = tape->watch_all(p);
    Tensor x = tape->constant(random_tensor({8, 8}, rng, Dtype::f32));
    Tensor y = matmul(relu(matmul(x, a.at("w"))), transpose2d(a.at("w")));
    Tensor loss = sum_all(mul(y, y));
    GradMap g = tape->backward(loss, a);
    std::vector<double> out = g.at("w").to_vector();
    out.push_back(loss.item());
    return out;
  };
  auto r1 = run(), r2 = run();
  REQUIRE(r1.size() == r2.size());
  for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("non-finite outputs abort the step") {
  Tensor x = Tensor::from({2}, {1.0, 0.0}, Dtype::f64);
  CHECK_THROWS_AS((void)log_e(x), NumericError);  // log(0) = -inf
  Tensor big = Tensor::full({2}, 1e30, Dtype::f32);
  CHECK_THROWS_AS((void)mul(big, big), NumericError);  // f32 overflow
}

TEST_CASE("nesting is limited to one create_graph level") {
  auto tape = Tape::make(Dtype::f64);
  ParamSet p;
  p.add("x", Tensor::scalar(1.5, Dtype::f64));
  ParamSet a = tape->watch_all(p);
  Tensor loss = mul(mul(a.at("x"), a.at("x")), a.at("x"));
  GradMap g1 = tape->backward(loss, a, true);
  // differentiating the returned gradient is the supported second order...
  GradMap g2 = tape->backward(g1.at("x"), a, false);
  CHECK(g2.at("x").item() == doctest::Approx(9.0));
  CHECK(tape->nesting_level() == 0);
}

TEST_CASE("apply_primitive dispatch covers the public inventory") {
  Rng rng(31);
  Tensor a = random_tensor({2, 3}, rng, Dtype::f32);
  Tensor b = random_tensor({2, 3}, rng, Dtype::f32);
  Tensor m = random_tensor({3, 2}, rng, Dtype::f32);

  Tensor s = apply_primitive(PrimitiveKind::add, {a, b});
  CHECK(s.shape() == Shape{2, 3});
  CHECK(apply_primitive(PrimitiveKind::matmul, {a, m}).shape() == Shape{2, 2});
  PrimitiveAttrs attrs;
  attrs.c0 = 2.0;
  CHECK(apply_primitive(PrimitiveKind::scale, {a}, attrs).at(0) ==
        doctest::Approx(2.0 * a.at(0)));
  attrs.shape = {3, 2};
  CHECK(apply_primitive(PrimitiveKind::reshape, {a}, attrs).shape() == Shape{3, 2});
  attrs.labels = {0, 1};
  CHECK(apply_primitive(PrimitiveKind::softmax_xent, {a}, attrs).numel() == 1);
  CHECK(apply_primitive(PrimitiveKind::mean_rows, {a}).shape() == Shape{3});
  CHECK(apply_primitive(PrimitiveKind::concat_last_axis, {a, b}).shape() == Shape{2, 6});
}

TEST_CASE("maxpool tie-breaking keeps the lowest flat index") {
  Tensor x = Tensor::zeros({1, 1, 2, 2}, Dtype::f64);
  for (int64_t i = 0; i < 4; ++i) x.set(size_t(i), 1.0);  // fully tied window
  auto tape = Tape::make(Dtype::f64);
  ParamSet p;
  p.add("x", x);
  ParamSet a = tape->watch_all(p);
  Tensor y = maxpool2x2(a.at("x"));
  CHECK(y.numel() == 1);
  GradMap g = tape->backward(sum_all(y), a);
  CHECK(g.at("x").at(0) == 1.0);  // winner
  CHECK(g.at("x").at(1) == 0.0);
  CHECK(g.at("x").at(2) == 0.0);
  CHECK(g.at("x").at(3) == 0.0);
}
