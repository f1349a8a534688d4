#include <doctest.h>

#include <cmath>

#include "metafew/nn.hpp"
#include "test_util.hpp"

using namespace metafew;
using testutil::max_rel_err;
using testutil::random_tensor;

TEST_CASE("conv4 embedding dims") {
  Rng rng(1);
  SUBCASE("1x28x28 input embeds to (64): 28->14->7->3->1") {
    EncoderConfig cfg;
    cfg.variant = EncoderVariant::conv4;
    cfg.input = {1, 28, 28};
    ParamSet gamma = build_encoder(cfg, rng);
    Tensor x = random_tensor({3, 1, 28, 28}, rng, Dtype::f32);
    Tensor e = encode(cfg, gamma, x);
    CHECK(e.shape() == Shape{3, 64});
    CHECK(cfg.out_dim() == 64);
  }
  SUBCASE("3x84x84 input pools to a 5x5 map, then averages to (64)") {
    EncoderConfig cfg;
    cfg.variant = EncoderVariant::conv4;
    cfg.input = {3, 84, 84};
    ParamSet gamma = build_encoder(cfg, rng);
    Tensor x = random_tensor({2, 3, 84, 84}, rng, Dtype::f32, 0.0, 1.0);
    Tensor e = encode(cfg, gamma, x);
    CHECK(e.shape() == Shape{2, 64});
    // 84 -> 42 -> 21 -> 10 -> 5: global average pooling is in play
  }
  SUBCASE("input too small for four pooling stages is rejected") {
    EncoderConfig cfg;
    cfg.variant = EncoderVariant::conv4;
    cfg.input = {1, 15, 15};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("linear2d is the identity embedding") {
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::linear2d;
  cfg.input = {2};
  Rng rng(2);
  ParamSet gamma = build_encoder(cfg, rng);
  CHECK(gamma.size() == 0);
  Tensor x = random_tensor({5, 2}, rng, Dtype::f32);
  Tensor e = encode(cfg, gamma, x);
  REQUIRE(e.shape() == Shape{5, 2});
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(e.at(size_t(i)) == x.at(size_t(i)));
}

TEST_CASE("encoders preserve the row count") {
  Rng rng(3);
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::mlp;
  cfg.input = {7};
  cfg.hidden = 16;
  cfg.embed_dim = 8;
  ParamSet gamma = build_encoder(cfg, rng);
  for (int64_t rows : {1, 4, 9}) {
    Tensor e = encode(cfg, gamma, random_tensor({rows, 7}, rng, Dtype::f32));
    CHECK(e.shape()[0] == rows);
  }
}

TEST_CASE("permuting input rows permutes embeddings identically (batch norm off)") {
  Rng rng(4);
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::conv4;
  cfg.input = {1, 16, 16};
  cfg.channels = 8;
  cfg.use_batch_norm = false;
  ParamSet gamma = build_encoder(cfg, rng);
  Tensor x = random_tensor({6, 1, 16, 16}, rng, Dtype::f32);
  Tensor e = encode(cfg, gamma, x);

  std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
  Tensor xp = Tensor::zeros(x.shape(), Dtype::f32);
  int64_t img = 16 * 16;
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t i = 0; i < img; ++i) xp.set(size_t(r * img + i), x.at(size_t(perm[r] * img + i)));
  Tensor ep = encode(cfg, gamma, xp);
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t c = 0; c < 8; ++c)
      CHECK(ep.at(size_t(r * 8 + c)) == e.at(size_t(perm[r] * 8 + c)));
}

TEST_CASE("classify") {
  SUBCASE("zero head gives uniform softmax") {
    ParamSet head;
    head.add("W", Tensor::zeros({4, 5}, Dtype::f64));
    head.add("b", Tensor::zeros({5}, Dtype::f64));
    Rng rng(5);
    Tensor logits = classify(head, random_tensor({3, 4}, rng));
    Tensor p = softmax(logits);
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(p.at(size_t(i)) == doctest::Approx(0.2));
  }
  SUBCASE("1-d arithmetic case") {
    ParamSet head;
    head.add("W", Tensor::from({1, 2}, {1, -1}, Dtype::f64));
    head.add("b", Tensor::from({2}, {0, 1}, Dtype::f64));
    Tensor logits = classify(head, Tensor::from({1, 1}, {2}, Dtype::f64));
    CHECK(logits.at(0) == doctest::Approx(2.0));
    CHECK(logits.at(1) == doctest::Approx(-1.0));
  }
  SUBCASE("argmax invariant to a constant added to all biases") {
    Rng rng(6);
    ParamSet head = build_head(8, 5, rng, Dtype::f64);
    Tensor e = random_tensor({4, 8}, rng);
    Tensor l1 = classify(head, e);
    Tensor& b = head.at("b");
    for (int64_t i = 0; i < 5; ++i) b.set(size_t(i), b.at(size_t(i)) + 3.7);
    Tensor l2 = classify(head, e);
    for (int64_t r = 0; r < 4; ++r) {
      int64_t a1 = 0, a2 = 0;
      for (int64_t c = 1; c < 5; ++c) {
        if (l1.at(size_t(r * 5 + c)) > l1.at(size_t(r * 5 + a1))) a1 = c;
        if (l2.at(size_t(r * 5 + c)) > l2.at(size_t(r * 5 + a2))) a2 = c;
      }
      CHECK(a1 == a2);
    }
  }
  SUBCASE("width mismatch is an error") {
    Rng rng(7);
    ParamSet head = build_head(8, 5, rng);
    CHECK_THROWS_AS((void)classify(head, Tensor::zeros({2, 9}, Dtype::f32)), ShapeError);
  }
}

TEST_CASE("hypernetwork construction") {
  HyperNetConfig cfg;
  cfg.embed_dim = 64;
  cfg.n_way = 5;
  cfg.hidden = 32;
  Rng rng(8);
  SUBCASE("input width for embed 64, 5-way is 74") { CHECK(cfg.input_width() == 74); }
  SUBCASE("output width per class is head row width + 1") { CHECK(cfg.output_width() == 65); }
  SUBCASE("fresh hypernetwork maps any input to the zero update") {
    ParamSet eta = build_hypernetwork(cfg, rng);
    Tensor in = random_tensor({5, 74}, rng, Dtype::f32, -3.0, 3.0);
    Tensor out = hypernet_forward(cfg, eta, in);
    REQUIRE(out.shape() == Shape{5, 65});
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.at(size_t(i)) == 0.0);
  }
  SUBCASE("enhancement off narrows the input to embedding + one-hot") {
    HyperNetConfig plain = cfg;
    plain.enhancement = false;
    CHECK(plain.input_width() == 69);
  }
  SUBCASE("depth is pinned") {
    HyperNetConfig bad = cfg;
    bad.depth = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("init_params") {
  SUBCASE("biases zero, bn scales one") {
    Rng rng(9);
    EncoderConfig cfg;
    cfg.variant = EncoderVariant::conv4;
    cfg.input = {1, 16, 16};
    ParamSet g = build_encoder(cfg, rng);
    for (int64_t i = 0; i < g.at("conv1.b").numel(); ++i) CHECK(g.at("conv1.b").at(size_t(i)) == 0.0);
    for (int64_t i = 0; i < g.at("bn3.scale").numel(); ++i) CHECK(g.at("bn3.scale").at(size_t(i)) == 1.0);
    for (int64_t i = 0; i < g.at("bn2.shift").numel(); ++i) CHECK(g.at("bn2.shift").at(size_t(i)) == 0.0);
  }
  SUBCASE("same seed gives identical parameters") {
    EncoderConfig cfg;
    cfg.variant = EncoderVariant::mlp;
    cfg.input = {5};
    Rng r1(10), r2(10);
    ParamSet a = build_encoder(cfg, r1), b = build_encoder(cfg, r2);
    auto va = a.flatten(), vb = b.flatten();
    REQUIRE(va.size() == vb.size());
    for (size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
  }
  SUBCASE("weight standard deviation tracks the kaiming target") {
    // uniform(-sqrt(6/fan), sqrt(6/fan)) has std sqrt(2/fan)
    Rng rng(11);
    int64_t fan = 25;
    ParamSet p = init_params({{"w", {fan, 400}, InitKind::kaiming, fan}}, rng, Dtype::f64);
    REQUIRE(p.at("w").numel() == 10000);
    double mean = 0, var = 0;
    for (int64_t i = 0; i < 10000; ++i) mean += p.at("w").at(size_t(i));
    mean /= 10000;
    for (int64_t i = 0; i < 10000; ++i) {
      double d = p.at("w").at(size_t(i)) - mean;
      var += d * d;
    }
    var /= 9999;
    double target = std::sqrt(2.0 / double(fan));
    CHECK(std::abs(std::sqrt(var) - target) / target < 0.2);
  }
}

TEST_CASE("flatten/unflatten round-trips exactly") {
  Rng rng(12);
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::mlp;
  cfg.input = {6};
  cfg.hidden = 9;
  cfg.embed_dim = 4;
  ParamSet p = build_encoder(cfg, rng);
  auto v = p.flatten();
  ParamSet q = p.clone();
  for (auto& kv : q)
    for (int64_t i = 0; i < kv.second.numel(); ++i) kv.second.set(size_t(i), -1.0);
  q.unflatten(v);
  auto v2 = q.flatten();
  REQUIRE(v.size() == v2.size());
  for (size_t i = 0; i < v.size(); ++i) CHECK(v[i] == v2[i]);
}

TEST_CASE("gradcheck through full encoder graphs") {
  Rng rng(13);
  const double tol = 1e-4;

  SUBCASE("tiny conv4 + head") {
    EncoderConfig cfg;
    cfg.variant = EncoderVariant::conv4;
    cfg.input = {1, 16, 16};
    cfg.channels = 3;
    ParamSet gamma = build_encoder(cfg, rng, Dtype::f64);
    ParamSet head = build_head(3, 2, rng, Dtype::f64);
    ParamSet all = ParamSet::merged({&gamma, &head});
    // prefix-free merge needs distinct names; encoder and head name sets are disjoint
    Tensor x = random_tensor({3, 1, 16, 16}, rng);
    std::vector<int32_t> y = {0, 1, 0};

    auto build = [&](Tape& tape, const ParamSet& a) {
      ParamSet g(Role::encoder), h(Role::head);
      for (auto& kv : a) {
        if (kv.first == "W" || kv.first == "b")
          h.add(kv.first, kv.second);
        else
          g.add(kv.first, kv.second);
      }
      return softmax_xent(classify(h, encode(cfg, g, tape.constant(x))), y);
    };

    auto tape = Tape::make(Dtype::f64);
    ParamSet attached = tape->watch_all(all);
    GradMap got = tape->backward(build(*tape, attached), attached);
    GradMap want = finite_diff_grad(
        [&](const ParamSet& p) {
          auto t2 = Tape::make(Dtype::f64);
          ParamSet a2 = t2->watch_all(p);
          return build(*t2, a2).item();
        },
        all, 1e-4);
    CHECK(max_rel_err(got, want) < tol);
  }

  SUBCASE("mlp encoder + head") {
    EncoderConfig cfg;
    cfg.variant = EncoderVariant::mlp;
    cfg.input = {4};
    cfg.hidden = 6;
    cfg.embed_dim = 5;
    ParamSet gamma = build_encoder(cfg, rng, Dtype::f64);
    ParamSet head = build_head(5, 3, rng, Dtype::f64);
    ParamSet all = ParamSet::merged({&gamma, &head});
    Tensor x = random_tensor({4, 4}, rng);
    std::vector<int32_t> y = {0, 2, 1, 0};

    auto build = [&](Tape& tape, const ParamSet& a) {
      ParamSet g(Role::encoder), h(Role::head);
      for (auto& kv : a) {
        if (kv.first == "W" || kv.first == "b")
          h.add(kv.first, kv.second);
        else
          g.add(kv.first, kv.second);
      }
      return softmax_xent(classify(h, encode(cfg, g, tape.constant(x))), y);
    };

    auto tape = Tape::make(Dtype::f64);
    ParamSet attached = tape->watch_all(all);
    GradMap got = tape->backward(build(*tape, attached), attached);
    GradMap want = finite_diff_grad(
        [&](const ParamSet& p) {
          auto t2 = Tape::make(Dtype::f64);
          ParamSet a2 = t2->watch_all(p);
          return build(*t2, a2).item();
        },
        all, 1e-4);
    CHECK(max_rel_err(got, want) < tol);
  }
}
