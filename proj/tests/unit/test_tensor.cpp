#include <doctest.h>

#include <cmath>

#include "fd.hpp"
#include "mfil/error.hpp"
#include "mfil/params.hpp"
#include "mfil/verify/oracles.hpp"

using namespace mfil;
using test::fd_rel_error;

namespace {

Tensor<double> value_of(const Var<double>& v) { return v.value(); }

}  // namespace

TEST_CASE("tensor layout is row-major with trailing-product strides") {
  Tensor<double> t({2, 3, 4});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(i);
  CHECK(t.numel() == 24);
  CHECK(t.at({1, 2, 3}) == 23.0);
  CHECK(t.at({1, 0, 2}) == 14.0);
  CHECK(t.offset({0, 1, 0}) == 4);
  CHECK_THROWS_AS(t.at({2, 0, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), ShapeError);
}

TEST_CASE("reshape then inverse reshape is the identity") {
  Rng rng(1);
  Tape<double> tape(false);
  const Tensor<double> x = rng.normal_tensor<double>({2, 3, 4});
  const Tensor<double> back = value_of(ops::reshape(ops::reshape(tape.constant(x), {4, 6}), {2, 3, 4}));
  CHECK(back == x);
  CHECK_THROWS_AS(ops::reshape(tape.constant(x), {5, 5}), ShapeError);
}

TEST_CASE("conv2d: sums of ones and disjoint block sums") {
  Tape<double> tape(false);
  const Tensor<double> y = value_of(ops::conv2d<double>(tape.constant(Tensor<double>::ones({1, 1, 3, 3})),
                                                        tape.constant(Tensor<double>::ones({1, 1, 3, 3})), std::nullopt, 1, 0));
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 9.0);

  Tensor<double> x({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const Tensor<double> p = value_of(ops::conv2d<double>(tape.constant(x), tape.constant(Tensor<double>::ones({1, 1, 2, 2})), std::nullopt, 2, 0));
  REQUIRE(p.shape() == Shape{1, 1, 2, 2});
  CHECK(p[0] == 0 + 1 + 4 + 5);
  CHECK(p[1] == 2 + 3 + 6 + 7);
  CHECK(p[2] == 8 + 9 + 12 + 13);
  CHECK(p[3] == 10 + 11 + 14 + 15);
}

TEST_CASE("conv2d matches the loop-nest oracle and reports bad shapes") {
  Rng rng(2);
  Tape<double> tape(false);
  const auto x = rng.normal_tensor<double>({1, 2, 5, 5});
  const auto k = rng.normal_tensor<double>({3, 2, 3, 3});
  const Tensor<double> y = value_of(ops::conv2d<double>(tape.constant(x), tape.constant(k), std::nullopt, 1, 0));
  CHECK(y.shape() == Shape{1, 3, 3, 3});
  CHECK(oracle::rel_error(y, oracle::conv2d(x, k, nullptr, 1, 0)) <= 1e-6);
  CHECK_THROWS_AS(ops::conv2d<double>(tape.constant(x), tape.constant(rng.normal_tensor<double>({3, 4, 3, 3})), std::nullopt, 1, 0), ShapeError);
  CHECK_THROWS_AS(ops::conv2d<double>(tape.constant(x), tape.constant(rng.normal_tensor<double>({3, 2, 7, 7})), std::nullopt, 1, 0), ShapeError);
  CHECK_THROWS_AS(ops::conv2d<double>(tape.constant(x), tape.constant(k), std::nullopt, 0, 0), ShapeError);
}

TEST_CASE("depthwise_conv2d isolates channels and has an identity kernel") {
  Rng rng(3);
  Tape<double> tape(false);
  auto x = rng.normal_tensor<double>({1, 2, 4, 5});
  for (std::size_t i = 20; i < 40; ++i) x[i] = 0.0;
  const auto k = rng.normal_tensor<double>({2, 1, 3, 3});
  const Tensor<double> y = value_of(ops::depthwise_conv2d<double>(tape.constant(x), tape.constant(k), std::nullopt, 1, 1));
  for (std::size_t i = 20; i < 40; ++i) CHECK(y[i] == 0.0);

  Tensor<double> id({2, 1, 3, 3});
  id[4] = id[13] = 1.0;
  CHECK(value_of(ops::depthwise_conv2d<double>(tape.constant(x), tape.constant(id), std::nullopt, 1, 1)) == x);

  const auto xr = rng.normal_tensor<double>({2, 3, 6, 6});
  const auto kr = rng.normal_tensor<double>({3, 1, 3, 3});
  const auto br = rng.normal_tensor<double>({3});
  CHECK(oracle::rel_error(value_of(ops::depthwise_conv2d<double>(tape.constant(xr), tape.constant(kr), tape.constant(br), 2, 1)),
                          oracle::depthwise_conv2d(xr, kr, &br, 2, 1)) <= 1e-6);
}

TEST_CASE("linear: identity, bias rows and the dot-product oracle") {
  Rng rng(4);
  Tape<double> tape(false);
  const auto x = rng.normal_tensor<double>({3, 4});
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  CHECK(value_of(ops::linear<double>(tape.constant(x), tape.constant(eye), tape.constant(Tensor<double>({4})))) == x);

  const auto b = rng.normal_tensor<double>({5});
  const Tensor<double> rows = value_of(ops::linear<double>(tape.constant(x), tape.constant(Tensor<double>({5, 4})), tape.constant(b)));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 5; ++j) CHECK(rows[r * 5 + j] == b[j]);

  const auto w = rng.normal_tensor<double>({5, 4});
  CHECK(oracle::rel_error(value_of(ops::linear<double>(tape.constant(x), tape.constant(w), std::nullopt)), oracle::linear(x, w, nullptr)) <= 1e-6);
  CHECK_THROWS_AS(ops::linear<double>(tape.constant(x), tape.constant(rng.normal_tensor<double>({5, 3})), std::nullopt), ShapeError);
}

TEST_CASE("layer_norm: constant rows, moments and the two-pass oracle") {
  Rng rng(5);
  Tape<double> tape(false);
  const auto ones = tape.constant(Tensor<double>::ones({6}));
  const auto zeros = tape.constant(Tensor<double>({6}));
  const Tensor<double> c = value_of(ops::layer_norm<double>(tape.constant(Tensor<double>({2, 6}, 3.7)), ones, zeros));
  for (double v : c.data()) CHECK(v == 0.0);

  const auto x = rng.normal_tensor<double>({4, 6}, 3.0);
  const Tensor<double> y = value_of(ops::layer_norm<double>(tape.constant(x), ones, zeros));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 6; ++j) m += y[r * 6 + j] / 6;
    for (std::size_t j = 0; j < 6; ++j) v += (y[r * 6 + j] - m) * (y[r * 6 + j] - m) / 6;
    CHECK(std::abs(m) <= 1e-6);
    CHECK(std::abs(v - 1.0) <= 1e-3);
  }
  const auto g = rng.normal_tensor<double>({6}), b = rng.normal_tensor<double>({6});
  CHECK(oracle::rel_error(value_of(ops::layer_norm<double>(tape.constant(x), tape.constant(g), tape.constant(b))),
                          oracle::layer_norm(x, g, b, 1e-5)) <= 1e-6);
  CHECK_THROWS_AS(ops::layer_norm<double>(tape.constant(x), ones, zeros, 0.0), NumericError);
}

TEST_CASE("activations: analytic values") {
  Tape<double> tape(false);
  const Tensor<double> s = value_of(ops::silu(tape.constant(Tensor<double>({3}, {0.0, 1.0, -2.0}))));
  CHECK(s[0] == 0.0);
  CHECK(s[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(s[2] == doctest::Approx(-2.0 / (1.0 + std::exp(2.0))));

  const Tensor<double> sm = value_of(ops::softmax(tape.constant(Tensor<double>({4}, 1.3)), 0));
  for (double v : sm.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  Rng rng(6);
  const auto x = rng.normal_tensor<double>({50}, 5.0);
  const Tensor<double> sp = value_of(ops::softplus(tape.constant(x)));
  for (std::size_t i = 0; i < 50; ++i) CHECK(sp[i] >= std::max(x[i], 0.0));
  CHECK(value_of(ops::softplus(tape.constant(Tensor<double>({1}, 0.0))))[0] == doctest::Approx(0.6931471805599453));
  CHECK(value_of(ops::gelu(tape.constant(Tensor<double>({1}, 0.0))))[0] == 0.0);
}

TEST_CASE("softmax sums to one for large logits on any axis") {
  Rng rng(7);
  Tape<double> tape(false);
  const auto x = rng.normal_tensor<double>({3, 4, 5}, 500.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const Tensor<double> y = value_of(ops::softmax(tape.constant(x), axis));
    CHECK(y.all_finite());
    const Tensor<double> sums = value_of(ops::mean_axis(tape.constant(y), axis));
    for (double v : sums.data()) CHECK(std::abs(v * static_cast<double>(x.dim(axis)) - 1.0) <= 1e-6);
    for (double v : y.data()) CHECK(v >= 0.0);
  }
}

TEST_CASE("backward: sum and half squared norm") {
  Rng rng(8);
  const auto x0 = rng.normal_tensor<double>({3, 2});
  {
    Tape<double> tape;
    auto x = tape.leaf(x0, true);
    tape.backward(ops::sum(x));
    for (double g : tape.grad(x.id()).data()) CHECK(g == 1.0);
  }
  {
    Tape<double> tape;
    auto x = tape.leaf(x0, true);
    tape.backward(ops::scale(ops::sum(ops::mul(x, x)), 0.5));
    CHECK(test::max_abs_diff(tape.grad(x.id()), x0) <= 1e-15);
  }
}

TEST_CASE("backward errors: non-scalar and detached losses") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({3}, 1.0), true);
  CHECK_THROWS_AS(tape.backward(ops::mul(x, x)), GradError);
  auto c = tape.constant(Tensor<double>({3}, 1.0));
  CHECK_THROWS_AS(tape.backward(ops::sum(c)), GradError);
}

TEST_CASE("non-participating parameters receive zero gradients") {
  Tape<double> tape;
  mfil::Context<double> ctx(tape);
  Param<double> used{"used", Tensor<double>({2}, 1.0)}, unused{"unused", Tensor<double>({3}, 1.0)};
  tape.backward(ops::sum(ctx.param(used)));
  const auto g = ctx.gradients({&used, &unused});
  CHECK(g.at("used")[0] == 1.0);
  REQUIRE(g.at("unused").shape() == Shape{3});
  for (double v : g.at("unused").data()) CHECK(v == 0.0);
}

TEST_CASE("forward ops refuse to propagate non-finite values") {
  Tape<double> tape(false);
  CHECK_THROWS_AS(ops::silu(tape.constant(Tensor<double>({2}, {1.0, NAN}))), NumericError);
  CHECK_THROWS_AS(ops::add(tape.constant(Tensor<double>({1}, INFINITY)), tape.constant(Tensor<double>({1}, 1.0))), NumericError);
}

TEST_CASE("every primitive's gradient matches central differences over 20 seeds") {
  using Fn = test::VarFn;
  struct Case {
    const char* name;
    Fn f;
    std::vector<Shape> shapes;
  };
  const std::vector<Case> cases = {
      {"add", [](Tape<double>&, const auto& v) { return ops::add(v[0], v[1]); }, {{2, 3}, {2, 3}}},
      {"sub", [](Tape<double>&, const auto& v) { return ops::sub(v[0], v[1]); }, {{2, 3}, {2, 3}}},
      {"mul", [](Tape<double>&, const auto& v) { return ops::mul(v[0], v[1]); }, {{2, 3}, {2, 3}}},
      {"add_bias", [](Tape<double>&, const auto& v) { return ops::add_bias(v[0], v[1]); }, {{2, 3, 4}, {4}}},
      {"mean_axis", [](Tape<double>&, const auto& v) { return ops::mean_axis(v[0], 1); }, {{2, 3, 4}}},
      {"permute", [](Tape<double>&, const auto& v) { return ops::permute(v[0], {2, 0, 1}); }, {{2, 3, 4}}},
      {"slice", [](Tape<double>&, const auto& v) { return ops::slice(v[0], 1, 1, 2); }, {{2, 4, 3}}},
      {"concat", [](Tape<double>&, const auto& v) { return ops::concat<double>({v[0], v[1]}, 1); }, {{2, 3}, {2, 2}}},
      {"gather", [](Tape<double>&, const auto& v) { return ops::gather(v[0], 0, {2, 0, 2}); }, {{3, 2}}},
      {"conv2d", [](Tape<double>&, const auto& v) { return ops::conv2d<double>(v[0], v[1], v[2], 2, 1); }, {{1, 2, 5, 5}, {3, 2, 3, 3}, {3}}},
      {"depthwise_conv2d", [](Tape<double>&, const auto& v) { return ops::depthwise_conv2d<double>(v[0], v[1], v[2], 1, 1); }, {{2, 3, 4, 4}, {3, 1, 3, 3}, {3}}},
      {"linear", [](Tape<double>&, const auto& v) { return ops::linear<double>(v[0], v[1], v[2]); }, {{3, 4}, {5, 4}, {5}}},
      {"layer_norm", [](Tape<double>&, const auto& v) { return ops::layer_norm<double>(v[0], v[1], v[2]); }, {{3, 6}, {6}, {6}}},
      {"silu", [](Tape<double>&, const auto& v) { return ops::silu(v[0]); }, {{2, 5}}},
      {"gelu", [](Tape<double>&, const auto& v) { return ops::gelu(v[0]); }, {{2, 5}}},
      {"softplus", [](Tape<double>&, const auto& v) { return ops::softplus(v[0]); }, {{2, 5}}},
      {"sigmoid", [](Tape<double>&, const auto& v) { return ops::sigmoid(v[0]); }, {{2, 5}}},
      {"softmax", [](Tape<double>&, const auto& v) { return ops::softmax(v[0], 0); }, {{4, 3}}},
      {"weighted_sum", [](Tape<double>&, const auto& v) { return ops::weighted_sum<double>({v[0], v[1]}, v[2]); }, {{2, 3}, {2, 3}, {2}}},
      {"cross_entropy",
       [](Tape<double>&, const auto& v) {
         static const int labels[] = {0, 2, 1};
         return ops::cross_entropy<double>(v[0], labels, 0.1);
       },
       {{3, 4}}},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 7919 + 1);
      std::vector<Tensor<double>> in;
      for (const auto& s : c.shapes) in.push_back(rng.normal_tensor<double>(s));
      worst = std::max(worst, fd_rel_error(c.f, in, rng));
    }
    INFO(c.name << " worst rel error " << worst);
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("the fault fixture corrupts exactly the armed backward rule") {
  Rng rng(9);
  const auto x = rng.normal_tensor<double>({2, 5});
  test::VarFn f = [](Tape<double>&, const auto& v) { return ops::silu(v[0]); };
  fault::arm("silu");
  const double broken = fd_rel_error(f, {x}, rng);
  fault::disarm();
  CHECK(broken > 1e-2);
  CHECK(fd_rel_error(f, {x}, rng) <= 1e-4);
}
