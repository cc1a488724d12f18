#include <doctest.h>

#include <cmath>

#include "mfil/backbone.hpp"
#include "mfil/error.hpp"

using namespace mfil;

namespace {

Tensor<float> logits_of(const Backbone<float>& bb, const Tensor<float>& x, const ForwardOptions& opts = {}) {
  Tape<float> tape(false);
  Context<float> ctx(tape);
  return forward(ctx, tape.constant(x), bb, opts).value();
}

std::size_t tally(Backbone<float>& bb) {
  std::size_t n = 0;
  for (auto* p : bb.parameters()) n += p->value.numel();
  return n;
}

}  // namespace

TEST_CASE("named variants carry the published widths and depths") {
  const auto t = VariantConfig::tiny();
  CHECK(t.dims == std::array<std::size_t, 4>{94, 188, 376, 752});
  CHECK(t.depths == std::array<std::size_t, 4>{1, 3, 8, 2});
  const auto s = VariantConfig::small();
  CHECK(s.dims == t.dims);
  CHECK(s.depths == std::array<std::size_t, 4>{2, 2, 18, 2});
  CHECK(VariantConfig::base().dims == std::array<std::size_t, 4>{128, 256, 512, 1024});
  const auto d = VariantConfig::desk();
  CHECK(d.dims == std::array<std::size_t, 4>{8, 16, 32, 64});
  CHECK(d.depths == std::array<std::size_t, 4>{1, 1, 2, 1});
  for (const auto& v : {t, s, VariantConfig::base(), d}) {
    CHECK(v.d_state == 1);
    CHECK(v.ssm_ratio == 1.0);
    for (std::size_t i = 0; i + 1 < 4; ++i) CHECK(v.dims[i + 1] == 2 * v.dims[i]);
  }
  CHECK(VariantConfig::named("small").depths == s.depths);
  CHECK_THROWS_AS(VariantConfig::named("huge"), ConfigError);
}

TEST_CASE("spatial trace follows the halving law") {
  CHECK(spatial_trace(224) == std::vector<std::size_t>{56, 28, 14, 7, 7});
  CHECK(spatial_trace(64) == std::vector<std::size_t>{16, 8, 4, 2, 2});
  CHECK(spatial_trace(32) == std::vector<std::size_t>{8, 4, 2, 1, 1});
  CHECK_THROWS_AS(spatial_trace(100), ShapeError);

  auto bb = Backbone<float>::build(VariantConfig::desk(), 1);
  Rng rng(1);
  std::vector<std::size_t> trace;
  ForwardOptions opts;
  opts.trace = &trace;
  CHECK(logits_of(bb, rng.normal_tensor<float>({2, 3, 64, 64}), opts).shape() == Shape{2, 4});
  CHECK(trace == std::vector<std::size_t>{16, 8, 4, 2, 2});

  // Non-square inputs halve each axis independently.
  for (int s = 0; s < 4; ++s) {
    ForwardOptions stop;
    stop.stop_stage = s;
    const auto f = logits_of(bb, rng.normal_tensor<float>({1, 3, 32, 96}), stop);
    CHECK(f.shape() == Shape{1, bb.config.dims[s], std::size_t(8 >> s), std::size_t(24 >> s)});
  }
}

TEST_CASE("softmax of the logits sums to one") {
  auto bb = Backbone<float>::build(VariantConfig::desk(), 2);
  Rng rng(2);
  const auto logits = logits_of(bb, rng.normal_tensor<float>({3, 3, 32, 32}));
  for (std::size_t b = 0; b < 3; ++b) {
    double mx = -1e30, z = 0;
    for (std::size_t k = 0; k < 4; ++k) mx = std::max(mx, double(logits[b * 4 + k]));
    for (std::size_t k = 0; k < 4; ++k) z += std::exp(double(logits[b * 4 + k]) - mx);
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) s += std::exp(double(logits[b * 4 + k]) - mx) / z;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("closed-form parameter count equals the instantiated tally") {
  auto desk = Backbone<float>::build(VariantConfig::desk(), 3);
  CHECK(count_params(VariantConfig::desk()) == tally(desk));
  CHECK(desk.parameter_count() == tally(desk));

  VariantConfig c;
  c.dims = {6, 10, 20, 24};
  c.depths = {2, 1, 1, 3};
  c.d_state = 3;
  c.ssm_ratio = 1.5;
  c.ffn_ratio = 2;
  c.num_classes = 7;
  for (ScanMode m : {ScanMode::multi_filter, ScanMode::single_flatten, ScanMode::cross_4dir,
                     ScanMode::orig_plus_one}) {
    for (bool aw : {true, false}) {
      c.scan_mode = m;
      c.adaptive_weighting = aw;
      auto bb = Backbone<float>::build(c, 4);
      INFO(to_string(m) << " adaptive " << aw);
      CHECK(count_params(c) == tally(bb));
    }
  }
  c.block_kind = BlockKind::conv3x3;
  auto conv = Backbone<float>::build(c, 4);
  CHECK(count_params(c) == tally(conv));
}

TEST_CASE("published parameter totals within tolerance") {
  CHECK(std::abs(double(count_params(VariantConfig::tiny())) / 33.5e6 - 1.0) <= 0.10);
  CHECK(std::abs(double(count_params(VariantConfig::small())) / 50.6e6 - 1.0) <= 0.10);
  CHECK(std::abs(double(count_params(VariantConfig::base())) / 93.1e6 - 1.0) <= 0.10);
  CHECK(std::abs(count_flops(VariantConfig::tiny(), 224, 224) / 5.6e9 - 1.0) <= 0.20);
}

TEST_CASE("builds are deterministic per seed") {
  auto a = Backbone<float>::build(VariantConfig::desk(), 11);
  auto b = Backbone<float>::build(VariantConfig::desk(), 11);
  auto c = Backbone<float>::build(VariantConfig::desk(), 12);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value == pb[i]->value);
    any_diff = any_diff || !(pa[i]->value == pc[i]->value);
  }
  CHECK(any_diff);
  Rng rng(5);
  const auto x = rng.normal_tensor<float>({2, 3, 64, 64});
  CHECK(logits_of(a, x) == logits_of(b, x));
}

TEST_CASE("ablation switches change the count as documented") {
  const auto base = VariantConfig::desk();
  std::size_t blocks = 0;
  for (auto d : base.depths) blocks += d;
  auto no_aw = base;
  no_aw.adaptive_weighting = false;
  CHECK(count_params(base) - count_params(no_aw) == 4 * blocks);

  auto flat = base;
  flat.scan_mode = ScanMode::single_flatten;
  std::size_t bank = 0;
  for (int s = 0; s < 4; ++s) bank += base.depths[s] * FilterBank<float>::param_count(base.dims[s], base.scan_mode);
  CHECK(FilterBank<float>::param_count(8, ScanMode::single_flatten) == 0);
  // The flat path has neither the filter bank nor the merge weights.
  CHECK(count_params(base) - count_params(flat) == bank + 4 * blocks);
}

TEST_CASE("logits stay finite for inputs in [-3, 3]") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto bb = Backbone<float>::build(VariantConfig::desk(), seed);
    Rng rng(seed + 50);
    for (float v : logits_of(bb, rng.uniform_tensor<float>({2, 3, 64, 64}, -3.0, 3.0)).data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("input and configuration errors") {
  auto bb = Backbone<float>::build(VariantConfig::desk(), 6);
  Rng rng(6);
  CHECK_THROWS_AS(logits_of(bb, rng.normal_tensor<float>({1, 3, 48, 64})), ShapeError);
  CHECK_THROWS_AS(logits_of(bb, rng.normal_tensor<float>({1, 3, 64, 40})), ShapeError);
  CHECK_THROWS_AS(logits_of(bb, rng.normal_tensor<float>({1, 1, 64, 64})), ShapeError);
  ForwardOptions bad;
  bad.stop_stage = 4;
  CHECK_THROWS_AS(logits_of(bb, rng.normal_tensor<float>({1, 3, 32, 32}), bad), ShapeError);
  CHECK_THROWS_AS(count_flops(VariantConfig::desk(), 50, 64), ShapeError);

  auto c = VariantConfig::desk();
  c.depths[2] = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(Backbone<float>::build(c, 0), ConfigError);
  c = VariantConfig::desk();
  c.dims = {8, 16, 16, 64};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = VariantConfig::desk();
  c.ssm_ratio = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = VariantConfig::desk();
  c.drop_path = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(VariantConfig::desk().validate());
}

TEST_CASE("FLOPs scale with the spatial area and match the counter") {
  const auto d = VariantConfig::desk();
  const double f64 = count_flops(d, 64, 64);
  CHECK(std::abs(count_flops(d, 128, 64) / f64 - 2.0) / 2.0 <= 0.05);
  CHECK(std::abs(count_flops(d, 128, 128) / f64 - 4.0) / 4.0 <= 0.05);

  for (auto kind : {BlockKind::mfil, BlockKind::conv3x3}) {
    auto cfg = d;
    cfg.block_kind = kind;
    auto bb = Backbone<float>::build(cfg, 7);
    Rng rng(7);
    const auto x = rng.normal_tensor<float>({1, 3, 64, 64});
    FlopCounter::reset();
    logits_of(bb, x);
    const double counted = FlopCounter::total();
    CHECK(std::abs(counted - count_flops(cfg, 64, 64)) / counted <= 1e-3);
  }
}

TEST_CASE("precision cast preserves the function") {
  auto bb = Backbone<float>::build(VariantConfig::desk(), 8);
  auto dbl = bb.cast<double>();
  Rng rng(8);
  const auto x = rng.normal_tensor<float>({1, 3, 32, 32});
  const auto lf = logits_of(bb, x);
  Tape<double> tape(false);
  Context<double> ctx(tape);
  const Tensor<double> ld = forward(ctx, tape.constant(x.cast<double>()), dbl).value();
  for (std::size_t i = 0; i < 4; ++i) CHECK(double(lf[i]) == doctest::Approx(ld[i]).epsilon(1e-4));
}
