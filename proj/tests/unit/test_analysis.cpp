#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mfil/analysis.hpp"
#include "mfil/error.hpp"
#include "mfil/ops.hpp"

using namespace mfil;
using namespace mfil::analysis;

namespace {

double max_rel(const Tensor<double>& a, const Tensor<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / den;
}

// Average each kernel with its left-right mirror: [.., .., kH, kW].
template <typename T>
void symmetrize(Tensor<T>& k) {
  const std::size_t kw = k.dim(k.rank() - 1);
  const std::size_t rows = k.numel() / kw;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < kw / 2; ++j) {
      T& a = k[r * kw + j];
      T& b = k[r * kw + kw - 1 - j];
      a = b = (a + b) / T(2);
    }
}

Tensor<double> mirror_columns(const Tensor<double>& g) {
  Tensor<double> out(g.shape());
  const std::size_t h = g.dim(0), w = g.dim(1);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = g[y * w + (w - 1 - x)];
  return out;
}

// With unit gammas the channel sum of a layer-norm output is constant, which would leave the
// cascade's field at roundoff level; random gammas give it a real signal.
void randomize_down_gammas(Backbone<double>& bb, Rng& rng) {
  for (double& g : bb.stem.norm.gamma.value.data()) g = rng.uniform(0.5, 1.5);
  for (auto& d : bb.downsamplers)
    for (double& g : d.norm.gamma.value.data()) g = rng.uniform(0.5, 1.5);
}

double center_sensitivity(const Backbone<double>& bb, std::size_t side) {
  Rng rng(99);
  Tape<double> tape(true);
  Context<double> ctx(tape);
  Var<double> x = tape.leaf(rng.normal_tensor<double>({1, 3, side, side}), true);
  ForwardOptions fo;
  fo.stop_stage = 3;
  fo.skip_blocks = true;
  Var<double> f = forward(ctx, x, bb, fo);
  const std::size_t c = f.dim(1), h = f.dim(2), w = f.dim(3);
  std::vector<std::size_t> idx;
  for (std::size_t q = 0; q < c; ++q) idx.push_back((q * h + h / 2) * w + w / 2);
  tape.backward(ops::sum(ops::gather(ops::reshape(f, {c * h * w}), 0, idx)));
  double mx = 0;
  for (double v : tape.grad(x.id()).data()) mx = std::max(mx, std::abs(v));
  return mx;
}

Tensor<double> logits_d(const Backbone<double>& bb, const Tensor<double>& image) {
  Tape<double> tape(false);
  Context<double> ctx(tape);
  Shape s{1};
  for (auto d : image.shape()) s.push_back(d);
  return forward(ctx, tape.constant(image.reshape(s)), bb).value();
}

}  // namespace

TEST_CASE("conv ablation field stays inside the composed receptive box") {
  auto cfg = VariantConfig::desk();
  cfg.block_kind = BlockKind::conv3x3;
  auto bb = Backbone<float>::build(cfg, 0);
  ErfOptions o;
  o.samples = 4;
  for (int s : {1, 3}) {
    o.stage = s;
    const auto map = erf(bb, o);
    std::size_t d = 0;
    for (int i = 0; i <= s; ++i) d += cfg.depths[i];
    const std::size_t bound = 4 * (std::size_t(1) << s) * (2 * d + 1);
    const auto [bh, bw] = support_box(map);
    INFO("stage " << s << " support " << bh << "x" << bw << " bound " << bound);
    CHECK(bh <= bound);
    CHECK(bw <= bound);
    CHECK(coverage(map) < 0.99);
  }
}

TEST_CASE("desk model field is global") {
  auto bb = Backbone<float>::build(VariantConfig::desk(), 0);
  ErfOptions o;
  o.samples = 16;
  const auto map = erf(bb, o);
  CHECK(map.normalized);
  CHECK(*std::max_element(map.grid.data().begin(), map.grid.data().end()) == doctest::Approx(1.0));
  for (double v : map.grid.data()) CHECK(v >= 0.0);
  CHECK(coverage(map) >= 0.99);
}

TEST_CASE("identity-configured blocks reproduce the stem and downsampler cascade") {
  auto bb = Backbone<double>::build(VariantConfig::desk(), 3);
  Rng rng(3);
  randomize_down_gammas(bb, rng);
  CHECK(center_sensitivity(bb, 64) > 1e-6);
  for (auto& stage : bb.stages)
    for (auto& blk : stage) {
      blk.out_proj.value.fill(0.0);
      blk.ffn.fc2_w.value.fill(0.0);
      blk.ffn.fc2_b.value.fill(0.0);
      blk.norm2.beta.value.fill(0.0);
    }
  ErfOptions o;
  o.input_size = 64;
  o.samples = 3;
  const auto with_blocks = erf(bb, o);
  o.skip_blocks = true;
  const auto cascade = erf(bb, o);
  CHECK(with_blocks.grid == cascade.grid);
}

TEST_CASE("field of the symmetrized cascade commutes with a horizontal flip") {
  // The row-major token scan is direction-dependent, so this holds for the convolutional cascade only.
  auto bb = Backbone<double>::build(VariantConfig::desk(), 4);
  Rng rng(4);
  randomize_down_gammas(bb, rng);
  auto raw = bb;
  symmetrize(bb.stem.weight.value);
  for (auto& d : bb.downsamplers) symmetrize(d.weight.value);
  CHECK(center_sensitivity(bb, 224) > 1e-6);
  ErfOptions o;
  o.input_size = 224;
  o.samples = 4;
  o.skip_blocks = true;
  const auto plain = erf(bb, o);
  o.mirror_inputs = true;
  const auto mirrored = erf(bb, o);
  CHECK(max_rel(mirrored.grid, mirror_columns(plain.grid)) <= 1e-5);
  // Without symmetrization the flip does not commute.
  o.mirror_inputs = false;
  const auto raw_plain = erf(raw, o);
  o.mirror_inputs = true;
  CHECK(max_rel(erf(raw, o).grid, mirror_columns(raw_plain.grid)) > 1e-3);
}

TEST_CASE("erf option errors") {
  auto bb = Backbone<float>::build(VariantConfig::desk(), 0);
  ErfOptions o;
  o.input_size = 64;
  o.stage = 4;
  CHECK_THROWS_AS(erf(bb, o), ShapeError);
  o.stage = -1;
  CHECK_THROWS_AS(erf(bb, o), ShapeError);
  o.stage = 3;
  o.samples = 0;
  CHECK_THROWS_AS(erf(bb, o), ConfigError);
}

TEST_CASE("coverage, support box and export formats") {
  ErfMap m;
  m.grid = Tensor<double>({4, 5});
  m.grid[1 * 5 + 1] = 1.0;
  m.grid[2 * 5 + 3] = 0.5;
  m.grid[3 * 5 + 3] = 1e-9;
  m.normalized = true;
  CHECK(coverage(m) == doctest::Approx(2.0 / 20.0));
  CHECK(coverage(m, 1e-10) == doctest::Approx(3.0 / 20.0));
  CHECK(support_box(m) == std::pair<std::size_t, std::size_t>{3, 3});

  const auto pgm = to_pgm(m.grid);
  const std::string head(pgm.begin(), pgm.begin() + 2);
  CHECK(head == "P5");
  const std::vector<unsigned char> pixels(pgm.end() - 20, pgm.end());
  CHECK(*std::max_element(pixels.begin(), pixels.end()) == 255);
  CHECK(pixels[2 * 5 + 3] == 128);
  CHECK(pixels[0] == 0);

  const auto text = matrix_text(m.grid);
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
  CHECK_THROWS_AS(to_pgm(Tensor<double>({2, 2, 2})), ShapeError);
}

TEST_CASE("input gradient matches finite differences") {
  auto bb = Backbone<float>::build(VariantConfig::desk(), 5);
  // Same function in double for the difference quotient, so f32 roundoff does not dominate.
  const auto bd = bb.cast<double>();
  Rng rng(5);
  const auto img = rng.normal_tensor<float>({3, 64, 64});
  const auto imgd = img.cast<double>();
  for (std::size_t cls : {0u, 3u}) {
    const auto g = input_gradient(bb, img, cls);
    const auto sal = saliency(bb, img, cls);
    CHECK(sal.shape() == Shape{64, 64});
    double scale = 0;
    for (float v : g.data()) scale = std::max(scale, double(std::abs(v)));
    for (int t = 0; t < 5; ++t) {
      const std::size_t i = rng.index(img.numel());
      auto up = imgd, dn = imgd;
      up[i] += 1e-4;
      dn[i] -= 1e-4;
      const double fd = (logits_d(bd, up)[cls] - logits_d(bd, dn)[cls]) / 2e-4;
      INFO("pixel " << i << " analytic " << g[i] << " fd " << fd);
      CHECK(std::abs(double(g[i]) - fd) <= 1e-3 * std::max(std::abs(fd), 1e-2 * scale));
    }
    for (std::size_t p = 0; p < 64 * 64; ++p) {
      float s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += std::abs(g[c * 64 * 64 + p]);
      CHECK(sal[p] == doctest::Approx(s).epsilon(1e-6));
      CHECK(sal[p] >= 0.0f);
    }
  }
  CHECK_THROWS_AS(saliency(bb, img, 4), ShapeError);
  CHECK_THROWS_AS(saliency(bb, rng.normal_tensor<float>({1, 3, 64, 64}), 0), ShapeError);
}

TEST_CASE("relabeling classes relabels the saliency maps") {
  auto bb = Backbone<float>::build(VariantConfig::desk(), 6);
  auto swapped = bb;
  const std::size_t c = bb.config.dims[3];
  for (std::size_t j = 0; j < c; ++j) std::swap(swapped.head_w.value[0 * c + j], swapped.head_w.value[2 * c + j]);
  std::swap(swapped.head_b.value[0], swapped.head_b.value[2]);
  Rng rng(6);
  const auto img = rng.normal_tensor<float>({3, 32, 32});
  CHECK(saliency(swapped, img, 0) == saliency(bb, img, 2));
  CHECK(saliency(swapped, img, 2) == saliency(bb, img, 0));
  CHECK(saliency(swapped, img, 1) == saliency(bb, img, 1));
}

TEST_CASE("gradcheck covers every group and passes on the desk model") {
  const auto r = gradcheck_suite(VariantConfig::desk(), 0);
  CHECK(r.pass);
  CHECK(r.coverage_ok);
  CHECK(r.failing().empty());
  auto bb = Backbone<double>::build(VariantConfig::desk(), 0);
  const auto params = bb.parameters();
  REQUIRE(r.groups.size() == params.size());
  std::size_t merge_groups = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(r.groups[i].name == params[i]->name);
    CHECK(r.groups[i].numel == params[i]->value.numel());
    if (r.groups[i].name.find("merge_w") != std::string::npos) {
      ++merge_groups;
      CHECK(r.groups[i].grad_norm > 0.0);
    }
  }
  CHECK(merge_groups == 5);
  CHECK(format(r).find("pass") != std::string::npos);
}

TEST_CASE("gradcheck names the groups behind a corrupted backward rule") {
  fault::arm("selective_scan");
  const auto r = gradcheck_suite(VariantConfig::desk(), 1);
  fault::disarm();
  CHECK_FALSE(r.pass);
  const auto bad = r.failing();
  CHECK(std::find(bad.begin(), bad.end(), "stage3.block0.scan.ssm.dt_bias") != bad.end());
  // The head sits downstream of every scan, so its gradient is untouched.
  CHECK(std::find(bad.begin(), bad.end(), "head.weight") == bad.end());
  CHECK(format(r).find("stage3.block0.scan.ssm.dt_bias") != std::string::npos);
}
