#include "mfil/verify/suites.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mfil/analysis.hpp"
#include "mfil/checkpoint.hpp"
#include "mfil/ops.hpp"
#include "mfil/theory.hpp"
#include "mfil/verify/oracles.hpp"

namespace mfil::verify {

namespace {

using Clock = std::chrono::steady_clock;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

class Recorder {
 public:
  explicit Recorder(std::string name) : start_(Clock::now()) { r_.name = std::move(name); }

  void detail(const std::string& key, const std::string& value) { r_.details.push_back(key + ": " + value); }
  void detail(const std::string& key, double value) { detail(key, sci(value)); }

  bool check(const std::string& what, bool ok) {
    if (!ok) r_.failures.push_back(what);
    return ok;
  }

  SuiteResult finish() {
    r_.pass = r_.failures.empty();
    r_.seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    return r_;
  }

 private:
  SuiteResult r_;
  Clock::time_point start_;
};

std::vector<double> normal_vec(Rng& rng, std::size_t n, double sd = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

}  // namespace

SuiteResult lti_equivalence_suite(std::uint64_t seed) {
  Recorder rec("lti_equivalence");
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t n = 1 + rng.index(4), len = 1 + rng.index(64);
    std::vector<double> a(n), b = normal_vec(rng, n), c = normal_vec(rng, n);
    for (double& v : a) v = -rng.uniform(0.05, 2.0);
    const double delta = rng.uniform(0.01, 1.0);
    const std::vector<double> x = normal_vec(rng, len);
    const auto z = ssm::discretize_zoh_diagonal(a, b, delta);
    const auto rec_y = ssm::scan_recurrent_diagonal(z.a_bar, z.b_bar, c, x);
    const auto conv_y = ssm::causal_conv(x, ssm::lti_kernel_diagonal(z.a_bar, z.b_bar, c, len));
    worst = std::max(worst, oracle::rel_error(conv_y, rec_y));
  }
  // Dense (non-diagonal) stable systems through the general path.
  double worst_dense = 0.0;
  for (int k = 0; k < 10; ++k) {
    const std::size_t n = 2 + rng.index(3), len = 1 + rng.index(64);
    linalg::Matrix m({n, n});
    for (double& v : m.data()) v = rng.normal(0.0, 0.5);
    linalg::Matrix a = linalg::scaled(linalg::plus(linalg::matmul(m, linalg::transpose(m)), linalg::scaled(linalg::identity(n), 0.5)), -1.0);
    linalg::Matrix b({n, 1}, normal_vec(rng, n)), c({1, n}, normal_vec(rng, n));
    const auto z = ssm::discretize_zoh(a, b, rng.uniform(0.01, 0.5));
    const std::vector<double> x = normal_vec(rng, len);
    const auto rec_y = ssm::scan_recurrent(z.a_bar, z.b_bar, c, x);
    const auto conv_y = ssm::causal_conv(x, ssm::lti_kernel(z.a_bar, z.b_bar, c, len));
    worst_dense = std::max(worst_dense, oracle::rel_error(conv_y, rec_y));
  }
  rec.detail("systems", "100 diagonal + 10 dense");
  rec.detail("max_rel_error_diagonal", worst);
  rec.detail("max_rel_error_dense", worst_dense);
  rec.check("diagonal kernel vs recurrence rel <= 1e-6", worst <= 1e-6);
  rec.check("dense kernel vs recurrence rel <= 1e-6", worst_dense <= 1e-6);
  return rec.finish();
}

SuiteResult zoh_suite() {
  Recorder rec("zoh");
  const double ln2 = std::numbers::ln2;
  const auto dense = ssm::discretize_zoh(linalg::Matrix({1, 1}, {-1.0}), linalg::Matrix({1, 1}, {1.0}), ln2);
  const double a = -1.0, b = 1.0;
  const auto diag = ssm::discretize_zoh_diagonal(std::span<const double>(&a, 1), std::span<const double>(&b, 1), ln2);
  const double err = std::max({std::abs(dense.a_bar[0] - 0.5), std::abs(dense.b_bar[0] - 0.5),
                               std::abs(diag.a_bar[0] - 0.5), std::abs(diag.b_bar[0] - 0.5)});
  rec.detail("analytic_case_abs_error", err);
  rec.check("a=-1, delta=ln2 gives A_bar=B_bar=0.5 within 1e-12", err <= 1e-12);

  double limit_worst = 0.0;
  const double la = -1.3, lb = 0.7;
  for (double delta : {1e-7, 1e-9, 1e-12}) {
    const auto z = ssm::discretize_zoh_diagonal(std::span<const double>(&la, 1), std::span<const double>(&lb, 1), delta);
    const auto zd = ssm::discretize_zoh(linalg::Matrix({1, 1}, {la}), linalg::Matrix({1, 1}, {lb}), delta);
    for (double bb : {z.b_bar[0], zd.b_bar[0]}) limit_worst = std::max(limit_worst, std::abs(bb - delta * lb) / (delta * std::abs(lb)));
    for (double ab : {z.a_bar[0], zd.a_bar[0]}) limit_worst = std::max(limit_worst, std::abs(ab - (1.0 + delta * la)) / std::abs(1.0 + delta * la));
  }
  rec.detail("first_order_limit_rel_error", limit_worst);
  rec.check("delta->0 first-order limit rel <= 1e-6", limit_worst <= 1e-6);

  // A diagonal matrix through the dense path agrees with the elementwise path.
  std::vector<double> av{-0.3, -1.0, -2.5}, bv{0.4, -1.2, 2.0};
  linalg::Matrix am({3, 3}), bm({3, 1}, bv);
  for (std::size_t i = 0; i < 3; ++i) am[i * 4] = av[i];
  const auto dz = ssm::discretize_zoh(am, bm, 0.37);
  const auto ez = ssm::discretize_zoh_diagonal(av, bv, 0.37);
  double cross = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    cross = std::max(cross, std::abs(dz.a_bar[i * 4] - ez.a_bar[i]));
    cross = std::max(cross, std::abs(dz.b_bar[i] - ez.b_bar[i]));
  }
  rec.detail("dense_vs_diagonal_abs_error", cross);
  rec.check("dense and diagonal discretization agree within 1e-12", cross <= 1e-12);
  return rec.finish();
}

SuiteResult scan_fast_path_suite(std::uint64_t seed) {
  Recorder rec("scan_fast_path");
  Rng rng(seed);
  double worst_fast = 0.0, worst_oracle = 0.0;
  for (int k = 0; k < 50; ++k) {
    const std::size_t bs = 1 + rng.index(2), len = 1 + rng.index(128), ch = 1 + rng.index(8), n = 1 + rng.index(2);
    Tape<double> tape(false);
    auto x = rng.normal_tensor<double>({bs, len, ch});
    auto dt = rng.uniform_tensor<double>({bs, len, ch}, 1e-3, 2.0);
    auto al = rng.normal_tensor<double>({ch, n}, 0.5);
    auto b = rng.normal_tensor<double>({bs, len, n});
    auto c = rng.normal_tensor<double>({bs, len, n});
    auto d = rng.normal_tensor<double>({ch});
    ssm::ScanOptions o;
    o.exact_zoh_b = rng.uniform() < 0.5;
    o.segment_length = rng.uniform() < 0.3 ? 1 + rng.index(len) : 0;
    const std::size_t chunks[] = {1, 7, 16, 64};
    o.chunk = chunks[rng.index(4)];
    auto run = [&](bool chunked) {
      o.chunked = chunked;
      return ssm::selective_scan_core<double>(tape.constant(x), tape.constant(dt), tape.constant(al), tape.constant(b),
                                              tape.constant(c), tape.constant(d), o)
          .value();
    };
    const Tensor<double> fast = run(true), ref = run(false);
    const Tensor<double> orc = oracle::selective_scan(x, dt, al, b, c, &d, o.exact_zoh_b, o.segment_length);
    worst_fast = std::max(worst_fast, oracle::rel_error(fast, ref));
    worst_oracle = std::max(worst_oracle, oracle::rel_error(ref, orc));
  }
  rec.detail("cases", "50");
  rec.detail("fast_vs_reference_rel_error", worst_fast);
  rec.detail("reference_vs_scalar_oracle_rel_error", worst_oracle);
  rec.check("chunked path equals sequential reference rel <= 1e-5", worst_fast <= 1e-5);
  rec.check("sequential reference equals scalar oracle rel <= 1e-10", worst_oracle <= 1e-10);
  return rec.finish();
}

SuiteResult gradcheck_suite() {
  Recorder rec("gradcheck");
  for (std::uint64_t s : kGradcheckSeeds) {
    const auto r = analysis::gradcheck_suite(VariantConfig::desk(), s);
    double worst = 0.0, w_norm = 0.0;
    bool has_w = false;
    for (const auto& g : r.groups) {
      worst = std::max(worst, g.max_rel_error);
      if (g.name.find("merge_w") != std::string::npos) {
        has_w = true;
        w_norm = std::max(w_norm, g.grad_norm);
      }
    }
    const std::string tag = "seed " + std::to_string(s);
    rec.detail(tag + " groups", std::to_string(r.groups.size()));
    rec.detail(tag + " worst_rel_error", worst);
    rec.detail(tag + " merge_w_grad_norm", w_norm);
    std::string failing;
    for (const auto& f : r.failing()) failing += (failing.empty() ? "" : ",") + f;
    if (!failing.empty()) rec.detail(tag + " failing", failing);
    rec.check(tag + ": every group rel <= 1e-4" + (failing.empty() ? "" : " (" + failing + ")"), r.pass);
    rec.check(tag + ": coverage of the parameter registry", r.coverage_ok);
    rec.check(tag + ": merge weights present with nonzero gradient", has_w && w_norm > 0.0);
  }
  return rec.finish();
}

SuiteResult covariance_suite(std::uint64_t seed) {
  Recorder rec("covariance");
  using namespace theory;
  Rng rng(seed);
  const std::size_t h = 6, w = 6, d = h * w, n = 200;
  linalg::Matrix mix({d, d});
  for (double& v : mix.data()) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  const std::vector<double> mu = normal_vec(rng, d);
  std::vector<std::vector<double>> samples;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> x = linalg::matvec(mix, normal_vec(rng, d));
    for (std::size_t i = 0; i < d; ++i) x[i] += mu[i];
    samples.push_back(std::move(x));
  }
  const EmpiricalMoments mom = empirical_moments(samples);
  const double asym = linalg::max_abs_diff(mom.covariance, linalg::transpose(mom.covariance));
  const double min_eig = linalg::jacobi_eigen(mom.covariance).values.front();
  rec.detail("covariance_asymmetry", asym);
  rec.detail("covariance_min_eigenvalue", min_eig);
  rec.check("sample covariance symmetric", asym <= 1e-10);
  rec.check("sample covariance PSD", min_eig >= -1e-8);

  auto random_perm = [&]() {
    Traversal t(d);
    std::iota(t.begin(), t.end(), 0);
    for (std::size_t i = d; i > 1; --i) std::swap(t[i - 1], t[rng.index(i)]);
    return permutation_matrix(t);
  };
  std::vector<LinearOperatorMatrix> perms{permutation_matrix(row_major_traversal(h, w)),
                                          permutation_matrix(column_major_traversal(h, w)),
                                          permutation_matrix(reversed(row_major_traversal(h, w))),
                                          permutation_matrix(reversed(column_major_traversal(h, w)))};
  while (perms.size() < 8) perms.push_back(random_perm());
  double perm_worst = 0.0, orth_worst = 0.0;
  for (std::size_t k = 0; k < 10; ++k) {
    const auto& pi = perms[k % perms.size()];
    const auto& pj = perms[(3 * k + 1) % perms.size()];
    perm_worst = std::max(perm_worst, verify_permutation_identity(pi, pj, mom, samples).max_abs_error);
  }
  for (const auto& p : perms) {
    orth_worst = std::max(orth_worst, linalg::max_abs_diff(linalg::matmul(linalg::transpose(p.matrix), p.matrix), linalg::identity(d)));
  }

  auto rand_kernel = [&]() { return rng.normal_tensor<double>({3, 3}); };
  std::vector<LinearOperatorMatrix> filters{conv_as_matrix(sobel_x_kernel(), h, w, 1), conv_as_matrix(sobel_y_kernel(), h, w, 1),
                                            conv_as_matrix(Tensor<double>({1, 1}, {1.0}), h, w, 0),
                                            conv_as_matrix(Tensor<double>({1, 1}, {2.5}), h, w, 0)};
  while (filters.size() < 8) filters.push_back(conv_as_matrix(rand_kernel(), h, w, 1));
  double filt_worst = 0.0;
  for (std::size_t k = 0; k < 10; ++k) {
    const auto& fi = filters[k % filters.size()];
    const auto& fj = filters[(5 * k + 1) % filters.size()];
    filt_worst = std::max(filt_worst, verify_filter_identity(fi, fj, mom, samples).max_abs_error);
  }
  rec.detail("grid", "6x6");
  rec.detail("samples", std::to_string(n));
  rec.detail("operator_pairs", "10 permutation + 10 filter");
  rec.detail("permutation_identity_max_abs_error", perm_worst);
  rec.detail("filter_identity_max_abs_error", filt_worst);
  rec.detail("permutation_orthogonality_error", orth_worst);
  rec.check("reordering identity max-abs <= 1e-10", perm_worst <= 1e-10);
  rec.check("filter identity max-abs <= 1e-10", filt_worst <= 1e-10);
  rec.check("P^T P = I within 1e-12", orth_worst <= 1e-12);

  const SpectrumReport sp = spectrum_report(mom.covariance, random_perm(), filters[0]);
  rec.detail("permutation_spectral_distance", sp.permutation_distance);
  rec.detail("sobel_spectral_distance", sp.filter_distance);
  rec.check("permutation spectrum invariant within 1e-8", sp.permutation_distance <= 1e-8);
  rec.check("Sobel spectrum differs by more than 1e-3", sp.filter_distance > 1e-3);
  return rec.finish();
}

SuiteResult structure_suite() {
  Recorder rec("structure");
  struct Ref {
    VariantConfig cfg;
    std::array<std::size_t, 4> dims, depths;
    double params, flops;
  };
  const Ref refs[] = {
      {VariantConfig::tiny(), {94, 188, 376, 752}, {1, 3, 8, 2}, 33.5e6, 5.6e9},
      {VariantConfig::small(), {94, 188, 376, 752}, {2, 2, 18, 2}, 50.6e6, 9.1e9},
      {VariantConfig::base(), {128, 256, 512, 1024}, {2, 2, 18, 2}, 93.1e6, 16.8e9},
  };
  for (const auto& r : refs) {
    const double p = static_cast<double>(count_params(r.cfg)), f = count_flops(r.cfg, 224, 224);
    const double dp = (p - r.params) / r.params, df = (f - r.flops) / r.flops;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.2fM (ref %.1fM, %+.1f%%), %.2fG (ref %.1fG, %+.1f%%)", p / 1e6, r.params / 1e6,
                  100 * dp, f / 1e9, r.flops / 1e9, 100 * df);
    rec.detail(r.cfg.name, buf);
    rec.check(r.cfg.name + " dims", r.cfg.dims == r.dims);
    rec.check(r.cfg.name + " depths", r.cfg.depths == r.depths);
    rec.check(r.cfg.name + " params within 10%", std::abs(dp) <= 0.10);
    rec.check(r.cfg.name + " flops within 20%", std::abs(df) <= 0.20);
  }
  const std::vector<std::size_t> t224 = spatial_trace(224);
  rec.check("224 trace [56,28,14,7,7]", t224 == std::vector<std::size_t>{56, 28, 14, 7, 7});

  const VariantConfig desk = VariantConfig::desk();
  Backbone<float> bb = Backbone<float>::build(desk, 0);
  rec.detail("desk_params", std::to_string(bb.parameter_count()));
  rec.check("desk analytic count equals instantiated tally", bb.parameter_count() == count_params(desk));

  Rng rng(9);
  Tape<float> tape(false);
  Context<float> ctx(tape);
  std::vector<std::size_t> trace;
  ForwardOptions fo;
  fo.trace = &trace;
  FlopCounter::reset();
  Var<float> logits = forward(ctx, tape.constant(rng.normal_tensor<float>({1, 3, 64, 64})), bb, fo);
  const double counted = FlopCounter::total(), analytic = count_flops(desk, 64, 64);
  const double rel = std::abs(counted - analytic) / counted;
  rec.detail("desk_flops_64", sci(analytic) + " analytic, " + sci(counted) + " counted");
  rec.check("desk 64 trace [16,8,4,2,2]", trace == std::vector<std::size_t>{16, 8, 4, 2, 2});
  rec.check("desk flops vs instrumented counter rel <= 1e-3", rel <= 1e-3);
  rec.check("logits shape [1,4]", logits.shape() == Shape{1, 4});

  VariantConfig flat = desk;
  flat.scan_mode = ScanMode::single_flatten;
  VariantConfig noadapt = desk;
  noadapt.adaptive_weighting = false;
  std::size_t blocks = 0;
  for (std::size_t d : desk.depths) blocks += d;
  rec.check("no adaptive weighting removes 4 scalars per block", count_params(desk) - count_params(noadapt) == 4 * blocks);
  rec.check("single_flatten removes the filter bank", count_params(flat) < count_params(noadapt));
  return rec.finish();
}

SuiteResult adaptive_merge_suite(std::uint64_t seed) {
  Recorder rec("adaptive_merge");
  Rng rng(seed);
  double sum_err = 0.0, hull_violation = 0.0, alpha_min = 1.0;
  for (int k = 0; k < 20; ++k) {
    AdaptiveWeights<double> aw = AdaptiveWeights<double>::init("w", 4);
    for (double& v : aw.w.value.data()) v = rng.normal(0.0, k < 10 ? 1.0 : 30.0);
    const Tensor<double> a = aw.alpha();
    double s = 0.0;
    for (double v : a.data()) {
      s += v;
      alpha_min = std::min(alpha_min, v);
    }
    sum_err = std::max(sum_err, std::abs(s - 1.0));
    Tape<double> tape(false);
    Context<double> ctx(tape);
    std::vector<Var<double>> maps;
    for (int i = 0; i < 4; ++i) maps.push_back(tape.constant(rng.normal_tensor<double>({2, 3, 4, 4})));
    const Tensor<double> fused = adaptive_merge(ctx, maps, aw).value();
    for (std::size_t e = 0; e < fused.numel(); ++e) {
      double lo = INFINITY, hi = -INFINITY;
      for (const auto& m : maps) lo = std::min(lo, m.value()[e]), hi = std::max(hi, m.value()[e]);
      hull_violation = std::max({hull_violation, lo - fused[e], fused[e] - hi});
    }
  }
  rec.detail("alpha_sum_error", sum_err);
  rec.detail("hull_violation", std::max(hull_violation, 0.0));
  rec.check("sum alpha = 1 +- 1e-6", sum_err <= 1e-6);
  rec.check("alpha in (0,1) for moderate logits", alpha_min >= 0.0);
  rec.check("fused output inside the convex hull", hull_violation <= 1e-12);

  Tape<double> tape(false);
  Context<double> ctx(tape);
  std::vector<Var<double>> maps;
  for (int i = 0; i < 4; ++i) maps.push_back(tape.constant(rng.normal_tensor<double>({1, 2, 3, 3})));
  AdaptiveWeights<double> zero = AdaptiveWeights<double>::init("w", 4);
  const Tensor<double> fz = adaptive_merge(ctx, maps, zero).value();
  double mean_err = 0.0;
  for (std::size_t e = 0; e < fz.numel(); ++e) {
    double m = 0.0;
    for (const auto& v : maps) m += v.value()[e];
    mean_err = std::max(mean_err, std::abs(fz[e] - m / 4.0));
  }
  rec.detail("uniform_at_zero_error", mean_err);
  rec.check("w = 0 gives the elementwise mean", mean_err <= 1e-12);

  AdaptiveWeights<double> sat = AdaptiveWeights<double>::init("w", 4);
  sat.w.value[0] = 50.0;
  const Tensor<double> saturated = adaptive_merge(ctx, maps, sat).value();
  const double sat_err = oracle::rel_error(saturated, maps[0].value());
  rec.detail("saturation_rel_error", sat_err);
  rec.check("w = [50,0,0,0] gives F0 within rel 1e-6", sat_err <= 1e-6);

  AdaptiveWeights<double> any = AdaptiveWeights<double>::init("w", 4);
  for (double& v : any.w.value.data()) v = rng.normal(0.0, 3.0);
  std::vector<Var<double>> same(4, maps[1]);
  const Tensor<double> fixed = adaptive_merge(ctx, same, any).value();
  const double same_err = oracle::rel_error(fixed, maps[1].value());
  rec.check("identical inputs are a fixed point", same_err <= 1e-12);
  return rec.finish();
}

SuiteResult erf_suite(std::uint64_t seed) {
  Recorder rec("erf");
  analysis::ErfOptions o;
  o.seed = seed;
  VariantConfig desk = VariantConfig::desk();
  const auto full = analysis::erf(Backbone<float>::build(desk, seed), o);
  desk.block_kind = BlockKind::conv3x3;
  const auto conv = analysis::erf(Backbone<float>::build(desk, seed), o);
  const double cf = analysis::coverage(full), cc = analysis::coverage(conv);
  const auto box = analysis::support_box(conv);
  rec.detail("input_size", std::to_string(o.input_size));
  rec.detail("samples", std::to_string(o.samples));
  rec.detail("desk_coverage", std::to_string(cf));
  rec.detail("conv_ablation_coverage", std::to_string(cc));
  rec.detail("conv_ablation_support", std::to_string(box.first) + "x" + std::to_string(box.second));
  rec.check("desk model covers >= 99% of cells", cf >= 0.99);
  rec.check("matched-depth conv ablation stays below 99%", cc < 0.99);
  return rec.finish();
}

namespace {

// Central-difference check of d(sum(r * f(inputs)))/d inputs for every coordinate.
double primitive_fd(const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& f,
                    std::vector<Tensor<double>> inputs, Rng& rng) {
  Tensor<double> weights;
  auto eval = [&](bool grad, std::vector<Tensor<double>>* out) {
    Tape<double> tape(true);
    std::vector<Var<double>> vs;
    for (const auto& t : inputs) vs.push_back(tape.leaf(t, true));
    Var<double> y = f(tape, vs);
    if (weights.empty()) weights = rng.normal_tensor<double>(y.shape());
    Var<double> loss = ops::sum(ops::mul(y, tape.constant(weights)));
    if (grad) {
      tape.backward(loss);
      for (const auto& v : vs) out->push_back(tape.grad(v.id()).empty() ? Tensor<double>(v.shape()) : tape.grad(v.id()));
    }
    return loss.value()[0];
  };
  std::vector<Tensor<double>> grads;
  eval(true, &grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double o = inputs[k][i];
      inputs[k][i] = o + 1e-4;
      const double up = eval(false, nullptr);
      inputs[k][i] = o - 1e-4;
      const double dn = eval(false, nullptr);
      inputs[k][i] = o;
      const double fd = (up - dn) / 2e-4;
      diff = std::max(diff, std::abs(fd - grads[k][i]));
      scale = std::max(scale, std::abs(fd));
    }
    worst = std::max(worst, diff / std::max(scale, 1e-10));
  }
  return worst;
}

}  // namespace

SuiteResult primitive_oracle_suite(std::uint64_t seed) {
  Recorder rec("primitive_oracles");
  Rng rng(seed);
  double conv = 0, dw = 0, lin = 0, ln = 0, smax = 0;
  for (int k = 0; k < 20; ++k) {
    Tape<double> tape(false);
    const std::size_t n = 1 + rng.index(2), ci = 1 + rng.index(4), co = 1 + rng.index(4);
    const std::size_t h = 3 + rng.index(4), w = 3 + rng.index(4), kh = 1 + rng.index(3), kw = 1 + rng.index(3);
    const std::size_t stride = 1 + rng.index(2), pad = rng.index(2);
    auto x = rng.normal_tensor<double>({n, ci, h, w});
    auto kk = rng.normal_tensor<double>({co, ci, kh, kw});
    auto b = rng.normal_tensor<double>({co});
    conv = std::max(conv, oracle::rel_error(ops::conv2d<double>(tape.constant(x), tape.constant(kk), tape.constant(b), stride, pad).value(),
                                            oracle::conv2d(x, kk, &b, stride, pad)));
    auto kd = rng.normal_tensor<double>({ci, 1, kh, kw});
    auto bd = rng.normal_tensor<double>({ci});
    dw = std::max(dw, oracle::rel_error(ops::depthwise_conv2d<double>(tape.constant(x), tape.constant(kd), tape.constant(bd), stride, pad).value(),
                                        oracle::depthwise_conv2d(x, kd, &bd, stride, pad)));
    auto xl = rng.normal_tensor<double>({3, ci + 1});
    auto wl = rng.normal_tensor<double>({co + 1, ci + 1});
    auto bl = rng.normal_tensor<double>({co + 1});
    lin = std::max(lin, oracle::rel_error(ops::linear<double>(tape.constant(xl), tape.constant(wl), tape.constant(bl)).value(),
                                          oracle::linear(xl, wl, &bl)));
    auto g = rng.normal_tensor<double>({ci + 1}), be = rng.normal_tensor<double>({ci + 1});
    ln = std::max(ln, oracle::rel_error(ops::layer_norm<double>(tape.constant(xl), tape.constant(g), tape.constant(be)).value(),
                                        oracle::layer_norm(xl, g, be, 1e-5)));
    auto big = rng.normal_tensor<double>({3, 5}, 300.0);
    const Tensor<double> s = ops::softmax(tape.constant(big), 1).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double t = 0;
      for (std::size_t j = 0; j < 5; ++j) t += s[r * 5 + j];
      smax = std::max(smax, std::abs(t - 1.0));
    }
  }
  rec.detail("conv2d_rel_error", conv);
  rec.detail("depthwise_rel_error", dw);
  rec.detail("linear_rel_error", lin);
  rec.detail("layer_norm_rel_error", ln);
  rec.detail("softmax_sum_error_large_logits", smax);
  rec.check("conv2d matches loop nest", conv <= 1e-6);
  rec.check("depthwise_conv2d matches loop nest", dw <= 1e-6);
  rec.check("linear matches dot products", lin <= 1e-6);
  rec.check("layer_norm matches two-pass oracle", ln <= 1e-6);
  rec.check("softmax sums to 1", smax <= 1e-6);

  using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;
  struct Case {
    std::string name;
    Fn f;
    std::vector<Shape> shapes;
  };
  const std::vector<Case> cases = {
      {"conv2d", [](Tape<double>&, const auto& v) { return ops::conv2d<double>(v[0], v[1], v[2], 2, 1); }, {{1, 2, 5, 5}, {3, 2, 3, 3}, {3}}},
      {"depthwise_conv2d", [](Tape<double>&, const auto& v) { return ops::depthwise_conv2d<double>(v[0], v[1], v[2], 1, 1); }, {{1, 3, 4, 4}, {3, 1, 3, 3}, {3}}},
      {"linear", [](Tape<double>&, const auto& v) { return ops::linear<double>(v[0], v[1], v[2]); }, {{3, 4}, {5, 4}, {5}}},
      {"layer_norm", [](Tape<double>&, const auto& v) { return ops::layer_norm<double>(v[0], v[1], v[2]); }, {{3, 6}, {6}, {6}}},
      {"silu", [](Tape<double>&, const auto& v) { return ops::silu(v[0]); }, {{2, 5}}},
      {"gelu", [](Tape<double>&, const auto& v) { return ops::gelu(v[0]); }, {{2, 5}}},
      {"softplus", [](Tape<double>&, const auto& v) { return ops::softplus(v[0]); }, {{2, 5}}},
      {"softmax", [](Tape<double>&, const auto& v) { return ops::softmax(v[0], 1); }, {{2, 5}}},
      {"weighted_sum", [](Tape<double>&, const auto& v) { return ops::weighted_sum<double>({v[0], v[1], v[2]}, v[3]); }, {{2, 3}, {2, 3}, {2, 3}, {3}}},
      {"selective_scan",
       [](Tape<double>&, const auto& v) {
         Var<double> dt = ops::softplus(v[1]);
         return ssm::selective_scan_core<double>(v[0], dt, v[2], v[3], v[4], v[5], ssm::ScanOptions{});
       },
       {{1, 6, 2}, {1, 6, 2}, {2, 2}, {1, 6, 2}, {1, 6, 2}, {2}}},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int s = 0; s < 20; ++s) {
      std::vector<Tensor<double>> in;
      for (const auto& sh : c.shapes) in.push_back(rng.normal_tensor<double>(sh));
      worst = std::max(worst, primitive_fd(c.f, in, rng));
    }
    rec.detail("grad_" + c.name + "_rel_error", worst);
    rec.check("gradient of " + c.name + " matches finite differences", worst <= 1e-4);
  }
  return rec.finish();
}

SuiteResult checkpoint_suite(std::uint64_t seed) {
  Recorder rec("checkpoint");
  Backbone<float> a = Backbone<float>::build(VariantConfig::desk(), seed);
  Backbone<float> b = Backbone<float>::build(VariantConfig::desk(), seed + 1000);
  const auto bytes = encode_checkpoint([&] {
    std::vector<CheckpointEntry> e;
    for (const Param<float>* p : a.parameters()) e.push_back({p->name, p->value});
    return e;
  }());
  apply_checkpoint(decode_checkpoint(bytes), b.parameters());
  Rng rng(seed + 1);
  const Tensor<float> x = rng.normal_tensor<float>({2, 3, 32, 32});
  auto logits = [&](const Backbone<float>& m) {
    Tape<float> tape(false);
    Context<float> ctx(tape);
    return forward(ctx, tape.constant(x), m).value();
  };
  rec.check("logits bit-identical after round trip", logits(a) == logits(b));
  rec.check("re-encoding is byte-identical", encode_checkpoint([&] {
                                               std::vector<CheckpointEntry> e;
                                               for (const Param<float>* p : b.parameters()) e.push_back({p->name, p->value});
                                               return e;
                                             }()) == bytes);
  rec.detail("bytes", std::to_string(bytes.size()));

  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2));
  std::string msg;
  try {
    decode_checkpoint(cut);
  } catch (const CheckpointError& e) {
    msg = e.what();
  }
  rec.detail("truncated_error", msg);
  rec.check("truncated file raises an error naming the entry", msg.find("entry") != std::string::npos);
  std::vector<std::uint8_t> bad = bytes;
  bad[0] = 'X';
  bool magic = false;
  try {
    decode_checkpoint(bad);
  } catch (const CheckpointError&) {
    magic = true;
  }
  rec.check("bad magic rejected", magic);
  VariantConfig other = VariantConfig::desk();
  other.dims = {8, 16, 32, 48};
  Backbone<float> c = Backbone<float>::build(other, 0);
  bool mismatch = false;
  try {
    apply_checkpoint(decode_checkpoint(bytes), c.parameters());
  } catch (const CheckpointError& e) {
    mismatch = std::string(e.what()).find("head.weight") != std::string::npos;
  }
  rec.check("shape mismatch lists the differing parameters", mismatch);
  return rec.finish();
}

SuiteResult block_invariant_suite(std::uint64_t seed) {
  Recorder rec("block_invariants");
  Rng rng(seed);
  BlockConfig bc;
  MfilBlock<double> blk = MfilBlock<double>::init("b", 8, bc, rng);
  for (double& v : blk.out_proj.value.data()) v = 0.0;
  for (double& v : blk.ffn.fc2_w.value.data()) v = 0.0;
  const Tensor<double> x = rng.normal_tensor<double>({2, 8, 5, 4});
  Tape<double> tape(false);
  Context<double> ctx(tape);
  rec.check("zeroed out_proj and fc2 give the identity bit-exactly", block_forward(ctx, tape.constant(x), blk).value() == x);

  MfilBlock<float> tiny = MfilBlock<float>::init("t", 94, bc, rng);
  Tape<float> tf(false);
  Context<float> cf(tf);
  rec.check("tiny-width block preserves 2x94x8x8", block_forward(cf, tf.constant(rng.normal_tensor<float>({2, 94, 8, 8})), tiny).shape() == Shape{2, 94, 8, 8});

  const auto a = Backbone<float>::build(VariantConfig::desk(), 77), b = Backbone<float>::build(VariantConfig::desk(), 77);
  const Tensor<float> img = rng.uniform_tensor<float>({2, 3, 32, 32}, -3.0, 3.0);
  auto run = [&](const Backbone<float>& m) {
    Tape<float> t(false);
    Context<float> c(t);
    return forward(c, t.constant(img), m).value();
  };
  const Tensor<float> la = run(a);
  rec.check("same seed builds give identical logits", la == run(b));
  rec.check("logits finite for inputs in [-3,3]", la.all_finite());
  return rec.finish();
}

std::vector<NamedSuite> all_suites() {
  return {
      {"primitive_oracles", [] { return primitive_oracle_suite(); }},
      {"lti_equivalence", [] { return lti_equivalence_suite(); }},
      {"zoh", [] { return zoh_suite(); }},
      {"scan_fast_path", [] { return scan_fast_path_suite(); }},
      {"adaptive_merge", [] { return adaptive_merge_suite(); }},
      {"block_invariants", [] { return block_invariant_suite(); }},
      {"structure", [] { return structure_suite(); }},
      {"covariance", [] { return covariance_suite(); }},
      {"gradcheck", [] { return gradcheck_suite(); }},
      {"erf", [] { return erf_suite(); }},
      {"checkpoint", [] { return checkpoint_suite(); }},
  };
}

std::string format(const SuiteResult& r) {
  std::ostringstream o;
  char buf[96];
  std::snprintf(buf, sizeof buf, "suite %s: %s (%.2fs)\n", r.name.c_str(), r.pass ? "pass" : "FAIL", r.seconds);
  o << buf;
  for (const auto& d : r.details) o << "  " << d << "\n";
  for (const auto& f : r.failures) o << "  failed: " << f << "\n";
  return o.str();
}

}  // namespace mfil::verify
