// mfil: command-line front end for training, evaluation, reports and the verification suites.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "mfil/analysis.hpp"
#include "mfil/checkpoint.hpp"
#include "mfil/error.hpp"
#include "mfil/theory.hpp"
#include "mfil/train.hpp"
#include "mfil/verify/suites.hpp"

namespace fs = std::filesystem;
using namespace mfil;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string variant;
  std::string scan_mode;
  bool no_adaptive = false;
  std::optional<std::size_t> d_state;
  std::optional<double> ssm_ratio;
  std::optional<std::size_t> steps;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value run configuration file");
    cmd->add_option("--seed", seed, "seed for weights, data and augmentation");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--variant", variant, "tiny | small | base | desk")
        ->check(CLI::IsMember({"tiny", "small", "base", "desk"}));
    cmd->add_option("--scan-mode", scan_mode, "multi_filter | single_flatten | cross_4dir | orig_plus_one");
    cmd->add_flag("--no-adaptive-weighting", no_adaptive, "merge scan streams with equal weights");
    cmd->add_option("--d-state", d_state, "SSM state size per channel");
    cmd->add_option("--ssm-ratio", ssm_ratio, "inner width multiplier of the scan branch");
    cmd->add_option("--steps", steps, "optimizer steps");
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (!variant.empty()) c.variant = VariantConfig::named(variant);
    if (!scan_mode.empty()) c.variant.scan_mode = parse_scan_mode(scan_mode);
    if (no_adaptive) c.variant.adaptive_weighting = false;
    if (d_state) c.variant.d_state = *d_state;
    if (ssm_ratio) c.variant.ssm_ratio = *ssm_ratio;
    if (steps) c.steps = *steps;
    if (seed) c.seed = c.data.seed = *seed;
    if (!out.empty()) c.output_dir = out;
    c.validate();
    return c;
  }
};

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("cannot write " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
  if (!f) throw Error("cannot write " + path.string());
}

// Binary P6 reader producing [3,H,W] in [-1,1], the range the synthetic images use.
Tensor<float> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  f.get();
  if (magic != "P6" || w == 0 || h == 0 || maxval != 255) throw Error(path + ": expected an 8-bit binary PPM (P6)");
  std::vector<unsigned char> px(3 * w * h);
  f.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!f) throw Error(path + ": truncated pixel data");
  Tensor<float> t({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) t[(c * h + y) * w + x] = px[(y * w + x) * 3 + c] / 127.5f - 1.0f;
  return t;
}

int cmd_verify(const std::vector<std::string>& only, const std::string& fault_op) {
  if (!fault_op.empty()) fault::arm(fault_op);
  std::vector<std::string> failed;
  for (const auto& suite : verify::all_suites()) {
    if (!only.empty() && std::find(only.begin(), only.end(), suite.name) == only.end()) continue;
    const verify::SuiteResult r = suite.run();
    std::cout << verify::format(r) << std::flush;
    if (!r.pass) failed.push_back(r.name);
  }
  if (failed.empty()) {
    std::cout << "verify: all suites passed\n";
    return 0;
  }
  std::cout << "verify: FAILED";
  for (const auto& f : failed) std::cout << " " << f;
  std::cout << "\n";
  return 1;
}

int cmd_train(const Overrides& ov, bool ablation) {
  const RunConfig cfg = ov.resolve();
  TrainOptions opts;
  opts.on_step = [&](const MetricRow& row) {
    if (row.step % 100 == 0 || row.step == cfg.steps) {
      std::fprintf(stderr, "step %zu loss %.4f lr %.2e acc %.3f\n", row.step, row.loss, row.lr, row.train_acc);
    }
  };
  if (ablation) {
    const auto rows = run_scan_ablation(cfg, {ScanMode::multi_filter, ScanMode::single_flatten}, opts);
    const std::string csv = ablation_csv(rows);
    fs::create_directories(cfg.output_dir);
    write_text(fs::path(cfg.output_dir) / "ablation.csv", csv);
    std::cout << csv;
    return 0;
  }
  const TrainResult r = train(cfg, opts);
  std::printf("final_accuracy: %.4f\nfinal_loss: %.6f\nalpha_drift: %.6f\nparameters: %zu\nseconds: %.1f\n",
              r.final_accuracy, r.final_loss, r.alpha_drift, r.parameter_count, r.seconds);
  for (const auto& c : r.checkpoints) std::printf("checkpoint: %s\n", c.c_str());
  return 0;
}

int cmd_eval(const Overrides& ov, std::string checkpoint, const std::string& image) {
  const RunConfig cfg = ov.resolve();
  if (checkpoint.empty()) checkpoint = (fs::path(cfg.output_dir) / "final.mfil").string();
  Backbone<float> model = Backbone<float>::build(cfg.variant, cfg.seed);
  apply_checkpoint(load_checkpoint(checkpoint), model.parameters());
  if (!image.empty()) {
    const Tensor<float> x = read_ppm(image);
    Tape<float> tape(false);
    Context<float> ctx(tape);
    const Tensor<float> logits = forward(ctx, tape.constant(x.reshape({1, x.dim(0), x.dim(1), x.dim(2)})), model).value();
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.numel(); ++k) best = logits[k] > logits[best] ? k : best;
    std::printf("prediction: %zu (%s)\n", best, class_name(best).c_str());
    Tensor<double> sal = analysis::saliency(model, x, best).template cast<double>();
    const fs::path pgm = fs::path(cfg.output_dir) / "saliency.pgm";
    fs::create_directories(cfg.output_dir);
    write_bytes(pgm, analysis::to_pgm(sal));
    std::printf("saliency: %s\n", pgm.string().c_str());
    return 0;
  }
  const EvalReport rep = evaluate(model, SyntheticDataset(cfg.data), cfg.batch_size, cfg.label_smoothing);
  std::printf("checkpoint: %s\nsamples: %zu\naccuracy: %.4f\nloss: %.6f\n", checkpoint.c_str(), rep.samples,
              rep.accuracy, rep.loss);
  return 0;
}

int report_structure(bool flops) {
  struct Row {
    VariantConfig cfg;
    double ref;
  };
  const Row rows[] = {{VariantConfig::tiny(), flops ? 5.6e9 : 33.5e6},
                      {VariantConfig::small(), flops ? 9.1e9 : 50.6e6},
                      {VariantConfig::base(), flops ? 16.8e9 : 93.1e6}};
  const double unit = flops ? 1e9 : 1e6;
  const char* suffix = flops ? "G" : "M";
  std::printf("variant,%s,reference,deviation_pct\n", flops ? "flops_224" : "params");
  for (const auto& r : rows) {
    const double v = flops ? count_flops(r.cfg, 224, 224) : static_cast<double>(count_params(r.cfg));
    std::printf("%s,%.2f%s,%.1f%s,%+.1f\n", r.cfg.name.c_str(), v / unit, suffix, r.ref / unit, suffix,
                100.0 * (v - r.ref) / r.ref);
  }
  const VariantConfig desk = VariantConfig::desk();
  if (flops) {
    std::printf("desk,%.3fM (32x32),-,-\n", count_flops(desk, 32, 32) / 1e6);
  } else {
    std::printf("desk,%zu,-,-\n", count_params(desk));
  }
  return 0;
}

int report_erf(const Overrides& ov) {
  const RunConfig cfg = ov.resolve();
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  analysis::ErfOptions o;
  o.seed = cfg.seed;
  VariantConfig conv = cfg.variant;
  conv.block_kind = BlockKind::conv3x3;
  std::printf("model,coverage,support_h,support_w,pgm\n");
  for (const auto& [tag, vc] : {std::pair{std::string("model"), cfg.variant}, std::pair{std::string("conv_ablation"), conv}}) {
    const auto map = analysis::erf(Backbone<float>::build(vc, cfg.seed), o);
    const auto box = analysis::support_box(map);
    const fs::path pgm = dir / ("erf_" + tag + ".pgm");
    write_bytes(pgm, analysis::to_pgm(map.grid));
    write_text(dir / ("erf_" + tag + ".txt"), analysis::matrix_text(map.grid));
    std::printf("%s,%.6f,%zu,%zu,%s\n", tag.c_str(), analysis::coverage(map), box.first, box.second, pgm.string().c_str());
  }
  return 0;
}

int report_covariance(std::uint64_t seed) {
  using namespace theory;
  Rng rng(seed);
  const std::size_t h = 6, w = 6, d = h * w;
  linalg::Matrix mix({d, d});
  for (double& v : mix.data()) v = rng.normal(0.0, 1.0 / 6.0);
  std::vector<std::vector<double>> samples;
  for (int k = 0; k < 200; ++k) {
    std::vector<double> z(d);
    for (double& v : z) v = rng.normal();
    samples.push_back(linalg::matvec(mix, z));
  }
  const EmpiricalMoments m = empirical_moments(samples);
  const auto row = permutation_matrix(row_major_traversal(h, w));
  const auto col = permutation_matrix(column_major_traversal(h, w));
  const auto sx = conv_as_matrix(sobel_x_kernel(), h, w, 1);
  const auto sy = conv_as_matrix(sobel_y_kernel(), h, w, 1);
  std::cout << format(verify_permutation_identity(row, col, m, samples)) << "\n"
            << format(verify_filter_identity(sx, sy, m, samples)) << "\n"
            << format(spectrum_report(m.covariance, col, sx));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-filter selective-scan vision backbone: train, evaluate, report, verify"};
  app.require_subcommand(1);

  auto* verify_cmd = app.add_subcommand("verify", "run every verification suite; exit 0 iff all pass");
  std::vector<std::string> only;
  std::string fault_op;
  verify_cmd->add_option("--suite", only, "run only the named suite(s)");
  verify_cmd->add_option("--inject-fault", fault_op, "corrupt the backward rule of one op (negative control)");

  Overrides train_ov, eval_ov, report_ov;
  auto* train_cmd = app.add_subcommand("train", "train on the synthetic oriented-pattern task");
  train_ov.attach(train_cmd);
  bool ablation = false;
  train_cmd->add_flag("--ablation", ablation, "train multi_filter and single_flatten and emit a comparison table");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the synthetic dataset");
  eval_ov.attach(eval_cmd);
  std::string checkpoint, image;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/final.mfil)");
  eval_cmd->add_option("--image", image, "classify one P6 image and write its saliency map");

  auto* report_cmd = app.add_subcommand("report", "structured reports");
  std::string kind;
  report_cmd->add_option("kind", kind, "params | flops | erf | covariance")
      ->required()
      ->check(CLI::IsMember({"params", "flops", "erf", "covariance"}));
  report_ov.attach(report_cmd);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*verify_cmd) return cmd_verify(only, fault_op);
    if (*train_cmd) return cmd_train(train_ov, ablation);
    if (*eval_cmd) return cmd_eval(eval_ov, checkpoint, image);
    if (kind == "params" || kind == "flops") return report_structure(kind == "flops");
    if (kind == "erf") return report_erf(report_ov);
    return report_covariance(report_ov.seed.value_or(3));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
