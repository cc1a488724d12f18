#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "mfil/checkpoint.hpp"
#include "mfil/config.hpp"
#include "mfil/error.hpp"
#include "mfil/train.hpp"

using namespace mfil;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mfil_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

RunConfig short_run(const fs::path& dir) {
  RunConfig c;
  c.steps = 12;
  c.batch_size = 8;
  c.data.size = 48;
  c.checkpoint_every = 5;
  c.seed = 3;
  c.data.seed = 3;
  c.output_dir = dir.string();
  return c;
}

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text, "run.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

struct ThreadsEnv {
  explicit ThreadsEnv(const char* v) { setenv("MFIL_THREADS", v, 1); }
  ~ThreadsEnv() { unsetenv("MFIL_THREADS"); }
};

}  // namespace

TEST_CASE("config defaults follow the training recipe") {
  const RunConfig c;
  CHECK(c.optimizer.lr == 1e-3);
  CHECK(c.optimizer.weight_decay == 0.05);
  CHECK(c.label_smoothing == 0.1);
  CHECK(c.steps == 1500);
  CHECK(c.batch_size == 32);
  CHECK(c.resolved_warmup() == 75);
  CHECK(c.variant.dims == VariantConfig::desk().dims);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config parsing") {
  const auto c = parse_run_config(
      "# desk run\n"
      "variant = desk\n"
      "steps = 200   # short\n"
      "lr = 0.002\n"
      "scan_mode = single_flatten\n"
      "adaptive_weighting = false\n"
      "depths = 1,2,2,1\n"
      "\n"
      "seed = 42\n");
  CHECK(c.steps == 200);
  CHECK(c.optimizer.lr == 0.002);
  CHECK(c.variant.scan_mode == ScanMode::single_flatten);
  CHECK_FALSE(c.variant.adaptive_weighting);
  CHECK(c.variant.depths == std::array<std::size_t, 4>{1, 2, 2, 1});
  CHECK(c.seed == 42);

  // The named variant is the base even when it appears after an override.
  const auto late = parse_run_config("d_state = 2\nvariant = tiny\n");
  CHECK(late.variant.dims == VariantConfig::tiny().dims);
  CHECK(late.variant.d_state == 2);

  CHECK(error_of("steps = 10\nbogus = 1\n").find("run.cfg:2") != std::string::npos);
  CHECK(error_of("steps = 10\nbogus = 1\n").find("bogus") != std::string::npos);
  CHECK(error_of("steps = 10\n\nsteps = 20\n").find("run.cfg:3") != std::string::npos);
  CHECK(error_of("steps = 10\n\nsteps = 20\n").find("duplicate") != std::string::npos);
  CHECK(error_of("lr = fast\n").find("run.cfg:1") != std::string::npos);
  CHECK(error_of("x\n").find("run.cfg:1") != std::string::npos);
  CHECK(error_of("\n\nvariant = huge\n").find("run.cfg:3") != std::string::npos);
  CHECK(error_of("depths = 1,2,3\n").find("run.cfg:1") != std::string::npos);
  CHECK(error_of("adaptive_weighting = maybe\n").find("run.cfg:1") != std::string::npos);
  CHECK(error_of("optimizer = sgd\n").find("run.cfg:1") != std::string::npos);
  CHECK(error_of("steps = 10\n").empty());
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("config text round trip and validation") {
  RunConfig c;
  c.variant.dims = {6, 12, 24, 48};
  c.variant.ssm_ratio = 1.5;
  c.variant.scan_mode = ScanMode::cross_4dir;
  c.optimizer.lr = 3.3e-4;
  c.label_smoothing = 0.05;
  c.steps = 77;
  c.warmup_steps = 4;
  c.seed = 123456789012345ULL;
  c.data.noise = 0.125;
  c.output_dir = "out/x";
  const std::string text = to_config_text(c);
  const RunConfig back = parse_run_config(text);
  CHECK(to_config_text(back) == text);
  CHECK(back.seed == c.seed);
  CHECK(back.optimizer.lr == c.optimizer.lr);
  CHECK(back.variant.dims == c.variant.dims);
  CHECK(back.output_dir == "out/x");

  auto bad = RunConfig{};
  bad.optimizer.lr = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.label_smoothing = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.data.num_classes = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.data.image_size = 40;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("synthetic dataset is deterministic and balanced") {
  SyntheticSpec spec;
  spec.size = 10;
  const SyntheticDataset a(spec), b(spec);
  CHECK(a.image(3) == b.image(3));
  CHECK(a.image(3).shape() == Shape{3, 32, 32});
  spec.seed = 1;
  CHECK_FALSE(SyntheticDataset(spec).image(3) == a.image(3));

  for (std::uint64_t e = 0; e < 3; ++e) {
    auto order = a.epoch_order(e);
    CHECK(order == b.epoch_order(e));
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
    std::vector<int> counts(4, 0);
    for (int l : a.labels(order)) ++counts[std::size_t(l)];
    CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
  }
  CHECK_FALSE(a.epoch_order(0) == a.epoch_order(1));

  // Noise-free horizontal stripes vary down the rows only, vertical stripes across columns only.
  SyntheticSpec clean;
  clean.noise = 0.0;
  const SyntheticDataset d(clean);
  auto variation = [](const Tensor<float>& img, bool along_rows) {
    double v = 0;
    for (std::size_t y = 0; y + 1 < 32; ++y)
      for (std::size_t x = 0; x + 1 < 32; ++x) {
        const std::size_t next = along_rows ? (y + 1) * 32 + x : y * 32 + x + 1;
        v += std::abs(img[next] - img[y * 32 + x]);
      }
    return v;
  };
  CHECK(d.label(0) == 0);
  CHECK(variation(d.image(0), true) > 10.0 * variation(d.image(0), false));
  CHECK(variation(d.image(1), false) > 10.0 * variation(d.image(1), true));

  const auto batch = a.batch({0, 1}, {false, true});
  CHECK(batch.shape() == Shape{2, 3, 32, 32});
  const auto one = a.image(1);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) CHECK(batch[((3 + c) * 32 + y) * 32 + x] == one[(c * 32 + y) * 32 + 31 - x]);
}

TEST_CASE("AdamW update and decay rule") {
  Param<float> w{"w", Tensor<float>({2, 2}, {1.0f, -2.0f, 0.5f, 0.0f})};
  Param<float> b{"b", Tensor<float>({2}, {1.0f, 1.0f})};
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW opt({&w, &b}, cfg);
  const std::vector<Tensor<float>> grads{Tensor<float>({2, 2}, {0.5f, 0.5f, -1.0f, 0.0f}),
                                         Tensor<float>({2}, {0.0f, 2.0f})};
  opt.step(grads, 0.01);
  CHECK(opt.steps_taken() == 1);
  // First step: bias-corrected m/sqrt(v) is sign(g), so w -= lr*decay*w + lr*sign(g).
  CHECK(w.value[0] == doctest::Approx(1.0 - 0.001 - 0.01).epsilon(1e-6));
  CHECK(w.value[1] == doctest::Approx(-2.0 + 0.002 - 0.01).epsilon(1e-6));
  CHECK(w.value[2] == doctest::Approx(0.5 - 0.0005 + 0.01).epsilon(1e-6));
  CHECK(w.value[3] == 0.0f);
  // Rank-1 tensors are not decayed.
  CHECK(b.value[0] == 1.0f);
  CHECK(b.value[1] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));

  // Second step against a double-precision transcription of the update.
  double m = 0.1 * 0.5, v = 0.001 * 0.25;
  const double g2 = -0.25;
  m = 0.9 * m + 0.1 * g2;
  v = 0.999 * v + 0.001 * g2 * g2;
  double expect = w.value[0];
  expect -= 0.02 * 0.1 * expect;
  expect -= 0.02 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  opt.step({Tensor<float>({2, 2}, {float(g2), 0, 0, 0}), Tensor<float>({2})}, 0.02);
  CHECK(w.value[0] == doctest::Approx(expect).epsilon(1e-6));

  CHECK_THROWS_AS(opt.step({grads[0]}, 0.01), ShapeError);
  CHECK_THROWS_AS(AdamW({&w}, AdamWConfig{0.0}), ConfigError);
}

TEST_CASE("cosine schedule with linear warmup") {
  const double peak = 1e-3;
  CHECK(cosine_lr(0, 100, 5, peak) == doctest::Approx(peak / 5));
  CHECK(cosine_lr(4, 100, 5, peak) == doctest::Approx(peak));
  CHECK(cosine_lr(5, 100, 5, peak) == doctest::Approx(peak));
  CHECK(cosine_lr(99, 100, 5, peak) == doctest::Approx(peak * 1e-6));
  const double mid = cosine_lr(5 + 47, 100, 5, peak);
  CHECK(mid == doctest::Approx(1e-9 + 0.5 * (peak - 1e-9) * (1 + std::cos(std::numbers::pi * 0.5))));
  for (std::size_t s = 5; s + 1 < 100; ++s) CHECK(cosine_lr(s + 1, 100, 5, peak) <= cosine_lr(s, 100, 5, peak));
  for (std::size_t s = 0; s + 1 < 5; ++s) CHECK(cosine_lr(s + 1, 100, 5, peak) > cosine_lr(s, 100, 5, peak));
  CHECK(cosine_lr(0, 10, 0, peak) == doctest::Approx(peak));
  CHECK_THROWS_AS(cosine_lr(0, 0, 0, peak), ConfigError);
}

TEST_CASE("checkpoint encoding") {
  std::vector<CheckpointEntry> entries{{"a.weight", Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6})},
                                       {"b", Tensor<float>({1}, {-0.5f})}};
  const auto bytes = encode_checkpoint(entries);
  const std::size_t expect = 4 + 4 + 4 + (2 + 8 + 1 + 16 + 24) + (2 + 1 + 1 + 8 + 4);
  REQUIRE(bytes.size() == expect);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MFIL");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 8);
  CHECK(bytes[13] == 0);
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a.weight");
  CHECK(back[0].value == entries[0].value);
  CHECK(back[1].value == entries[1].value);
  CHECK(encode_checkpoint(back) == bytes);

  for (std::size_t cut : {std::size_t(3), std::size_t(10), std::size_t(20), bytes.size() - 1}) {
    std::vector<std::uint8_t> shorter(bytes.begin(), bytes.begin() + long(cut));
    CHECK_THROWS_AS(decode_checkpoint(shorter), CheckpointError);
  }
  try {
    decode_checkpoint({bytes.begin(), bytes.end() - 2});
    FAIL("truncated file accepted");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
}

TEST_CASE("checkpoint files and parameter application") {
  const auto dir = scratch_dir("ckpt");
  auto model = Backbone<float>::build(VariantConfig::desk(), 1);
  const std::string path = (dir / "m.mfil").string();
  save_checkpoint(path, model.parameters());
  CHECK(fs::exists(path));
  CHECK_FALSE(fs::exists(path + ".tmp"));

  auto other = Backbone<float>::build(VariantConfig::desk(), 2);
  apply_checkpoint(load_checkpoint(path), other.parameters());
  Rng rng(1);
  const auto x = rng.normal_tensor<float>({2, 3, 32, 32});
  auto logits = [&x](const Backbone<float>& bb) {
    Tape<float> tape(false);
    Context<float> ctx(tape);
    return Tensor<float>(forward(ctx, tape.constant(x), bb).value());
  };
  CHECK(logits(other) == logits(model));

  auto cfg = VariantConfig::desk();
  cfg.num_classes = 3;
  auto mismatched = Backbone<float>::build(cfg, 3);
  const auto before = mismatched.parameters()[0]->value;
  try {
    apply_checkpoint(load_checkpoint(path), mismatched.parameters());
    FAIL("shape mismatch accepted");
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("head.weight") != std::string::npos);
    CHECK(msg.find("head.bias") != std::string::npos);
    CHECK(msg.find("stem.weight") == std::string::npos);
  }
  CHECK(mismatched.parameters()[0]->value == before);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.mfil").string()), CheckpointError);
}

TEST_CASE("worker count honours MFIL_THREADS") {
  {
    ThreadsEnv env("3");
    CHECK(worker_count() == 3);
  }
  {
    ThreadsEnv env("zero");
    CHECK_THROWS_AS(worker_count(), ConfigError);
  }
  CHECK(worker_count() >= 1);
}

TEST_CASE("short training run: files, determinism and evaluation") {
  const auto d1 = scratch_dir("train_a"), d2 = scratch_dir("train_b"), d3 = scratch_dir("train_c");
  Backbone<float> model;
  TrainResult r1;
  std::size_t callbacks = 0;
  {
    ThreadsEnv env("4");
    TrainOptions opts;
    opts.on_step = [&callbacks](const MetricRow&) { ++callbacks; };
    r1 = train(short_run(d1), opts, &model);
  }
  CHECK(callbacks == 12);
  TrainResult r2;
  {
    ThreadsEnv env("4");
    r2 = train(short_run(d2));
  }
  TrainResult r3;
  {
    ThreadsEnv env("1");
    r3 = train(short_run(d3));
  }
  const std::string csv = read_file(d1 / "metrics.csv");
  CHECK(csv.rfind("step,loss,lr,train_acc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 12 + 1);
  CHECK(csv == read_file(d2 / "metrics.csv"));
  CHECK(csv == read_file(d3 / "metrics.csv"));
  CHECK(read_file(d1 / "final.mfil") == read_file(d3 / "final.mfil"));
  CHECK(fs::exists(d1 / "step_5.mfil"));
  CHECK(fs::exists(d1 / "step_10.mfil"));
  CHECK(fs::exists(d1 / "config.txt"));
  CHECK(r1.checkpoints.size() == 3);
  for (const auto& row : r1.metrics) CHECK(std::isfinite(row.loss));

  CHECK(r1.metrics.back().step == 12);
  CHECK(r1.metrics.back().train_acc == r1.final_accuracy);
  CHECK(r1.alpha_drift > 0.0);
  CHECK(r1.parameter_count == count_params(VariantConfig::desk()));

  // Evaluating the saved weights reproduces the final row exactly.
  const RunConfig cfg = short_run(d1);
  const SyntheticDataset data(cfg.data);
  auto fresh = Backbone<float>::build(cfg.variant, 999);
  apply_checkpoint(load_checkpoint((d1 / "final.mfil").string()), fresh.parameters());
  const auto ev = evaluate(fresh, data, cfg.batch_size, cfg.label_smoothing);
  CHECK(ev.accuracy == r1.final_accuracy);
  CHECK(ev.loss == r1.final_loss);
  CHECK(ev.samples == 48);
  CHECK(evaluate(model, data, cfg.batch_size, cfg.label_smoothing).accuracy == r1.final_accuracy);
  // The resolved config is written next to the weights.
  CHECK(parse_run_config(read_file(d1 / "config.txt")).steps == 12);
}

TEST_CASE("a diverging run keeps the last good weights") {
  const auto dir = scratch_dir("diverge");
  RunConfig c = short_run(dir);
  c.optimizer.lr = 1e30;
  c.warmup_steps = 0;
  c.optimizer.weight_decay = 0.0;
  std::string msg;
  try {
    train(c);
  } catch (const NumericError& e) {
    msg = e.what();
  }
  REQUIRE_FALSE(msg.empty());
  CHECK(msg.find("last_good.mfil") != std::string::npos);
  REQUIRE(fs::exists(dir / "last_good.mfil"));
  for (const auto& e : load_checkpoint((dir / "last_good.mfil").string()))
    for (float v : e.value.data()) CHECK(std::isfinite(v));
  const std::string csv = read_file(dir / "metrics.csv");
  CHECK(csv.rfind("step,loss,lr,train_acc\n", 0) == 0);
  CHECK(csv.find("nan") == std::string::npos);
}

TEST_CASE("ablation runs report one row per scan mode") {
  const auto dir = scratch_dir("ablation");
  RunConfig c = short_run(dir);
  c.steps = 4;
  c.checkpoint_every = 0;
  TrainOptions quiet;
  quiet.write_files = false;
  const auto rows = run_scan_ablation(c, {ScanMode::multi_filter, ScanMode::single_flatten}, quiet);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].scan_mode == "multi_filter");
  CHECK(rows[1].scan_mode == "single_flatten");
  CHECK(rows[0].parameter_count > rows[1].parameter_count);
  const auto csv = ablation_csv(rows);
  CHECK(csv.rfind("scan_mode,final_acc,final_loss,params,seconds\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
