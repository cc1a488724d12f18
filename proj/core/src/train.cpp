#include "mfil/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <fstream>
#include <sstream>
#include <thread>

#include "mfil/checkpoint.hpp"
#include "mfil/ops.hpp"

namespace mfil {

std::size_t worker_count() {
  if (const char* env = std::getenv("MFIL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    throw ConfigError(std::string("MFIL_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

namespace {

struct ShardOut {
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<Tensor<float>> grads;
  std::string error;
};

std::size_t count_correct(const Tensor<float>& logits, const std::vector<int>& labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[b * k + j] > logits[b * k + best]) best = j;
    correct += static_cast<int>(best) == labels[b];
  }
  return correct;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t w = std::min(workers, n);
  for (std::size_t t = 0; t < w; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += w) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> r;
  const std::size_t shards = std::min(kGradientShards, n);
  std::size_t start = 0;
  for (std::size_t s = 0; s < shards; ++s) {
    const std::size_t len = n / shards + (s < n % shards ? 1 : 0);
    r.emplace_back(start, len);
    start += len;
  }
  return r;
}

}  // namespace

EvalReport evaluate(const Backbone<float>& model, const SyntheticDataset& data, std::size_t batch_size,
                    double label_smoothing) {
  EvalReport rep;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    Tape<float> tape(false);
    Context<float> ctx(tape);
    Var<float> logits = forward(ctx, tape.constant(data.batch(idx)), model);
    const std::vector<int> labels = data.labels(idx);
    Var<float> loss = ops::cross_entropy(logits, std::span<const int>(labels), static_cast<float>(label_smoothing));
    loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
    correct += count_correct(logits.value(), labels);
  }
  rep.samples = data.size();
  rep.loss = loss_sum / static_cast<double>(data.size());
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return rep;
}

double alpha_drift(const Backbone<float>& model) {
  double total = 0.0;
  std::size_t blocks = 0;
  for (const auto& stage : model.stages) {
    for (const auto& b : stage) {
      ++blocks;
      if (!b.scan.weights) continue;
      const Tensor<float> a = b.scan.weights->alpha();
      const double u = 1.0 / static_cast<double>(a.numel());
      for (float v : a.data()) total += std::abs(static_cast<double>(v) - u);
    }
  }
  return blocks ? total / static_cast<double>(blocks) : 0.0;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream o;
  o << "step,loss,lr,train_acc\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.6f\n", r.step, r.loss, r.lr, r.train_acc);
    o << buf;
  }
  return o.str();
}

TrainResult train(const RunConfig& config, const TrainOptions& options, Backbone<float>* out_model) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSpec spec = config.data;
  const SyntheticDataset data(spec);
  Backbone<float> model = Backbone<float>::build(config.variant, config.seed);
  ParamList<float> params = model.parameters();
  AdamW opt(params, config.optimizer);
  TrainResult result;
  result.parameter_count = count_values(params);

  const std::filesystem::path dir(config.output_dir);
  if (options.write_files) std::filesystem::create_directories(dir);
  auto save = [&](const std::string& file) {
    const std::string path = (dir / file).string();
    save_checkpoint(path, params);
    result.checkpoints.push_back(path);
  };

  const std::size_t workers = worker_count();
  const std::size_t warmup = config.resolved_warmup();
  const std::size_t bs = std::min(config.batch_size, data.size());
  std::size_t epoch = 0, cursor = 0;
  std::vector<std::size_t> order = data.epoch_order(0);

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < bs) {
      if (cursor == order.size()) {
        order = data.epoch_order(++epoch);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    std::vector<bool> flip(bs, false);
    if (config.horizontal_flip) {
      Rng frng(mix_seed(config.seed ^ 0xf11bULL, step));
      for (std::size_t i = 0; i < bs; ++i) flip[i] = frng.uniform() < 0.5;
    }
    const Tensor<float> images = data.batch(idx, flip);
    const std::vector<int> labels = data.labels(idx);
    const auto ranges = shard_ranges(bs);
    std::vector<ShardOut> outs(ranges.size());
    parallel_for(ranges.size(), workers, [&](std::size_t s) {
      ShardOut& out = outs[s];
      try {
        const auto [start, len] = ranges[s];
        const std::size_t per = images.numel() / bs;
        Shape shape = images.shape();
        shape[0] = len;
        std::vector<float> chunk(images.storage().begin() + static_cast<long>(start * per),
                                 images.storage().begin() + static_cast<long>((start + len) * per));
        const std::vector<int> lab(labels.begin() + static_cast<long>(start),
                                   labels.begin() + static_cast<long>(start + len));
        Rng drng(mix_seed(config.seed ^ 0xd00dULL, step * kGradientShards + s));
        Tape<float> tape(true);
        Context<float> ctx(tape, true, &drng);
        Var<float> logits = forward(ctx, tape.constant(Tensor<float>(shape, std::move(chunk))), model);
        Var<float> loss = ops::cross_entropy(logits, std::span<const int>(lab),
                                             static_cast<float>(config.label_smoothing));
        out.loss = loss.value()[0];
        out.correct = count_correct(logits.value(), lab);
        if (!std::isfinite(out.loss)) return;
        tape.backward(loss);
        const GradientMap<float> g = ctx.gradients(params);
        const float w = static_cast<float>(len) / static_cast<float>(bs);
        for (const Param<float>* p : params) {
          Tensor<float> t = g.at(p->name);
          for (float& v : t.data()) v *= w;
          out.grads.push_back(std::move(t));
        }
      } catch (const NumericError& e) {
        out.loss = std::numeric_limits<double>::quiet_NaN();
        out.error = e.what();
      }
    });

    double loss = 0.0;
    std::size_t correct = 0;
    std::string error;
    for (std::size_t s = 0; s < outs.size(); ++s) {
      loss += outs[s].loss * static_cast<double>(ranges[s].second) / static_cast<double>(bs);
      correct += outs[s].correct;
      if (!outs[s].error.empty()) error = outs[s].error;
    }
    if (!std::isfinite(loss)) {
      if (options.write_files) save("last_good.mfil");
      if (options.write_files) {
        std::ofstream(dir / "metrics.csv") << metrics_csv(result.metrics);
      }
      throw NumericError("non-finite loss at step " + std::to_string(step + 1) +
                         (error.empty() ? std::string() : " (" + error + ")") +
                         "; weights before the step kept as last_good.mfil");
    }
    std::vector<Tensor<float>> grads = std::move(outs[0].grads);
    for (std::size_t s = 1; s < outs.size(); ++s)
      for (std::size_t i = 0; i < grads.size(); ++i)
        for (std::size_t j = 0; j < grads[i].numel(); ++j) grads[i][j] += outs[s].grads[i][j];

    const double lr = cosine_lr(step, config.steps, warmup, config.optimizer.lr);
    opt.step(grads, lr);
    MetricRow row{step + 1, loss, lr, static_cast<double>(correct) / static_cast<double>(bs)};
    result.metrics.push_back(row);
    if (options.on_step) options.on_step(row);
    if (options.write_files && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
        step + 1 != config.steps) {
      save("step_" + std::to_string(step + 1) + ".mfil");
    }
  }

  const EvalReport final_eval = evaluate(model, data, bs, config.label_smoothing);
  result.final_accuracy = final_eval.accuracy;
  result.final_loss = final_eval.loss;
  result.metrics.push_back({config.steps, final_eval.loss, result.metrics.back().lr, final_eval.accuracy});
  result.alpha_drift = alpha_drift(model);
  if (options.write_files) {
    save("final.mfil");
    std::ofstream(dir / "metrics.csv") << metrics_csv(result.metrics);
    std::ofstream(dir / "config.txt") << to_config_text(config);
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (out_model) *out_model = std::move(model);
  return result;
}

std::vector<AblationRow> run_scan_ablation(const RunConfig& config, const std::vector<ScanMode>& modes,
                                           const TrainOptions& options) {
  std::vector<AblationRow> rows;
  for (ScanMode m : modes) {
    RunConfig c = config;
    c.variant.scan_mode = m;
    c.output_dir = (std::filesystem::path(config.output_dir) / to_string(m)).string();
    const TrainResult r = train(c, options);
    rows.push_back({to_string(m), r.final_accuracy, r.final_loss, r.parameter_count, r.seconds});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << "scan_mode,final_acc,final_loss,params,seconds\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.9g,%zu,%.1f\n", r.scan_mode.c_str(), r.final_accuracy, r.final_loss,
                  r.parameter_count, r.seconds);
    o << buf;
  }
  return o.str();
}

}  // namespace mfil
