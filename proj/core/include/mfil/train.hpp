#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mfil/config.hpp"

namespace mfil {

struct MetricRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double train_acc = 0.0;
};

struct EvalReport {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
};

struct TrainResult {
  /// One row per optimizer step, then a final row (step == steps) holding the
  /// evaluation of the final weights over the whole training set.
  std::vector<MetricRow> metrics;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  /// Mean over blocks of ||softmax(w) - uniform||_1 after training (0 without adaptive weights).
  double alpha_drift = 0.0;
  std::size_t parameter_count = 0;
  std::vector<std::string> checkpoints;
  double seconds = 0.0;
};

/// Worker count from MFIL_THREADS (default: hardware concurrency, at least 1).
std::size_t worker_count();

/// Batch items are split into this many fixed shards whose gradients are summed in
/// shard order; results therefore do not depend on the number of workers.
inline constexpr std::size_t kGradientShards = 4;

/// Top-1 accuracy and mean smoothed cross-entropy over the dataset, in fixed batches.
EvalReport evaluate(const Backbone<float>& model, const SyntheticDataset& data, std::size_t batch_size,
                    double label_smoothing);

struct TrainOptions {
  /// Write metrics.csv and checkpoints under config.output_dir.
  bool write_files = true;
  /// Called after every optimizer step.
  std::function<void(const MetricRow&)> on_step;
};

/// Runs the full recipe. Throws NumericError on a non-finite loss after writing
/// last_good.mfil holding the weights from before the failing step.
TrainResult train(const RunConfig& config, const TrainOptions& options = {}, Backbone<float>* out_model = nullptr);

std::string metrics_csv(const std::vector<MetricRow>& rows);

struct AblationRow {
  std::string scan_mode;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  std::size_t parameter_count = 0;
  double seconds = 0.0;
};

/// Trains once per scan mode under an identical budget and seed.
std::vector<AblationRow> run_scan_ablation(const RunConfig& config, const std::vector<ScanMode>& modes,
                                           const TrainOptions& options = {});
std::string ablation_csv(const std::vector<AblationRow>& rows);

/// Mean over blocks of ||softmax(w) - uniform||_1.
double alpha_drift(const Backbone<float>& model);

}  // namespace mfil
