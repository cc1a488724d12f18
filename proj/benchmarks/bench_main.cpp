#include <benchmark/benchmark.h>

#include "mfil/backbone.hpp"
#include "mfil/ops.hpp"
#include "mfil/ssm.hpp"
#include "mfil/train.hpp"

namespace {

using namespace mfil;
using namespace mfil::ssm;

// Selective scan on [1, L, 16] with two states, sequential reference vs chunked path.
void BM_SelectiveScan(benchmark::State& state) {
  const std::size_t len = static_cast<std::size_t>(state.range(0));
  const bool chunked = state.range(1) != 0;
  Rng rng(1);
  const auto core = SsmCore<float>::init("s", 16, 2, rng);
  const auto x = rng.normal_tensor<float>({1, len, 16});
  ScanOptions opts;
  opts.chunked = chunked;
  for (auto _ : state) {
    Tape<float> tape(false);
    Context<float> ctx(tape);
    benchmark::DoNotOptimize(selective_scan(ctx, tape.constant(x), core, opts).value().data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(len));
}
BENCHMARK(BM_SelectiveScan)->ArgsProduct({{256, 1024, 4096}, {0, 1}})->ArgNames({"L", "chunked"});

void BM_BlockForward(benchmark::State& state) {
  const std::size_t c = static_cast<std::size_t>(state.range(0));
  const std::size_t side = static_cast<std::size_t>(state.range(1));
  Rng rng(2);
  const auto blk = MfilBlock<float>::init("b", c, BlockConfig{}, rng);
  const auto x = rng.normal_tensor<float>({1, c, side, side});
  for (auto _ : state) {
    Tape<float> tape(false);
    Context<float> ctx(tape);
    benchmark::DoNotOptimize(block_forward(ctx, tape.constant(x), blk).value().data().data());
  }
}
BENCHMARK(BM_BlockForward)->Args({8, 16})->Args({16, 8})->Args({64, 2})->ArgNames({"C", "side"});

// One desk training step (forward + backward) on a batch of 32 at 32x32.
void BM_DeskTrainStep(benchmark::State& state) {
  const auto model = Backbone<float>::build(VariantConfig::desk(), 3);
  const SyntheticDataset data(SyntheticSpec{});
  std::vector<std::size_t> idx(32);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto images = data.batch(idx);
  const auto labels = data.labels(idx);
  for (auto _ : state) {
    Tape<float> tape(true);
    Context<float> ctx(tape);
    Var<float> loss = ops::cross_entropy(forward(ctx, tape.constant(images), model), std::span<const int>(labels), 0.1f);
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.value()[0]);
  }
}
BENCHMARK(BM_DeskTrainStep)->Unit(benchmark::kMillisecond);

void BM_DeskForward64(benchmark::State& state) {
  const auto model = Backbone<float>::build(VariantConfig::desk(), 4);
  Rng rng(4);
  const auto x = rng.normal_tensor<float>({1, 3, 64, 64});
  for (auto _ : state) {
    Tape<float> tape(false);
    Context<float> ctx(tape);
    benchmark::DoNotOptimize(forward(ctx, tape.constant(x), model).value().data().data());
  }
}
BENCHMARK(BM_DeskForward64)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
