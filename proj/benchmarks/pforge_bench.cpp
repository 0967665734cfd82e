// Microbenchmarks for the hot paths: scoring, backprop, reconstruction,
// entropy, PE parsing and corpus generation.
//
// Build in Release and run with --benchmark_min_time=1 for stable numbers.

#include <benchmark/benchmark.h>

#include "pforge/attack.hpp"
#include "pforge/corpus.hpp"
#include "pforge/eval.hpp"
#include "pforge/model.hpp"
#include "pforge/pe.hpp"
#include "pforge/rng.hpp"

namespace {

using namespace pforge;

Bytes random_bytes(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Bytes out(n);
  for (auto& b : out) b = rng.byte();
  return out;
}

const model::ModelParams& desk_model() {
  static const auto params = model::init_params(model::ModelConfig::desk(), 1);
  return params;
}

void BM_PredictFile(benchmark::State& state) {
  const auto file = random_bytes(static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(model::predict_file(desk_model(), file));
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PredictFile)->Arg(2 << 10)->Arg(16 << 10)->Arg(64 << 10);

void BM_ForwardBackward(benchmark::State& state) {
  const auto file = random_bytes(static_cast<std::size_t>(state.range(0)), 2);
  const auto& p = desk_model();
  for (auto _ : state) {
    auto cache = model::forward(p, model::embed(p, file));
    benchmark::DoNotOptimize(model::backward(p, cache, 1));
  }
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(2 << 10)->Arg(16 << 10)->Arg(64 << 10);

void BM_Reconstruct(benchmark::State& state) {
  const auto& p = desk_model();
  const auto rows = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  model::Matrix z(rows, p.embedding.cols);
  for (auto& v : z.data) v = rng.uniform(-1.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(attack::reconstruct(p, z, attack::Distance::euclidean));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Reconstruct)->Arg(128)->Arg(1024);

void BM_Entropy(benchmark::State& state) {
  const auto bytes = random_bytes(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(eval::entropy(bytes));
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Entropy)->Arg(256)->Arg(64 << 10);

void BM_ParsePe(benchmark::State& state) {
  pe::FixtureSpec spec;
  spec.seed = 5;
  for (int i = 0; i < state.range(0); ++i) {
    spec.sections.push_back({".s" + std::to_string(i), random_bytes(4096, 10 + static_cast<std::uint64_t>(i)), 0x200,
                             i == 0});
  }
  const auto bytes = pe::make_fixture(spec);
  for (auto _ : state) benchmark::DoNotOptimize(pe::parse(bytes));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(bytes.size()));
}
BENCHMARK(BM_ParsePe)->Arg(2)->Arg(8);

void BM_GenerateFile(benchmark::State& state) {
  corpus::CorpusSpec spec;
  spec.n_benign = 64;
  spec.n_malicious = 64;
  const corpus::Generator gen(spec);
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(gen.file(i++ % gen.size()));
}
BENCHMARK(BM_GenerateFile);

}  // namespace

BENCHMARK_MAIN();
