// Microbenchmarks for the hot paths: attention kernels, surrogate module
// forwards, and the two decode paths whose wall-time ratio the bench
// subcommand reports. Run via build/benchmarks/kvs_benchmarks.

#include <benchmark/benchmark.h>

#include <vector>

#include "kvs/blend.hpp"
#include "kvs/model.hpp"
#include "kvs/surrogate.hpp"
#include "kvs/tensor.hpp"

namespace {

kvs::Vector random_vector(int dim, kvs::Prng& g) {
  kvs::Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = g.next_gaussian();
  return v;
}

void BM_LogSumExp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  kvs::Prng g(1);
  kvs::Vector s = random_vector(n, g);
  for (auto _ : state) {
    benchmark::DoNotOptimize(kvs::log_sum_exp(s));
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_LogSumExp)->Arg(256)->Arg(4096)->Arg(65536);

void BM_Softmax(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  kvs::Prng g(2);
  kvs::Vector s = random_vector(n, g);
  for (auto _ : state) {
    benchmark::DoNotOptimize(kvs::softmax(s));
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Softmax)->Arg(256)->Arg(4096);

void BM_AttendFull(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int d = 16;
  kvs::Prng g(3);
  kvs::Matrix k(0, d), v(0, d);
  for (int i = 0; i < n; ++i) {
    k.append_row(random_vector(d, g));
    v.append_row(random_vector(d, g));
  }
  kvs::Vector q = random_vector(d, g);
  for (auto _ : state) {
    benchmark::DoNotOptimize(kvs::attend_full(q, k, v));
  }
}
BENCHMARK(BM_AttendFull)->Arg(512)->Arg(4096)->Arg(32768);

kvs::SurrogateStack make_stack(kvs::Family family, const kvs::ModelConfig& cfg, int n,
                               double rho) {
  kvs::ModelWeights w = kvs::init_model(cfg);
  kvs::Prng g(4);
  std::vector<int> context(static_cast<std::size_t>(n));
  for (int& t : context) t = static_cast<int>(g.next_below(cfg.vocab));
  kvs::PrefillResult pre = kvs::prefill(w, context);
  kvs::CapacityPlan plan =
      kvs::plan_capacity(rho, n, cfg.head_dim, cfg.layers, cfg.kv_heads);
  return kvs::init_surrogate_stack(family, plan, cfg.group_size, kvs::MlpShape{}, &pre.cache,
                                   11, kvs::model_weights_hash(w));
}

void BM_ModuleForwardQuadrature(benchmark::State& state) {
  kvs::ModelConfig cfg;
  kvs::SurrogateStack stack = make_stack(kvs::Family::quadrature, cfg, 2048, 0.05);
  kvs::Prng g(5);
  kvs::Vector q = random_vector(cfg.head_dim, g);
  for (auto _ : state) {
    benchmark::DoNotOptimize(stack.forward(0, q));
  }
}
BENCHMARK(BM_ModuleForwardQuadrature);

void BM_ModuleForwardMlp(benchmark::State& state) {
  kvs::ModelConfig cfg;
  kvs::SurrogateStack stack = make_stack(kvs::Family::mlp, cfg, 2048, 0.05);
  kvs::Prng g(6);
  kvs::Vector q = random_vector(cfg.head_dim, g);
  for (auto _ : state) {
    benchmark::DoNotOptimize(stack.forward(0, q));
  }
}
BENCHMARK(BM_ModuleForwardMlp);

void BM_DecodeStepFull(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  kvs::ModelConfig cfg;
  kvs::ModelWeights w = kvs::init_model(cfg);
  kvs::Prng g(7);
  std::vector<int> context(static_cast<std::size_t>(n));
  for (int& t : context) t = static_cast<int>(g.next_below(cfg.vocab));
  kvs::PrefillResult pre = kvs::prefill(w, context);
  for (auto _ : state) {
    state.PauseTiming();
    kvs::KVCache cache = pre.cache;  // decode mutates the cache
    state.ResumeTiming();
    benchmark::DoNotOptimize(kvs::decode_step_full(w, cache, 1, n + 1));
  }
}
BENCHMARK(BM_DecodeStepFull)->Arg(512)->Arg(4096);

void BM_DecodeStepSurrogate(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  kvs::ModelConfig cfg;
  kvs::ModelWeights w = kvs::init_model(cfg);
  kvs::SurrogateStack stack = make_stack(kvs::Family::mlp, cfg, n, 0.05);
  kvs::StackProvider provider(stack);
  for (auto _ : state) {
    state.PauseTiming();
    kvs::BlendSession session(w, provider, n);
    state.ResumeTiming();
    benchmark::DoNotOptimize(kvs::decode_with_surrogate(session, 1));
  }
}
BENCHMARK(BM_DecodeStepSurrogate)->Arg(512)->Arg(4096);

}  // namespace

BENCHMARK_MAIN();
