// Serial reference vs OpenMP kernels, plus one full training step.

#include <benchmark/benchmark.h>

#include <vector>

#include "deformer/config.hpp"
#include "deformer/data.hpp"
#include "deformer/kernels.hpp"
#include "deformer/model.hpp"
#include "deformer/ops.hpp"

namespace {

using deformer::kernels::Backend;

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  auto rng = deformer::RngState::from_seed(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

template <Backend B>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  deformer::kernels::GemmArgs g;
  g.batch = 16, g.m = n, g.n = n, g.k = n;
  g.a_batch = n * n, g.a_row = n, g.a_col = 1;
  g.b_batch = n * n, g.b_row = n, g.b_col = 1;
  g.c_batch = n * n;
  const auto a = random_vec(g.batch * n * n, 1), b = random_vec(g.batch * n * n, 2);
  std::vector<float> c(g.batch * n * n);
  deformer::kernels::ScopedBackend scope(B);
  for (auto _ : state) {
    deformer::kernels::gemm(g, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.batch * n * n * n));
}
BENCHMARK(BM_Gemm<Backend::kSerial>)->Arg(32)->Arg(64)->Arg(128);
BENCHMARK(BM_Gemm<Backend::kParallel>)->Arg(32)->Arg(64)->Arg(128);

template <Backend B>
void BM_ConvForward(benchmark::State& state) {
  deformer::kernels::ConvArgs c;
  c.batch = 32, c.c_in = 1, c.c_out = 16, c.rows = 8, c.len = 256;
  c.ksize = static_cast<std::size_t>(state.range(0));
  const auto x = random_vec(c.batch * c.c_in * c.rows * c.len, 3);
  const auto w = random_vec(c.c_out * c.c_in * c.ksize, 4);
  const auto bias = random_vec(c.c_out, 5);
  std::vector<float> y(c.batch * c.c_out * c.rows * c.len);
  deformer::kernels::ScopedBackend scope(B);
  for (auto _ : state) {
    deformer::kernels::conv_forward(c, x.data(), w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_ConvForward<Backend::kSerial>)->Arg(13)->Arg(51);
BENCHMARK(BM_ConvForward<Backend::kParallel>)->Arg(13)->Arg(51);

template <Backend B>
void BM_TrainStep(benchmark::State& state) {
  const auto cfg = deformer::model_preset("desk");
  deformer::Deformer<float> model(cfg, 7);
  deformer::Tensor<float> x(deformer::Shape{32, cfg.channels, cfg.segment_len},
                            random_vec(32 * cfg.channels * cfg.segment_len, 6));
  std::vector<int> labels(32);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
  auto rng = deformer::RngState::from_seed(8);
  deformer::kernels::ScopedBackend scope(B);
  for (auto _ : state) {
    model.zero_grad();
    auto loss = deformer::ops::cross_entropy(model.forward(x, deformer::Mode::kTrain, rng), labels);
    loss.backward();
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_TrainStep<Backend::kSerial>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrainStep<Backend::kParallel>)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
