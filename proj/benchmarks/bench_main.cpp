#include <benchmark/benchmark.h>

#include <random>

#include "dped/align.hpp"
#include "dped/convert.hpp"
#include "dped/eval.hpp"
#include "dped/layers.hpp"
#include "dped/losses.hpp"
#include "dped/nets.hpp"

using namespace dped;

namespace {

Tensor<float> random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> t(n, c, h, w);
  for (auto& v : t.data) v = u(rng);
  return t;
}

ImageRGB random_image(int h, int w, std::uint64_t seed) {
  return to_image<3>(random_tensor(1, 3, h, w, seed));
}

void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const auto x = random_tensor(1, c, 100, 100, 1);
  const auto g = ConvGeometry::same(c, c, 3, 1, 100, 100, Padding::Zero);
  std::vector<float> w(g.weight_size(), 0.01f), b(c, 0.0f);
  Tensor<float> y;
  for (auto _ : state) {
    conv2d_forward<float>(x, w, b, g, y);
    benchmark::DoNotOptimize(y.data.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(g.weight_size()) * 100 * 100);
}
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_GeneratorInfer(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  const auto w = generator_init(1);
  const auto x = random_tensor(1, 3, side, side, 2);
  for (auto _ : state) benchmark::DoNotOptimize(generator_forward(w, x, Mode::Infer).data.data());
  state.SetItemsProcessed(state.iterations() * side * side);
}
BENCHMARK(BM_GeneratorInfer)->Arg(100)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_GeneratorTrainStep(benchmark::State& state) {
  const auto w = generator_init(1, GeneratorConfig{.channels = 16, .blocks = 4});
  const auto x = random_tensor(4, 3, 100, 100, 3);
  for (auto _ : state) {
    GeneratorTape<float> tape;
    auto y = generator_forward(w, x, Mode::Train, &tape);
    benchmark::DoNotOptimize(generator_backward(w, tape, y).params.size());
  }
}
BENCHMARK(BM_GeneratorTrainStep)->Unit(benchmark::kMillisecond);

void BM_ColorLoss(benchmark::State& state) {
  const auto x = random_tensor(static_cast<int>(state.range(0)), 3, 100, 100, 4);
  const auto y = random_tensor(static_cast<int>(state.range(0)), 3, 100, 100, 5);
  const auto k = gaussian_kernel();
  Tensor<float> grad;
  for (auto _ : state) benchmark::DoNotOptimize(color_loss(x, y, k, &grad));
}
BENCHMARK(BM_ColorLoss)->Arg(1)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_SiftDetect(benchmark::State& state) {
  const auto img = to_grayscale(load_image(DPED_BENCH_DATA_DIR "/chelsea.png"));
  for (auto _ : state) benchmark::DoNotOptimize(detect_and_describe(img).size());
}
BENCHMARK(BM_SiftDetect)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const auto a = random_image(100, 100, 6);
  const auto b = random_image(100, 100, 7);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
