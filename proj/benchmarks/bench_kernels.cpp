#include <benchmark/benchmark.h>

#include "cyclevar/ops.hpp"
#include "cyclevar/rng.hpp"

using namespace cyclevar;

namespace {

Tensor<float> random_tensor(Shape shape, uint64_t seed) {
    Rng rng(seed, "bench");
    return Tensor<float>::randn(std::move(shape), rng, 1.0, false);
}

void BM_matmul(benchmark::State& state) {
    const int m = int(state.range(0)), k = int(state.range(1)), n = int(state.range(2));
    auto a = random_tensor({m, k}, 1);
    auto b = random_tensor({k, n}, 2);
    for (auto _ : state) {
        NoGradGuard ng;
        auto c = matmul(a, b);
        benchmark::DoNotOptimize(c.val().data());
    }
    state.SetItemsProcessed(int64_t(state.iterations()) * 2 * m * k * n);
}

void BM_conv2d(benchmark::State& state) {
    const int c = int(state.range(0)), h = int(state.range(1));
    auto x = random_tensor({c, h, h}, 3);
    auto w = random_tensor({c * 2, c, 4, 4}, 4);
    auto b = random_tensor({c * 2}, 5);
    for (auto _ : state) {
        NoGradGuard ng;
        auto y = conv2d(x, w, b, 2, 1);
        benchmark::DoNotOptimize(y.val().data());
    }
}

void BM_softmax_rows(benchmark::State& state) {
    auto x = random_tensor({int(state.range(0)), int(state.range(1))}, 6);
    for (auto _ : state) {
        NoGradGuard ng;
        auto y = softmax_rows(x, 2.0);
        benchmark::DoNotOptimize(y.val().data());
    }
}

}  // namespace

// Transformer-sized matmuls
BENCHMARK(BM_matmul)->Args({85, 64, 192})->Args({85, 64, 256})->Args({85, 256, 64});
BENCHMARK(BM_conv2d)->Args({16, 8})->Args({32, 16});
BENCHMARK(BM_softmax_rows)->Args({85, 64})->Args({64, 64});

BENCHMARK_MAIN();
