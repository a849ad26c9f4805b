// Parallel kernels against their serial references, plus one segmenter training step.

#include <benchmark/benchmark.h>

#include "tnseg/kernels.hpp"
#include "tnseg/losses.hpp"
#include "tnseg/networks.hpp"
#include "tnseg/random.hpp"

namespace {

using namespace tnseg;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
}

// Arguments: batch, channels in, channels out, spatial extent.
void conv_args(benchmark::internal::Benchmark* b) {
    b->Args({4, 1, 8, 64})->Args({4, 8, 8, 64})->Args({4, 16, 16, 32})->Args({4, 48, 16, 32});
}

void BM_Conv3x3Forward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0)), cin = static_cast<std::size_t>(state.range(1)),
               cout = static_cast<std::size_t>(state.range(2)), hw = static_cast<std::size_t>(state.range(3));
    Tensor x = random_tensor({n, cin, hw, hw}, 1), w = random_tensor({cout, cin, 3, 3}, 2), b = random_tensor({cout}, 3);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_forward(x, w, b, 1, 1));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * cout * cin * 9 * hw * hw));
}
BENCHMARK(BM_Conv3x3Forward)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_Conv3x3ForwardReference(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0)), cin = static_cast<std::size_t>(state.range(1)),
               cout = static_cast<std::size_t>(state.range(2)), hw = static_cast<std::size_t>(state.range(3));
    Tensor x = random_tensor({n, cin, hw, hw}, 1), w = random_tensor({cout, cin, 3, 3}, 2), b = random_tensor({cout}, 3);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::reference::conv2d_forward(x, w, b, 1, 1));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * cout * cin * 9 * hw * hw));
}
BENCHMARK(BM_Conv3x3ForwardReference)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_Conv3x3Backward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0)), cin = static_cast<std::size_t>(state.range(1)),
               cout = static_cast<std::size_t>(state.range(2)), hw = static_cast<std::size_t>(state.range(3));
    Tensor x = random_tensor({n, cin, hw, hw}, 1), w = random_tensor({cout, cin, 3, 3}, 2);
    Tensor dy = random_tensor({n, cout, hw, hw}, 4);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_backward(x, w, dy, 1, 1, true));
}
BENCHMARK(BM_Conv3x3Backward)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_Conv3x3BackwardReference(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0)), cin = static_cast<std::size_t>(state.range(1)),
               cout = static_cast<std::size_t>(state.range(2)), hw = static_cast<std::size_t>(state.range(3));
    Tensor x = random_tensor({n, cin, hw, hw}, 1), w = random_tensor({cout, cin, 3, 3}, 2);
    Tensor dy = random_tensor({n, cout, hw, hw}, 4);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::reference::conv2d_backward(x, w, dy, 1, 1));
}
BENCHMARK(BM_Conv3x3BackwardReference)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_ChannelMoments(benchmark::State& state) {
    Tensor x = random_tensor({8, 32, 32, 32}, 5);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::channel_moments(x));
}
BENCHMARK(BM_ChannelMoments);

void BM_ChannelMomentsReference(benchmark::State& state) {
    Tensor x = random_tensor({8, 32, 32, 32}, 5);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::reference::channel_moments(x));
}
BENCHMARK(BM_ChannelMomentsReference);

// Arguments: depth, base channels, patches per domain, norm (0 = bn, 1 = tn).
void BM_SegmenterStep(benchmark::State& state) {
    SegmenterConfig cfg;
    cfg.depth = static_cast<std::size_t>(state.range(0));
    cfg.base_channels = static_cast<std::size_t>(state.range(1));
    cfg.norm = state.range(3) ? NormKind::tn : NormKind::bn;
    const auto b = static_cast<std::size_t>(state.range(2));
    Segmenter seg(cfg, 7);
    Tensor xs = random_tensor({b, 1, 64, 64}, 8), xt = random_tensor({b, 1, 64, 64}, 9);
    Tensor y(Shape{b, 64, 64}), mask(Shape{b, 64, 64}, 1.0);
    for (auto _ : state) {
        Tape tape;
        DomainPair p = seg.forward(tape, xs, xt, Mode::train);
        Var loss = ops::add(supervised_ce(*p.src, y, mask), minent_loss(entropy_map(*p.tgt), mask));
        tape.backward(loss);
    }
}
BENCHMARK(BM_SegmenterStep)
    ->Args({2, 8, 4, 1})
    ->Args({2, 8, 8, 1})
    ->Args({3, 8, 4, 1})
    ->Args({3, 16, 4, 1})
    ->Args({2, 8, 4, 0})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
