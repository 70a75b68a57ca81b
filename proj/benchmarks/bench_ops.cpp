#include <benchmark/benchmark.h>

#include <vector>

#include "tcaf/model.hpp"
#include "tcaf/ops.hpp"
#include "tcaf/rng.hpp"

using namespace tcaf;

namespace {

Tensor<float> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  RngStream rng(seed, "bench");
  std::vector<float> v(r * c);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>::matrix(r, c, std::move(v));
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

// Embedding-block shape: tokens x d_in times d_in x d_fhidd.
static void BM_MatmulTall(benchmark::State& state) {
  const auto a = random_matrix(64 * 12, 512, 3), b = random_matrix(512, 512, 4);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}
BENCHMARK(BM_MatmulTall);

static void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_matrix(n, n, 5), b = random_matrix(n, n, 6);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    backward(sum(matmul(a, b)));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(128);

static void BM_MaskedAttention(benchmark::State& state) {
  const auto ta = static_cast<std::size_t>(state.range(0)), tv = ta * 3 / 2;
  const std::size_t n = 1 + ta + tv, clips = 16, width = 8 * 64;
  const auto q = random_matrix(n * clips, width, 7), k = random_matrix(n * clips, width, 8),
             v = random_matrix(n * clips, width, 9);
  const Mask mask = attention_mask(AttentionVariant::parse("cross"), true, ta, tv);
  std::vector<AttentionSegment> segs;
  for (std::size_t c = 0; c < clips; ++c) segs.push_back({c * n, n, mask});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(masked_attention(q, k, v, segs, 8, MaskSemantics::exclude));
}
BENCHMARK(BM_MaskedAttention)->Arg(4)->Arg(16)->Arg(60);

static void BM_LayerNorm(benchmark::State& state) {
  const auto x = random_matrix(1024, 300, 10);
  const auto g = Tensor<float>::full(Shape{300}, 1.0f), b = Tensor<float>::zeros(Shape{300});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(layer_norm(x, g, b, 1e-5));
}
BENCHMARK(BM_LayerNorm);
BENCHMARK_MAIN();
