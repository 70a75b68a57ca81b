#include <benchmark/benchmark.h>

#include <vector>

#include "tcaf/dataset.hpp"
#include "tcaf/losses.hpp"
#include "tcaf/train.hpp"

using namespace tcaf;

namespace {

SynthConfig bench_synth() {
  SynthConfig c;
  c.k_seen = 10;
  c.k_val_unseen = 3;
  c.k_test_unseen = 5;
  c.samples_per_class = 8;
  c.audio_len_min = 3;
  c.audio_len_max = 5;
  c.visual_len_min = 4;
  c.visual_len_max = 7;
  c.d_in_v = 256;
  c.latent_dim = 8;
  return c;
}

ArchConfig bench_arch(const DatasetBundle& b) {
  ArchConfig a;
  a.layers = 2;
  return arch_for_bundle(a, b);
}

std::vector<ClipView> first_views(const DatasetBundle& b, std::size_t n) {
  std::vector<ClipView> views;
  for (std::size_t i = 0; i < n && i < b.samples.size(); ++i) views.push_back(b.samples[i].view());
  return views;
}

}  // namespace

static void BM_EncodeEval(benchmark::State& state) {
  const DatasetBundle b = synth_generate(bench_synth());
  TcafModel<float> model(bench_arch(b), 0);
  for (auto& [name, st] : model.norm_states()) st.batches_tracked = 1;
  const auto views = first_views(b, static_cast<std::size_t>(state.range(0)));
  RngStream rng(0, "bench");
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.encode(views, Mode::eval, rng));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncodeEval)->Arg(1)->Arg(64);

static void BM_TrainStep(benchmark::State& state) {
  const DatasetBundle b = synth_generate(bench_synth());
  TcafModel<float> model(bench_arch(b), 0);
  Adam<float> adam(model.trainable(true, true, true), AdamConfig{});
  const auto views = first_views(b, 64);
  std::vector<int> classes;
  std::vector<std::size_t> gt;
  for (std::size_t c = 0; c < 10; ++c) classes.push_back(static_cast<int>(c));
  for (std::size_t i = 0; i < views.size(); ++i) gt.push_back(static_cast<std::size_t>(b.samples[i].class_id) % 10);
  const Tensor<float> words = b.embedding_matrix<float>(classes);
  RngStream rng(0, "bench");
  for (auto _ : state) {
    model.zero_grad();
    const auto loss = total_loss(model, views, gt, words, LossConfig{}, Mode::train, rng);
    backward(loss.total);
    adam.step();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(views.size()));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);
