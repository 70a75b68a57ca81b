#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "support/helpers.hpp"
#include "tcaf/checkpoint.hpp"
#include "tcaf/train.hpp"

using namespace tcaf;

namespace {

SynthConfig tiny_synth(std::size_t per_class = 6) {
  SynthConfig c;
  c.k_seen = 4;
  c.k_val_unseen = 2;
  c.k_test_unseen = 2;
  c.samples_per_class = per_class;
  c.audio_len_min = 2;
  c.audio_len_max = 3;
  c.visual_len_min = 2;
  c.visual_len_max = 4;
  c.d_in_a = 6;
  c.d_in_v = 5;
  c.d_dim = 8;
  c.latent_dim = 4;
  return c;
}

TrainConfig fast_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.adam.lr = 1e-3;
  return t;
}

StageSpec stage1(const DatasetBundle& b, std::size_t epochs) {
  StageSpec s;
  s.train_splits = {Split::train_seen};
  s.seen_classes = stage1_seen_classes(b);
  s.val_seen_splits = {Split::val_seen};
  s.val_unseen_splits = {Split::val_unseen};
  s.epochs = epochs;
  return s;
}

void expect_same_history(const RunHistory& a, const RunHistory& b) {
  ASSERT_EQ(a.epochs.size(), b.epochs.size());
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    EXPECT_EQ(a.epochs[i].total, b.epochs[i].total);
    EXPECT_EQ(a.epochs[i].l_ce, b.epochs[i].l_ce);
    EXPECT_EQ(a.epochs[i].val_hm, b.epochs[i].val_hm);
    EXPECT_EQ(a.epochs[i].lr, b.epochs[i].lr);
  }
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  EXPECT_EQ(a.best_gamma, b.best_gamma);
}

}  // namespace

TEST(Adam, ZeroGradientNoDecayLeavesParameters) {
  Tensor<double> p(Shape{3}, {1.0, -2.0, 3.0}, true);
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  Adam<double> adam({{"p", p}}, cfg);
  std::fill(p.mutable_grad().begin(), p.mutable_grad().end(), 0.0);
  adam.step();
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(p.data()[1], -2.0);
  EXPECT_EQ(p.data()[2], 3.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {1e-3, 0.5, 20.0}) {
    Tensor<double> p(Shape{1}, {0.25}, true);
    AdamConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.0;
    Adam<double> adam({{"p", p}}, cfg);
    p.mutable_grad()[0] = g;
    adam.step();
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    EXPECT_NEAR(p.data()[0] - 0.25, -0.01 * g / (g + 1e-8), 1e-15);
  }
}

TEST(Adam, MissingGradientThrows) {
  Tensor<double> p(Shape{1}, {0.0}, true);
  Adam<double> adam({{"orphan", p}}, AdamConfig{});
  EXPECT_THROW(adam.step(), Error);
}

TEST(Adam, DeterministicSteps) {
  auto run = [] {
    Tensor<float> p(Shape{4}, {1, 2, 3, 4}, true);
    Adam<float> adam({{"p", p}}, AdamConfig{});
    RngStream rng(5, "grads");
    for (int s = 0; s < 10; ++s) {
      for (auto& g : p.mutable_grad()) g = static_cast<float>(rng.normal());
      adam.step();
    }
    return std::vector<float>(p.data().begin(), p.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ConvergesOnQuadratic) {
  Tensor<double> p(Shape{2}, {3.0, -4.0}, true);
  const double target[] = {1.0, 2.0};
  AdamConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.0;
  Adam<double> adam({{"p", p}}, cfg);
  for (int s = 0; s < 2000; ++s) {
    p.zero_grad();
    const Tensor<double> t(Shape{2}, {target[0], target[1]});
    backward(sum(mul(Tensor<double>::full(Shape{2}, 1.0), square(sub(p, t)))));
    adam.step();
  }
  EXPECT_NEAR(p.data()[0], 1.0, 1e-3);
  EXPECT_NEAR(p.data()[1], 2.0, 1e-3);
}

TEST(Plateau, Improvement) {
  PlateauScheduler s(1.0, 0.1, 3);
  EXPECT_FALSE(s.update(10));
  EXPECT_FALSE(s.update(11));
  EXPECT_EQ(s.counter(), 0u);
  EXPECT_EQ(s.lr(), 1.0);
}

TEST(Plateau, PatienceArithmetic) {
  PlateauScheduler s(1.0, 0.1, 3);
  const bool fired[] = {s.update(10), s.update(10), s.update(10), s.update(10), s.update(10)};
  EXPECT_FALSE(fired[0] || fired[1] || fired[2] || fired[3]);
  EXPECT_TRUE(fired[4]);
  EXPECT_DOUBLE_EQ(s.lr(), 0.1);
}

TEST(Plateau, TwoPlateaus) {
  PlateauScheduler s(0.5, 0.1, 3);
  for (int i = 0; i < 9; ++i) s.update(10);
  EXPECT_NEAR(s.lr(), 0.5 * 0.01, 1e-15);
}

TEST(Plateau, NeverIncreases) {
  PlateauScheduler s(1e-3, 0.5, 1);
  RngStream rng(1, "hm");
  double last = s.lr();
  for (int i = 0; i < 200; ++i) {
    s.update(rng.uniform(0, 100));
    EXPECT_LE(s.lr(), last);
    EXPECT_GT(s.lr(), 0.0);
    last = s.lr();
  }
  EXPECT_THROW(PlateauScheduler(0.0), ConfigError);
}

TEST(TrainStage, OneEpochContract) {
  SynthConfig c = tiny_synth(5);
  c.k_seen = 2;
  const DatasetBundle b = synth_generate(c);
  const ArchConfig a = arch_for_bundle(tcaf::testing::tiny_arch(), b);
  const StageResult r = train_stage(b, stage1(b, 1), a, fast_train(1));
  ASSERT_EQ(r.history.epochs.size(), 1u);
  EXPECT_TRUE(r.history.epochs[0].validated);
  EXPECT_EQ(r.history.best_epoch, 1u);
  EXPECT_FALSE(serialize_model(r.best_model).empty());
}

TEST(TrainStage, SameSeedSameHistory) {
  const DatasetBundle b = synth_generate(tiny_synth());
  const ArchConfig a = arch_for_bundle(tcaf::testing::tiny_arch(), b);
  const StageResult r1 = train_stage(b, stage1(b, 3), a, fast_train(3));
  const StageResult r2 = train_stage(b, stage1(b, 3), a, fast_train(3));
  expect_same_history(r1.history, r2.history);
  EXPECT_EQ(serialize_model(r1.final_model), serialize_model(r2.final_model));
}

TEST(TrainStage, MemorizesTinySet) {
  // Four samples, one batch, a wide model: the second epoch's loss should not
  // exceed the first in the median over three seeds.
  std::vector<double> deltas;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    SynthConfig c = tiny_synth(2);
    c.k_seen = 2;
    c.val_seen_fraction = 0.0;
    c.test_seen_fraction = 0.0;
    c.seed = seed;
    const DatasetBundle b = synth_generate(c);
    ArchConfig a = arch_for_bundle(tcaf::testing::tiny_arch(), b);
    a.d_fhidd = 32;
    a.dropout = {0, 0, 0, 0, 0};
    StageSpec s;
    s.train_splits = {Split::train_seen};
    s.seen_classes = stage1_seen_classes(b);
    s.epochs = 2;
    TrainConfig t = fast_train(2);
    t.seed = seed;
    const StageResult r = train_stage(b, s, a, t);
    deltas.push_back(r.history.epochs[1].total - r.history.epochs[0].total);
  }
  std::sort(deltas.begin(), deltas.end());
  EXPECT_LE(deltas[1], 0.0);
}

TEST(TrainStage, BestCheckpointReproducesValidationHm) {
  const DatasetBundle b = synth_generate(tiny_synth());
  const ArchConfig a = arch_for_bundle(tcaf::testing::tiny_arch(), b);
  const StageSpec spec = stage1(b, 4);
  StageResult r = train_stage(b, spec, a, fast_train(4));
  const auto bytes = serialize_model(r.best_model);
  TcafModel<float> restored = deserialize_model<float>(bytes);
  const Split s[] = {Split::val_seen}, u[] = {Split::val_unseen};
  EvalOptions o;
  o.max_len = fast_train(4).eval_max_len;
  const EvalReport rep = evaluate_gzsl(restored, b, s, u, spec.seen_classes, r.history.best_gamma, o);
  EXPECT_EQ(rep.hm, r.history.best_hm);
}

TEST(TwoStage, ProtocolInvariants) {
  const DatasetBundle b = synth_generate(tiny_synth());
  const ArchConfig a = arch_for_bundle(tcaf::testing::tiny_arch(), b);
  const TwoStageResult r1 = two_stage_train(b, a, fast_train(3));
  EXPECT_EQ(r1.stage2.epochs.size(), r1.stage1.best_epoch);
  EXPECT_EQ(r1.epochs, r1.stage1.best_epoch);
  const auto grid = gamma_grid();
  EXPECT_NE(std::find(grid.begin(), grid.end(), r1.gamma), grid.end());
  for (std::size_t e = 0; e < r1.stage2.epochs.size(); ++e) EXPECT_EQ(r1.stage2.epochs[e].lr, r1.stage1.epochs[e].lr);
  const TwoStageResult r2 = two_stage_train(b, a, fast_train(3));
  expect_same_history(r1.stage1, r2.stage1);
  expect_same_history(r1.stage2, r2.stage2);
  EXPECT_EQ(serialize_model(r1.model), serialize_model(r2.model));
  EXPECT_EQ(r1.test.hm, r2.test.hm);
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  t.epochs = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.adam.beta1 = 1.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.lr_factor = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
}
