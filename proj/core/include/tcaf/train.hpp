#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tcaf/dataset.hpp"
#include "tcaf/eval.hpp"
#include "tcaf/losses.hpp"
#include "tcaf/model.hpp"

namespace tcaf {

struct AdamConfig {
  double lr = 7e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

/// Adam with L2 decay folded into the gradient before the moment updates.
template <typename T>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<T>>> params, AdamConfig config);

  /// Throws Error naming the first parameter without a gradient.
  void step();

  double lr() const { return config_.lr; }
  void set_lr(double lr) { config_.lr = lr; }
  std::int64_t step_count() const { return steps_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t steps_ = 0;
};

/// Multiplies the learning rate by `factor` once the monitored metric has not
/// strictly improved for more than `patience` consecutive epochs.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.1, std::size_t patience = 3);

  /// Records one epoch's metric; returns true when the rate was reduced.
  bool update(double metric);

  double lr() const { return lr_; }
  std::size_t counter() const { return counter_; }
  std::optional<double> best() const { return best_; }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  std::size_t counter_ = 0;
  std::optional<double> best_;
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  AdamConfig adam;
  double lr_factor = 0.1;
  std::size_t patience = 3;
  std::size_t train_max_len = 60;
  std::size_t eval_max_len = 300;
  std::uint64_t seed = 0;
  LossConfig loss;
  InputModality modality = InputModality::both;

  void validate() const;
  friend bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return a.epochs == b.epochs && a.batch_size == b.batch_size && a.adam.lr == b.adam.lr &&
           a.adam.beta1 == b.adam.beta1 && a.adam.beta2 == b.adam.beta2 && a.adam.eps == b.adam.eps &&
           a.adam.weight_decay == b.adam.weight_decay && a.lr_factor == b.lr_factor && a.patience == b.patience &&
           a.train_max_len == b.train_max_len && a.eval_max_len == b.eval_max_len && a.seed == b.seed &&
           a.loss == b.loss && a.modality == b.modality;
  }
};

struct EpochRecord {
  int stage = 1;
  std::size_t epoch = 0;  // 1-based
  double l_ce = 0.0;
  double l_reg = 0.0;
  double l_rec = 0.0;
  double total = 0.0;
  double lr = 0.0;
  std::size_t steps = 0;
  bool validated = false;
  double val_seen = 0.0;
  double val_unseen = 0.0;
  double val_hm = 0.0;
  double val_zsl = 0.0;
  double val_gamma = 0.0;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based, 0 when nothing was validated
  double best_gamma = 0.0;
  double best_hm = 0.0;
};

/// What one stage trains on and validates against.
struct StageSpec {
  int stage = 1;
  std::vector<Split> train_splits;
  /// Label space of the training losses, ascending class ids.
  std::vector<int> seen_classes;
  std::vector<Split> val_seen_splits;
  std::vector<Split> val_unseen_splits;
  std::size_t epochs = 0;
  /// When non-empty, the per-epoch learning rates to use instead of the
  /// plateau scheduler.
  std::vector<double> lr_schedule;
};

struct StageResult {
  TcafModel<float> best_model;   // snapshot at the best validation epoch (final model without validation)
  TcafModel<float> final_model;  // parameters after the last epoch
  RunHistory history;
  std::vector<double> lr_per_epoch;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

StageResult train_stage(const DatasetBundle& bundle, const StageSpec& spec, const ArchConfig& arch,
                        const TrainConfig& config, const EpochCallback& on_epoch = {});

struct TwoStageResult {
  TcafModel<float> model;
  TcafModel<float> stage1_best;
  RunHistory stage1;
  RunHistory stage2;
  double gamma = 0.0;
  std::size_t epochs = 0;
  std::vector<int> final_seen_classes;
  EvalReport test;
};

/// Stage 1 on train_seen with validation on val_seen/val_unseen picks E* and
/// gamma*; stage 2 retrains from the same initialization on train_seen and
/// both validation splits for E* epochs and is evaluated on the test splits.
TwoStageResult two_stage_train(const DatasetBundle& bundle, const ArchConfig& arch, const TrainConfig& config,
                               const EpochCallback& on_epoch = {});

/// Stage 1 label space: classes of train_seen.
std::vector<int> stage1_seen_classes(const DatasetBundle& bundle);
/// Stage 2 label space: classes of train_seen, val_seen and val_unseen.
std::vector<int> stage2_seen_classes(const DatasetBundle& bundle);

/// Sets the arch input and embedding widths from the bundle.
ArchConfig arch_for_bundle(ArchConfig arch, const DatasetBundle& bundle);

}  // namespace tcaf
