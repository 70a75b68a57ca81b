#include "tcaf/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace tcaf {

template <typename T>
Adam<T>::Adam(std::vector<std::pair<std::string, Tensor<T>>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) throw Error("adam: parameter '" + name + "' has no gradient");
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].second;
    auto values = p.mutable_data();
    const auto grad = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = static_cast<double>(grad[i]) + config_.weight_decay * static_cast<double>(values[i]);
      m[i] = static_cast<T>(b1 * static_cast<double>(m[i]) + (1.0 - b1) * g);
      v[i] = static_cast<T>(b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g);
      const double m_hat = static_cast<double>(m[i]) / c1;
      const double v_hat = static_cast<double>(v[i]) / c2;
      values[i] = static_cast<T>(static_cast<double>(values[i]) - config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience)
    : lr_(lr), factor_(factor), patience_(patience) {
  if (!(lr > 0.0)) throw ConfigError("scheduler: learning rate must be positive");
  if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("scheduler: factor must lie in (0, 1]");
}

bool PlateauScheduler::update(double metric) {
  if (!best_ || metric > *best_) {
    best_ = metric;
    counter_ = 0;
    return false;
  }
  ++counter_;
  if (counter_ > patience_) {
    lr_ *= factor_;
    counter_ = 0;
    return true;
  }
  return false;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("train: batch_size must be at least 1");
  if (!(adam.lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0) || !(adam.weight_decay >= 0.0)) throw ConfigError("train: Adam eps must be > 0, decay >= 0");
  if (!(lr_factor > 0.0 && lr_factor <= 1.0)) throw ConfigError("train: lr_factor must lie in (0, 1]");
  if (train_max_len == 0 || eval_max_len == 0) throw ConfigError("train: trim lengths must be at least 1");
}

ArchConfig arch_for_bundle(ArchConfig arch, const DatasetBundle& bundle) {
  arch.d_in_a = bundle.d_in_a;
  arch.d_in_v = bundle.d_in_v;
  arch.d_dim = bundle.d_dim;
  return arch;
}

std::vector<int> stage1_seen_classes(const DatasetBundle& bundle) {
  const Split s[] = {Split::train_seen};
  return bundle.classes_in(s);
}

std::vector<int> stage2_seen_classes(const DatasetBundle& bundle) {
  const Split s[] = {Split::train_seen, Split::val_seen, Split::val_unseen};
  return bundle.classes_in(s);
}

namespace {

std::vector<std::size_t> gather_split_samples(const DatasetBundle& bundle, std::span<const Split> splits) {
  std::vector<std::size_t> out;
  for (Split s : splits) out.insert(out.end(), bundle.split(s).begin(), bundle.split(s).end());
  return out;
}

}  // namespace

StageResult train_stage(const DatasetBundle& bundle, const StageSpec& spec, const ArchConfig& arch,
                        const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (spec.epochs == 0) throw ConfigError("train_stage: epoch budget must be at least 1");
  if (arch.d_in_a != bundle.d_in_a || arch.d_in_v != bundle.d_in_v || arch.d_dim != bundle.d_dim) {
    throw DimensionError("train_stage: model widths do not match the bundle");
  }
  const std::vector<std::size_t> train = gather_split_samples(bundle, spec.train_splits);
  if (train.empty()) throw DataError("train_stage: empty training split");

  std::map<int, std::size_t> label_index;
  for (std::size_t k = 0; k < spec.seen_classes.size(); ++k) label_index[spec.seen_classes[k]] = k;
  for (std::size_t i : train) {
    if (!label_index.count(bundle.samples[i].class_id)) {
      throw DataError("train_stage: sample '" + bundle.samples[i].id + "' has a class outside the label space");
    }
  }

  const bool use_audio = config.modality != InputModality::visual;
  const bool use_visual = config.modality != InputModality::audio;
  TcafModel<float> model(arch, config.seed);
  Adam<float> adam(model.trainable(use_audio, use_visual, config.loss.enable_rec), config.adam);
  PlateauScheduler scheduler(config.adam.lr, config.lr_factor, config.patience);
  const Tensor<float> seen_embeddings = bundle.embedding_matrix<float>(spec.seen_classes);

  const bool validate = !spec.val_unseen_splits.empty();
  std::vector<std::size_t> val_samples;
  std::vector<int> candidates = spec.seen_classes;
  if (validate) {
    val_samples = gather_split_samples(bundle, spec.val_seen_splits);
    const auto unseen = gather_split_samples(bundle, spec.val_unseen_splits);
    val_samples.insert(val_samples.end(), unseen.begin(), unseen.end());
    for (int c : bundle.classes_in(spec.val_unseen_splits)) candidates.push_back(c);
    for (int c : bundle.classes_in(spec.val_seen_splits)) candidates.push_back(c);
  }
  EvalOptions eval_options;
  eval_options.max_len = config.eval_max_len;
  eval_options.modality = config.modality;

  const RngStream root(config.seed, "stage" + std::to_string(spec.stage));
  StageResult result{model.clone(), model.clone(), {}, {}};
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    const double lr = spec.lr_schedule.empty() ? scheduler.lr() : spec.lr_schedule.at(epoch - 1);
    adam.set_lr(lr);
    result.lr_per_epoch.push_back(lr);

    std::vector<std::size_t> order = train;
    RngStream shuffle_rng = root.fork("shuffle", epoch);
    shuffle_rng.shuffle(order);
    RngStream trim_rng = root.fork("trim", epoch);
    RngStream dropout_rng = root.fork("dropout", epoch);

    EpochRecord rec;
    rec.stage = spec.stage;
    rec.epoch = epoch;
    rec.lr = lr;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      // A trailing single-sample batch has degenerate batch-norm statistics.
      if (end - start == 1 && order.size() > 1) break;
      std::vector<AVSample> batch;
      std::vector<std::size_t> gt;
      for (std::size_t i = start; i < end; ++i) {
        const AVSample& raw = bundle.samples[order[i]];
        batch.push_back(trim_sequence(restrict_modality(raw, config.modality), config.train_max_len, Mode::train,
                                      trim_rng));
        gt.push_back(label_index.at(raw.class_id));
      }
      std::vector<ClipView> views;
      for (const auto& s : batch) views.push_back(s.view());

      model.zero_grad();
      const auto loss = total_loss(model, views, gt, seen_embeddings, config.loss, Mode::train, dropout_rng);
      backward(loss.total);
      adam.step();

      rec.l_ce += loss.l_ce;
      rec.l_reg += loss.l_reg;
      rec.l_rec += loss.l_rec;
      rec.total += loss.total_value;
      ++rec.steps;
    }
    if (rec.steps > 0) {
      const auto n = static_cast<double>(rec.steps);
      rec.l_ce /= n;
      rec.l_reg /= n;
      rec.l_rec /= n;
      rec.total /= n;
    }

    if (validate) {
      const ScoreMatrix scores =
          score_samples(model, bundle, val_samples, candidates, spec.seen_classes, eval_options);
      const GammaSearch search = search_gamma(scores);
      const GzslMetrics m = gzsl_metrics(scores, search.gamma);
      rec.validated = true;
      rec.val_seen = m.seen;
      rec.val_unseen = m.unseen;
      rec.val_hm = m.hm;
      rec.val_zsl = zsl_accuracy(scores);
      rec.val_gamma = search.gamma;
      if (!have_best || m.hm > result.history.best_hm) {
        have_best = true;
        result.history.best_epoch = epoch;
        result.history.best_gamma = search.gamma;
        result.history.best_hm = m.hm;
        result.best_model = model.clone();
      }
      if (spec.lr_schedule.empty()) scheduler.update(m.hm);
    }
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  result.final_model = std::move(model);
  if (!have_best) result.best_model = result.final_model.clone();
  return result;
}

TwoStageResult two_stage_train(const DatasetBundle& bundle, const ArchConfig& arch, const TrainConfig& config,
                               const EpochCallback& on_epoch) {
  if (bundle.split(Split::val_unseen).empty() || bundle.split(Split::val_seen).empty()) {
    throw DataError("two_stage_train: bundle needs val_seen and val_unseen splits");
  }
  if (bundle.split(Split::test_seen).empty() || bundle.split(Split::test_unseen).empty()) {
    throw DataError("two_stage_train: bundle needs test_seen and test_unseen splits");
  }

  StageSpec s1;
  s1.stage = 1;
  s1.train_splits = {Split::train_seen};
  s1.seen_classes = stage1_seen_classes(bundle);
  s1.val_seen_splits = {Split::val_seen};
  s1.val_unseen_splits = {Split::val_unseen};
  s1.epochs = config.epochs;
  StageResult r1 = train_stage(bundle, s1, arch, config, on_epoch);

  StageSpec s2;
  s2.stage = 2;
  s2.train_splits = {Split::train_seen, Split::val_seen, Split::val_unseen};
  s2.seen_classes = stage2_seen_classes(bundle);
  s2.epochs = r1.history.best_epoch;
  s2.lr_schedule.assign(r1.lr_per_epoch.begin(), r1.lr_per_epoch.begin() + static_cast<std::ptrdiff_t>(s2.epochs));
  StageResult r2 = train_stage(bundle, s2, arch, config, on_epoch);

  EvalOptions eval_options;
  eval_options.max_len = config.eval_max_len;
  eval_options.modality = config.modality;
  const Split seen_test[] = {Split::test_seen};
  const Split unseen_test[] = {Split::test_unseen};
  EvalReport test = evaluate_gzsl(r2.final_model, bundle, seen_test, unseen_test, s2.seen_classes,
                                  r1.history.best_gamma, eval_options);

  const double gamma = r1.history.best_gamma;
  return TwoStageResult{std::move(r2.final_model), std::move(r1.best_model), std::move(r1.history),
                        std::move(r2.history), gamma, s2.epochs, s2.seen_classes, std::move(test)};
}

}  // namespace tcaf
