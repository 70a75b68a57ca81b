#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tcaf/dataset.hpp"
#include "tcaf/model.hpp"

namespace tcaf {

/// Per-sample scores over candidate classes: score = -||theta_w^j - theta_o||.
/// Columns are ordered by ascending class id.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::vector<double> scores;  // rows x class_ids.size()
  std::vector<int> class_ids;
  std::vector<bool> seen;  // per column
  std::vector<int> labels;  // per row

  std::size_t cols() const { return class_ids.size(); }
  double at(std::size_t r, std::size_t c) const { return scores[r * cols() + c]; }
  bool is_seen_class(int class_id) const;
  /// Throws DataError when shapes or the seen/unseen partition are inconsistent.
  void validate() const;
};

/// Argmax class id per row; ties go to the smallest column index.
std::vector<int> predict(const ScoreMatrix& scores);

/// Subtracts gamma from every seen-class score.
ScoreMatrix calibrated_scores(const ScoreMatrix& scores, double gamma);

/// Unweighted mean over `class_set` of per-class accuracy, as a percentage.
double mean_class_accuracy(std::span<const int> predictions, std::span<const int> labels,
                           std::span<const int> class_set);

/// 2SU/(S+U), 0 when S+U = 0.
double harmonic_mean(double seen, double unseen);

/// 0.0, 0.2, ..., 3.0.
std::vector<double> gamma_grid();

struct GzslMetrics {
  double seen = 0.0;
  double unseen = 0.0;
  double hm = 0.0;
};

/// S over rows whose label is a seen class, U over the rest, both on the full
/// candidate set after calibration with gamma.
GzslMetrics gzsl_metrics(const ScoreMatrix& scores, double gamma);

/// Mean class accuracy on unseen-label rows with candidates restricted to
/// unseen classes and no calibration.
double zsl_accuracy(const ScoreMatrix& scores);

struct GammaSearch {
  double gamma = 0.0;
  double hm = 0.0;
};

/// Maximises HM over gamma_grid(); ties go to the smallest gamma.
GammaSearch search_gamma(const ScoreMatrix& val);

struct ClassAccuracy {
  int class_id = 0;
  std::string name;
  bool seen = false;
  std::size_t samples = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;  // percentage
};

struct EvalReport {
  double seen = 0.0;
  double unseen = 0.0;
  double hm = 0.0;
  double zsl = 0.0;
  double gamma = 0.0;
  std::size_t seen_samples = 0;
  std::size_t unseen_samples = 0;
  std::size_t seen_classes = 0;
  std::size_t unseen_classes = 0;
  std::vector<ClassAccuracy> per_class;

  /// key=value lines.
  std::string to_kv() const;
  /// Human-readable S/U/HM/ZSL table followed by per-class accuracies.
  std::string to_table(const std::string& title = "") const;
};

EvalReport report_from_scores(const ScoreMatrix& scores, double gamma, std::span<const std::string> class_names = {});

enum class InputModality { both, audio, visual };
std::string_view to_string(InputModality m);
InputModality parse_input_modality(std::string_view name);

/// Drops the tokens of the unused modality.
AVSample restrict_modality(const AVSample& sample, InputModality modality);

struct EvalOptions {
  std::size_t max_len = 300;
  std::size_t batch_size = 128;
  InputModality modality = InputModality::both;
  /// Audio noise injection for robustness sweeps; sigma < 0 uses the
  /// empirical audio feature std of the evaluated samples.
  double noise_fraction = 0.0;
  double noise_sigma = -1.0;
  std::uint64_t noise_seed = 0;
};

/// theta_o for the given samples in eval mode: [n x d_out].
template <typename T>
Tensor<T> encode_samples(TcafModel<T>& model, const DatasetBundle& bundle, std::span<const std::size_t> samples,
                         const EvalOptions& options);

/// theta_w for the given classes in eval mode: [k x d_out].
template <typename T>
Tensor<T> project_classes(TcafModel<T>& model, const DatasetBundle& bundle, std::span<const int> classes);

/// Scores `samples` against `candidates`; `seen_classes` marks which
/// candidates are calibrated.
template <typename T>
ScoreMatrix score_samples(TcafModel<T>& model, const DatasetBundle& bundle, std::span<const std::size_t> samples,
                          std::span<const int> candidates, std::span<const int> seen_classes,
                          const EvalOptions& options);

/// Scores the union of the seen and unseen sample splits against every class
/// they cover plus `seen_classes`, and reports S/U/HM/ZSL at gamma.
template <typename T>
EvalReport evaluate_gzsl(TcafModel<T>& model, const DatasetBundle& bundle, std::span<const Split> seen_splits,
                         std::span<const Split> unseen_splits, std::span<const int> seen_classes, double gamma,
                         const EvalOptions& options);

/// Writes per-sample theta_o ("o__<sample>__<class>") for the split and
/// theta_w ("w__<class>") for every bundle class in the word-embedding text
/// format. Returns the record count.
template <typename T>
std::size_t export_embeddings(TcafModel<T>& model, const DatasetBundle& bundle, Split split,
                              const std::filesystem::path& path, const EvalOptions& options);

}  // namespace tcaf
