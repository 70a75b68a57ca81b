#include "tcaf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace tcaf {

bool ScoreMatrix::is_seen_class(int class_id) const {
  for (std::size_t c = 0; c < class_ids.size(); ++c)
    if (class_ids[c] == class_id) return seen[c];
  throw DataError("score matrix: label " + std::to_string(class_id) + " is not a candidate class");
}

void ScoreMatrix::validate() const {
  if (class_ids.empty()) throw DataError("score matrix: no candidate classes");
  if (seen.size() != class_ids.size()) throw DataError("score matrix: seen indicator count differs from class count");
  if (scores.size() != rows * cols()) throw DataError("score matrix: score count is not rows x candidates");
  if (labels.size() != rows) throw DataError("score matrix: label count differs from row count");
  for (std::size_t c = 1; c < class_ids.size(); ++c) {
    if (class_ids[c] <= class_ids[c - 1]) throw DataError("score matrix: class ids must be strictly ascending");
  }
}

std::vector<int> predict(const ScoreMatrix& scores) {
  scores.validate();
  std::vector<int> out(scores.rows);
  for (std::size_t r = 0; r < scores.rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.cols(); ++c)
      if (scores.at(r, c) > scores.at(r, best)) best = c;
    out[r] = scores.class_ids[best];
  }
  return out;
}

ScoreMatrix calibrated_scores(const ScoreMatrix& scores, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("calibrated_scores: gamma must be >= 0");
  ScoreMatrix out = scores;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols(); ++c)
      if (out.seen[c]) out.scores[r * out.cols() + c] -= gamma;
  return out;
}

double mean_class_accuracy(std::span<const int> predictions, std::span<const int> labels,
                           std::span<const int> class_set) {
  if (predictions.size() != labels.size()) throw DimensionError("mean_class_accuracy: prediction/label count mismatch");
  if (class_set.empty()) throw DataError("mean_class_accuracy: empty class set");
  std::map<int, std::pair<std::size_t, std::size_t>> tally;  // class -> (correct, total)
  for (int c : class_set) tally[c] = {0, 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = tally.find(labels[i]);
    if (it == tally.end()) throw DataError("mean_class_accuracy: label " + std::to_string(labels[i]) + " not in class set");
    ++it->second.second;
    if (predictions[i] == labels[i]) ++it->second.first;
  }
  double sum = 0.0;
  for (const auto& [c, counts] : tally) {
    if (counts.second == 0) throw DataError("mean_class_accuracy: class " + std::to_string(c) + " has no samples");
    sum += static_cast<double>(counts.first) / static_cast<double>(counts.second);
  }
  return 100.0 * sum / static_cast<double>(tally.size());
}

double harmonic_mean(double seen, double unseen) {
  if (seen < 0.0 || unseen < 0.0) throw ConfigError("harmonic_mean: accuracies must be nonnegative");
  if (seen + unseen == 0.0) return 0.0;
  return 2.0 * seen * unseen / (seen + unseen);
}

std::vector<double> gamma_grid() {
  std::vector<double> grid;
  for (int k = 0; k <= 15; ++k) grid.push_back(0.2 * k);
  return grid;
}

namespace {

struct Populations {
  std::vector<std::size_t> seen_rows, unseen_rows;
  std::vector<int> seen_labels, unseen_labels;  // distinct, ascending
};

Populations split_populations(const ScoreMatrix& scores) {
  Populations p;
  std::set<int> s, u;
  for (std::size_t r = 0; r < scores.rows; ++r) {
    if (scores.is_seen_class(scores.labels[r])) {
      p.seen_rows.push_back(r);
      s.insert(scores.labels[r]);
    } else {
      p.unseen_rows.push_back(r);
      u.insert(scores.labels[r]);
    }
  }
  p.seen_labels.assign(s.begin(), s.end());
  p.unseen_labels.assign(u.begin(), u.end());
  return p;
}

double population_accuracy(const std::vector<int>& pred, const ScoreMatrix& scores,
                           const std::vector<std::size_t>& rows, const std::vector<int>& classes) {
  if (rows.empty()) return 0.0;
  std::vector<int> p, l;
  for (std::size_t r : rows) {
    p.push_back(pred[r]);
    l.push_back(scores.labels[r]);
  }
  return mean_class_accuracy(p, l, classes);
}

}  // namespace

GzslMetrics gzsl_metrics(const ScoreMatrix& scores, double gamma) {
  const auto pops = split_populations(scores);
  const auto pred = predict(calibrated_scores(scores, gamma));
  GzslMetrics m;
  m.seen = population_accuracy(pred, scores, pops.seen_rows, pops.seen_labels);
  m.unseen = population_accuracy(pred, scores, pops.unseen_rows, pops.unseen_labels);
  m.hm = harmonic_mean(m.seen, m.unseen);
  return m;
}

double zsl_accuracy(const ScoreMatrix& scores) {
  const auto pops = split_populations(scores);
  if (pops.unseen_rows.empty()) return 0.0;
  ScoreMatrix restricted;
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    if (!scores.seen[c]) {
      restricted.class_ids.push_back(scores.class_ids[c]);
      restricted.seen.push_back(false);
    }
  }
  restricted.rows = pops.unseen_rows.size();
  for (std::size_t r : pops.unseen_rows) {
    restricted.labels.push_back(scores.labels[r]);
    for (std::size_t c = 0; c < scores.cols(); ++c)
      if (!scores.seen[c]) restricted.scores.push_back(scores.at(r, c));
  }
  const auto pred = predict(restricted);
  return mean_class_accuracy(pred, restricted.labels, pops.unseen_labels);
}

GammaSearch search_gamma(const ScoreMatrix& val) {
  const auto pops = split_populations(val);
  if (pops.seen_rows.empty() || pops.unseen_rows.empty()) {
    throw DataError("search_gamma: validation scores need both seen- and unseen-class samples");
  }
  GammaSearch best{0.0, -1.0};
  for (double gamma : gamma_grid()) {
    const double hm = gzsl_metrics(val, gamma).hm;
    if (hm > best.hm) best = {gamma, hm};
  }
  return best;
}

EvalReport report_from_scores(const ScoreMatrix& scores, double gamma, std::span<const std::string> class_names) {
  const auto pops = split_populations(scores);
  const auto m = gzsl_metrics(scores, gamma);
  EvalReport report;
  report.seen = m.seen;
  report.unseen = m.unseen;
  report.hm = m.hm;
  report.zsl = zsl_accuracy(scores);
  report.gamma = gamma;
  report.seen_samples = pops.seen_rows.size();
  report.unseen_samples = pops.unseen_rows.size();
  report.seen_classes = pops.seen_labels.size();
  report.unseen_classes = pops.unseen_labels.size();

  const auto pred = predict(calibrated_scores(scores, gamma));
  std::map<int, ClassAccuracy> table;
  for (std::size_t r = 0; r < scores.rows; ++r) {
    auto& entry = table[scores.labels[r]];
    entry.class_id = scores.labels[r];
    entry.seen = scores.is_seen_class(scores.labels[r]);
    ++entry.samples;
    if (pred[r] == scores.labels[r]) ++entry.correct;
  }
  for (auto& [id, entry] : table) {
    entry.accuracy = 100.0 * static_cast<double>(entry.correct) / static_cast<double>(entry.samples);
    if (static_cast<std::size_t>(id) < class_names.size()) entry.name = class_names[static_cast<std::size_t>(id)];
    report.per_class.push_back(entry);
  }
  return report;
}

std::string EvalReport::to_kv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "S=" << seen << "\nU=" << unseen << "\nHM=" << hm << "\nZSL=" << zsl << "\ngamma=" << gamma
     << "\nseen_samples=" << seen_samples << "\nunseen_samples=" << unseen_samples << "\nseen_classes=" << seen_classes
     << "\nunseen_classes=" << unseen_classes << '\n';
  for (const auto& c : per_class) {
    os << "class." << c.class_id << ".accuracy=" << c.accuracy << '\n';
  }
  return os.str();
}

std::string EvalReport::to_table(const std::string& title) const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  if (!title.empty()) os << title << '\n';
  os << std::left << std::setw(10) << "gamma" << std::right << std::setw(9) << "S" << std::setw(9) << "U"
     << std::setw(9) << "HM" << std::setw(9) << "ZSL" << '\n';
  os << std::left << std::setw(10) << gamma << std::right << std::setw(9) << seen << std::setw(9) << unseen
     << std::setw(9) << hm << std::setw(9) << zsl << '\n';
  os << "\nper-class accuracy (" << seen_classes << " seen, " << unseen_classes << " unseen classes)\n";
  for (const auto& c : per_class) {
    os << "  " << std::left << std::setw(24) << (c.name.empty() ? std::to_string(c.class_id) : c.name)
       << std::setw(8) << (c.seen ? "seen" : "unseen") << std::right << std::setw(5) << c.correct << "/"
       << std::left << std::setw(5) << c.samples << std::right << std::setw(8) << c.accuracy << '\n';
  }
  return os.str();
}

std::string_view to_string(InputModality m) {
  switch (m) {
    case InputModality::audio: return "audio";
    case InputModality::visual: return "visual";
    default: return "both";
  }
}

InputModality parse_input_modality(std::string_view name) {
  if (name == "both") return InputModality::both;
  if (name == "audio") return InputModality::audio;
  if (name == "visual") return InputModality::visual;
  throw ConfigError("unknown modality '" + std::string(name) + "' (expected audio, visual or both)");
}

AVSample restrict_modality(const AVSample& sample, InputModality modality) {
  AVSample out = sample;
  if (modality == InputModality::audio) {
    out.visual.clear();
    out.visual_times.clear();
  } else if (modality == InputModality::visual) {
    out.audio.clear();
    out.audio_times.clear();
  }
  if (out.audio_len() + out.visual_len() == 0) {
    throw DataError("sample '" + sample.id + "' has no " + std::string(to_string(modality)) + " tokens");
  }
  return out;
}

template <typename T>
Tensor<T> encode_samples(TcafModel<T>& model, const DatasetBundle& bundle, std::span<const std::size_t> samples,
                         const EvalOptions& options) {
  NoGradGuard no_grad;
  const std::size_t d_out = model.config().d_out;
  const double sigma = options.noise_sigma >= 0.0 ? options.noise_sigma : audio_feature_std(bundle, samples);
  const RngStream noise_root(options.noise_seed, "noise");
  RngStream unused(0, "eval");
  std::vector<T> out;
  out.reserve(samples.size() * d_out);
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<AVSample> prepared;
    for (std::size_t i = start; i < end; ++i) {
      const auto& raw = bundle.samples.at(samples[i]);
      AVSample s = trim_sequence(restrict_modality(raw, options.modality), options.max_len, Mode::eval, unused);
      if (options.noise_fraction > 0.0) {
        RngStream rng = noise_root.fork("sample", samples[i]);
        s = inject_audio_noise(s, bundle.d_in_a, options.noise_fraction, sigma, rng);
      }
      prepared.push_back(std::move(s));
    }
    std::vector<ClipView> views;
    for (const auto& s : prepared) views.push_back(s.view());
    const Tensor<T> theta = model.encode(views, Mode::eval, unused);
    out.insert(out.end(), theta.data().begin(), theta.data().end());
  }
  return Tensor<T>(Shape{samples.size(), d_out}, std::move(out));
}

template <typename T>
Tensor<T> project_classes(TcafModel<T>& model, const DatasetBundle& bundle, std::span<const int> classes) {
  NoGradGuard no_grad;
  RngStream unused(0, "eval");
  return model.project_word(bundle.embedding_matrix<T>(classes), Mode::eval, unused);
}

template <typename T>
ScoreMatrix score_samples(TcafModel<T>& model, const DatasetBundle& bundle, std::span<const std::size_t> samples,
                          std::span<const int> candidates, std::span<const int> seen_classes,
                          const EvalOptions& options) {
  ScoreMatrix m;
  m.class_ids.assign(candidates.begin(), candidates.end());
  std::sort(m.class_ids.begin(), m.class_ids.end());
  m.class_ids.erase(std::unique(m.class_ids.begin(), m.class_ids.end()), m.class_ids.end());
  const std::set<int> seen(seen_classes.begin(), seen_classes.end());
  for (int c : m.class_ids) m.seen.push_back(seen.count(c) > 0);
  m.rows = samples.size();
  for (std::size_t i : samples) m.labels.push_back(bundle.samples.at(i).class_id);

  const Tensor<T> theta_o = encode_samples(model, bundle, samples, options);
  const Tensor<T> theta_w = project_classes(model, bundle, m.class_ids);
  const std::size_t d = theta_o.dim(1);
  m.scores.resize(m.rows * m.cols());
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(theta_w.at(c, j)) - static_cast<double>(theta_o.at(r, j));
        dist += diff * diff;
      }
      m.scores[r * m.cols() + c] = -std::sqrt(dist);
    }
  }
  m.validate();
  return m;
}

template <typename T>
EvalReport evaluate_gzsl(TcafModel<T>& model, const DatasetBundle& bundle, std::span<const Split> seen_splits,
                         std::span<const Split> unseen_splits, std::span<const int> seen_classes, double gamma,
                         const EvalOptions& options) {
  std::vector<std::size_t> samples;
  for (Split s : seen_splits) samples.insert(samples.end(), bundle.split(s).begin(), bundle.split(s).end());
  for (Split s : unseen_splits) samples.insert(samples.end(), bundle.split(s).begin(), bundle.split(s).end());
  std::vector<int> candidates(seen_classes.begin(), seen_classes.end());
  for (int c : bundle.classes_in(unseen_splits)) candidates.push_back(c);
  for (int c : bundle.classes_in(seen_splits)) candidates.push_back(c);
  const ScoreMatrix scores = score_samples(model, bundle, samples, candidates, seen_classes, options);
  return report_from_scores(scores, gamma, bundle.class_names);
}

template <typename T>
std::size_t export_embeddings(TcafModel<T>& model, const DatasetBundle& bundle, Split split,
                              const std::filesystem::path& path, const EvalOptions& options) {
  const auto& samples = bundle.split(split);
  if (samples.empty()) throw DataError("export_embeddings: split " + std::string(to_string(split)) + " is empty");
  std::vector<int> classes(bundle.num_classes());
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<int>(c);
  const Tensor<T> theta_o = encode_samples(model, bundle, samples, options);
  const Tensor<T> theta_w = project_classes(model, bundle, classes);

  std::vector<std::pair<std::string, std::vector<float>>> records;
  auto row = [](const Tensor<T>& t, std::size_t r) {
    std::vector<float> v(t.dim(1));
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = static_cast<float>(t.at(r, j));
    return v;
  };
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = bundle.samples[samples[i]];
    records.emplace_back(normalize_class_name("o__" + s.id + "__" + bundle.class_names[s.class_id]), row(theta_o, i));
  }
  for (std::size_t c = 0; c < classes.size(); ++c) {
    records.emplace_back(normalize_class_name("w__" + bundle.class_names[c]), row(theta_w, c));
  }
  write_word_embeddings(path, records);
  return records.size();
}

#define TCAF_INSTANTIATE_EVAL(T)                                                                                   \
  template Tensor<T> encode_samples(TcafModel<T>&, const DatasetBundle&, std::span<const std::size_t>,            \
                                    const EvalOptions&);                                                          \
  template Tensor<T> project_classes(TcafModel<T>&, const DatasetBundle&, std::span<const int>);                  \
  template ScoreMatrix score_samples(TcafModel<T>&, const DatasetBundle&, std::span<const std::size_t>,           \
                                     std::span<const int>, std::span<const int>, const EvalOptions&);             \
  template EvalReport evaluate_gzsl(TcafModel<T>&, const DatasetBundle&, std::span<const Split>,                  \
                                    std::span<const Split>, std::span<const int>, double, const EvalOptions&);    \
  template std::size_t export_embeddings(TcafModel<T>&, const DatasetBundle&, Split, const std::filesystem::path&, \
                                         const EvalOptions&);

TCAF_INSTANTIATE_EVAL(float)
TCAF_INSTANTIATE_EVAL(double)

}  // namespace tcaf
