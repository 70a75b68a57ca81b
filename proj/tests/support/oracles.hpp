#pragma once

// Straight-line re-derivations of scoring and metrics, used to check the
// library versions on random inputs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <vector>

#include "tcaf/eval.hpp"

namespace tcaf::oracle {

/// Columns 0..k_seen-1 are seen, the rest unseen; labels cycle over every class.
inline ScoreMatrix random_scores(RngStream& rng, std::size_t k_seen, std::size_t k_unseen, std::size_t rows) {
  ScoreMatrix m;
  const std::size_t k = k_seen + k_unseen;
  for (std::size_t c = 0; c < k; ++c) {
    m.class_ids.push_back(static_cast<int>(c));
    m.seen.push_back(c < k_seen);
  }
  m.rows = rows;
  for (std::size_t r = 0; r < rows; ++r) {
    const int label = static_cast<int>(r % k);
    m.labels.push_back(label);
    for (std::size_t c = 0; c < k; ++c) {
      // Bias toward the label so accuracies are not trivially zero.
      const double bonus = static_cast<int>(c) == label ? rng.uniform(0.0, 1.5) : 0.0;
      m.scores.push_back(-rng.uniform(0.0, 3.0) + bonus);
    }
  }
  return m;
}

inline bool column_is_seen(const ScoreMatrix& m, int class_id) {
  const auto col = std::find(m.class_ids.begin(), m.class_ids.end(), class_id) - m.class_ids.begin();
  return m.seen.at(static_cast<std::size_t>(col));
}

/// Argmax after subtracting gamma from seen columns; first column wins ties.
inline std::vector<int> predictions(const ScoreMatrix& m, double gamma) {
  std::vector<int> out;
  for (std::size_t r = 0; r < m.rows; ++r) {
    double best = -std::numeric_limits<double>::infinity();
    int arg = -1;
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double s = m.at(r, c) - (m.seen[c] ? gamma : 0.0);
      if (s > best) {
        best = s;
        arg = m.class_ids[c];
      }
    }
    out.push_back(arg);
  }
  return out;
}

inline GzslMetrics metrics(const ScoreMatrix& m, double gamma) {
  const auto pred = predictions(m, gamma);
  std::map<int, std::pair<int, int>> hits;  // label -> (correct, total)
  for (std::size_t r = 0; r < m.rows; ++r) {
    auto& h = hits[m.labels[r]];
    h.second += 1;
    h.first += pred[r] == m.labels[r] ? 1 : 0;
  }
  double s_sum = 0, u_sum = 0;
  int s_n = 0, u_n = 0;
  for (const auto& [label, h] : hits) {
    const double acc = 100.0 * h.first / h.second;
    if (column_is_seen(m, label)) {
      s_sum += acc;
      ++s_n;
    } else {
      u_sum += acc;
      ++u_n;
    }
  }
  GzslMetrics out;
  out.seen = s_n ? s_sum / s_n : 0.0;
  out.unseen = u_n ? u_sum / u_n : 0.0;
  out.hm = out.seen + out.unseen > 0 ? 2 * out.seen * out.unseen / (out.seen + out.unseen) : 0.0;
  return out;
}

/// Best grid gamma by enumeration; the first maximum wins.
inline std::pair<double, double> best_gamma(const ScoreMatrix& m) {
  double gamma = 0.0, hm = -1.0;
  for (int k = 0; k <= 15; ++k) {
    const double g = 0.2 * k;
    const double h = metrics(m, g).hm;
    if (h > hm) {
      hm = h;
      gamma = g;
    }
  }
  return {gamma, hm};
}

/// The test score matrix of a model rebuilt from theta_o and theta_w.
template <typename T>
ScoreMatrix model_scores(TcafModel<T>& model, const DatasetBundle& b, const std::vector<std::size_t>& samples,
                         const std::vector<int>& seen, const EvalOptions& options) {
  std::set<int> cand(seen.begin(), seen.end());
  for (std::size_t i : samples) cand.insert(b.samples[i].class_id);
  const std::vector<int> classes(cand.begin(), cand.end());
  const Tensor<T> o = encode_samples(model, b, samples, options);
  const Tensor<T> w = project_classes(model, b, classes);
  ScoreMatrix m;
  m.rows = samples.size();
  m.class_ids = classes;
  for (int c : classes) m.seen.push_back(std::find(seen.begin(), seen.end(), c) != seen.end());
  for (std::size_t r = 0; r < samples.size(); ++r) {
    m.labels.push_back(b.samples[samples[r]].class_id);
    for (std::size_t c = 0; c < classes.size(); ++c) {
      double d = 0;
      for (std::size_t j = 0; j < o.dim(1); ++j) {
        const double diff = static_cast<double>(w.at(c, j)) - static_cast<double>(o.at(r, j));
        d += diff * diff;
      }
      m.scores.push_back(-std::sqrt(d));
    }
  }
  return m;
}

}  // namespace tcaf::oracle
