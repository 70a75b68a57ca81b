#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "tcaf/dataset.hpp"
#include "tcaf/model.hpp"
#include "tcaf/rng.hpp"

namespace tcaf::testing {

/// A model small enough for exhaustive checks.
inline ArchConfig tiny_arch(std::size_t heads = 2, std::size_t layers = 1) {
  ArchConfig a;
  a.d_in_a = 6;
  a.d_in_v = 5;
  a.d_fhidd = 7;
  a.d_dim = 8;
  a.d_out = 4;
  a.d_pos = 4;
  a.d_ff = 6;
  a.heads = heads;
  a.d_head = 3;
  a.layers = layers;
  return a;
}

/// Random features with strictly increasing timestamps.
inline AVSample random_sample(RngStream& rng, std::size_t d_in_a, std::size_t d_in_v, std::size_t ta,
                              std::size_t tv, int class_id = 0) {
  AVSample s;
  s.id = "x";
  s.class_id = class_id;
  for (std::size_t i = 0; i < ta * d_in_a; ++i) s.audio.push_back(static_cast<float>(rng.normal()));
  for (std::size_t i = 0; i < tv * d_in_v; ++i) s.visual.push_back(static_cast<float>(rng.normal()));
  for (std::size_t t = 0; t < ta; ++t) s.audio_times.push_back(0.96 * static_cast<double>(t));
  for (std::size_t t = 0; t < tv; ++t) s.visual_times.push_back(0.64 * static_cast<double>(t));
  return s;
}

/// Moves every parameter and running statistic away from its initial value
/// so that zero biases and unit gains do not hide wiring mistakes.
template <typename T>
void randomize(TcafModel<T>& model, RngStream& rng, double scale = 0.5) {
  for (auto& [name, p] : model.parameters()) {
    auto t = p;
    for (auto& v : t.mutable_data()) v = static_cast<T>(static_cast<double>(v) + rng.normal(0.0, scale));
  }
  for (auto& [name, st] : model.norm_states()) {
    for (auto& m : st.running_mean) m = static_cast<T>(rng.normal(0.0, 0.3));
    for (auto& v : st.running_var) v = static_cast<T>(rng.uniform(0.5, 2.0));
    st.batches_tracked = 1;
  }
}

/// Marks the initial running statistics (mean 0, variance 1) as usable so an
/// untrained model can run in eval mode.
template <typename T>
void ready_for_eval(TcafModel<T>& model) {
  for (auto& [name, st] : model.norm_states()) st.batches_tracked = std::max<std::int64_t>(st.batches_tracked, 1);
}

}  // namespace tcaf::testing
