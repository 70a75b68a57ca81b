#pragma once

// Loop-based eval-mode forward pass used as an oracle for the tensor
// implementation. It reads parameters by name and shares no code with the
// model beyond the parameter store.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "tcaf/model.hpp"

namespace tcaf::reference {

using Matrix = std::vector<std::vector<double>>;

template <typename T>
std::vector<double> values(const TcafModel<T>& model, const std::string& name) {
  const auto d = model.parameter(name).data();
  return std::vector<double>(d.begin(), d.end());
}

template <typename T>
Matrix linear(const TcafModel<T>& model, const std::string& name, const Matrix& x) {
  const auto w = values(model, name + ".weight");
  const auto b = values(model, name + ".bias");
  const std::size_t out = b.size();
  const std::size_t in = w.size() / out;
  Matrix y(x.size(), std::vector<double>(out));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[r][i] * w[i * out + o];
      y[r][o] = acc;
    }
  }
  return y;
}

// Linear, batch norm with running statistics, ReLU.
template <typename T>
Matrix stage(const TcafModel<T>& model, const std::string& name, const Matrix& x) {
  Matrix y = linear(model, name + ".linear", x);
  const auto g = values(model, name + ".bn.gain");
  const auto b = values(model, name + ".bn.bias");
  const auto& st = model.norm_states().at(name + ".bn");
  const double eps = model.config().batch_norm_eps;
  for (auto& row : y) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double n = (row[j] - st.running_mean[j]) / std::sqrt(static_cast<double>(st.running_var[j]) + eps);
      row[j] = std::max(0.0, n * g[j] + b[j]);
    }
  }
  return y;
}

template <typename T>
Matrix layer_norm(const TcafModel<T>& model, const std::string& name, const Matrix& x) {
  const auto g = values(model, name + ".gain");
  const auto b = values(model, name + ".bias");
  Matrix y = x;
  for (auto& row : y) {
    double mu = 0.0, var = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] = (row[j] - mu) / std::sqrt(var + model.config().layer_norm_eps) * g[j] + b[j];
    }
  }
  return y;
}

inline std::vector<double> time_features(double t, std::size_t d_pos, double lo, double hi) {
  std::vector<double> out;
  const std::size_t k = d_pos / 2;
  for (std::size_t i = 0; i < k; ++i) {
    const double f = k == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(k - 1));
    out.push_back(std::sin(2.0 * std::numbers::pi * f * t));
    out.push_back(std::cos(2.0 * std::numbers::pi * f * t));
  }
  return out;
}

enum class Kind { cls, audio, visual };

inline bool allowed(const AttentionVariant& v, Kind a, Kind b) {
  if (a == Kind::cls || b == Kind::cls) return v.class_block;
  return a == b ? v.self_block : v.cross_block;
}

template <typename T>
Matrix modality_tokens(const TcafModel<T>& model, const std::string& enc, const std::string& pos,
                       const std::string& map, std::span<const float> feats, std::span<const double> times) {
  const ArchConfig& c = model.config();
  if (times.empty()) return {};
  const std::size_t d_in = feats.size() / times.size();
  Matrix x(times.size(), std::vector<double>(d_in));
  for (std::size_t r = 0; r < times.size(); ++r)
    for (std::size_t j = 0; j < d_in; ++j) x[r][j] = feats[r * d_in + j];
  x = stage(model, enc + ".1", stage(model, enc + ".0", x));
  const auto p = values(model, pos);
  for (std::size_t r = 0; r < x.size(); ++r) {
    std::vector<double> tf(c.d_pos, 0.0);
    if (c.use_temporal_embeddings) tf = time_features(times[r], c.d_pos, c.fourier_min_hz, c.fourier_max_hz);
    for (std::size_t j = 0; j < c.d_pos; ++j) x[r].push_back(tf[j] + p[j]);
  }
  return linear(model, map, x);
}

/// theta_o of one clip in eval mode.
template <typename T>
std::vector<double> encode(const TcafModel<T>& model, const ClipView& clip) {
  const ArchConfig& c = model.config();
  Matrix x;
  std::vector<Kind> kinds;
  if (c.use_class_token()) {
    x.push_back(values(model, "class_token"));
    kinds.push_back(Kind::cls);
  }
  for (auto& row : modality_tokens(model, "a_enc", "pos_a", "g_a", clip.audio, clip.audio_times)) {
    x.push_back(row);
    kinds.push_back(Kind::audio);
  }
  for (auto& row : modality_tokens(model, "v_enc", "pos_v", "g_v", clip.visual, clip.visual_times)) {
    x.push_back(row);
    kinds.push_back(Kind::visual);
  }
  const std::size_t n = x.size(), dh = c.d_head;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const Matrix h = layer_norm(model, p + "attn_norm", x);
    const Matrix q = linear(model, p + "query", h), k = linear(model, p + "key", h), v = linear(model, p + "value", h);
    Matrix att(n, std::vector<double>(c.heads * dh, 0.0));
    for (std::size_t head = 0; head < c.heads; ++head) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> logit(n, 0.0);
        std::vector<bool> in_support(n, false);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          const bool ok = allowed(c.variant, kinds[i], kinds[j]);
          if (!ok && c.mask_semantics == MaskSemantics::exclude) continue;
          in_support[j] = true;
          if (ok) {
            for (std::size_t d = 0; d < dh; ++d) logit[j] += q[i][head * dh + d] * k[j][head * dh + d];
            logit[j] /= std::sqrt(static_cast<double>(dh));
          }
          mx = std::max(mx, logit[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          if (in_support[j]) z += std::exp(logit[j] - mx);
        for (std::size_t j = 0; j < n; ++j) {
          if (!in_support[j]) continue;
          const double w = std::exp(logit[j] - mx) / z;
          for (std::size_t d = 0; d < dh; ++d) att[i][head * dh + d] += w * v[j][head * dh + d];
        }
      }
    }
    const Matrix o = linear(model, p + "out", att);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c.d_dim; ++j) x[i][j] += o[i][j];
    if (c.use_feed_forward) {
      Matrix f = linear(model, p + "ff_in", layer_norm(model, p + "ff_norm", x));
      for (auto& row : f)
        for (double& e : row) e = 0.5 * e * std::erfc(-e / std::sqrt(2.0));
      f = linear(model, p + "ff_out", f);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c.d_dim; ++j) x[i][j] += f[i][j];
    }
  }
  std::vector<double> pooled(c.d_dim, 0.0);
  if (c.use_class_token()) {
    pooled = x[0];
  } else {
    for (const auto& row : x)
      for (std::size_t j = 0; j < c.d_dim; ++j) pooled[j] += row[j] / static_cast<double>(n);
  }
  return stage(model, "o_proj.1", stage(model, "o_proj.0", Matrix{pooled}))[0];
}

}  // namespace tcaf::reference
