#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "tcaf/model.hpp"
#include "tcaf/tensor.hpp"

namespace tcaf {

/// l_reg is always on; the flags select the l_reg, l_reg+l_ce and full objectives.
struct LossConfig {
  bool enable_ce = true;
  bool enable_rec = true;

  /// "reg", "reg+ce" or "full".
  static LossConfig parse(std::string_view name);
  std::string name() const;

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

template <typename T>
struct LossBreakdown {
  Tensor<T> total;  // differentiable sum of the enabled terms
  double l_ce = 0.0;
  double l_reg = 0.0;
  double l_rec = 0.0;
  double total_value = 0.0;
};

/// Mean over rows of -log softmax(theta_o theta_w_seen^T)[gt].
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& theta_o, const Tensor<T>& theta_w_seen, std::span<const std::size_t> gt_index);

template <typename T>
Tensor<T> regression_loss(const Tensor<T>& theta_o, const Tensor<T>& theta_w_gt);

/// mse(rho_o, w) + mse(rho_w, w).
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& rho_o, const Tensor<T>& rho_w, const Tensor<T>& w);

/// Runs the forward pipeline on a batch and assembles the enabled terms.
/// `seen_embeddings` holds one word embedding per seen class [K_seen x d_dim];
/// `gt_index` indexes its rows.
template <typename T>
LossBreakdown<T> total_loss(TcafModel<T>& model, std::span<const ClipView> clips, std::span<const std::size_t> gt_index,
                            const Tensor<T>& seen_embeddings, const LossConfig& config, Mode mode, RngStream& rng);

}  // namespace tcaf
