#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tcaf/rng.hpp"
#include "tcaf/tensor.hpp"

// Differentiable primitives. Matrices are rank-2 row-major tensors; vectors
// that act on rows (biases, gains) are rank-1.
namespace tcaf {

/// Boolean matrix; true marks an allowed (query, key) pair.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool operator()(std::size_t i, std::size_t j) const { return bits_[i * cols_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool allowed) { bits_[i * cols_ + j] = allowed ? 1 : 0; }
  std::size_t count() const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// How forbidden attention entries enter the softmax.
enum class MaskSemantics {
  exclude,     // removed from the softmax support
  zero_logit,  // kept with a constant logit of 0
};

enum class Activation { relu, gelu };

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  std::int64_t batches_tracked = 0;

  explicit BatchNormState(std::size_t features = 0)
      : running_mean(features, T(0)), running_var(features, T(1)) {}
};

/// One packed sequence inside a row-stacked batch.
struct AttentionSegment {
  std::size_t offset = 0;
  std::size_t length = 0;
  Mask mask;  // length x length
};

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> square(const Tensor<T>& a);
/// x[m x n] + b[n] broadcast over rows.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// mean((a - b)^2) over every element.
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> concat_cols(std::span<const Tensor<T>> parts);
template <typename T> Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index);
/// Mean of consecutive row blocks of the given lengths -> [segments x cols].
template <typename T> Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::size_t> lengths);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// Exact GELU, x * Phi(x).
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> activation(const Tensor<T>& x, Activation kind);

/// Inverted dropout: identity in eval mode, survivors scaled by 1/(1-rate).
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, RngStream& rng);

/// Row-wise normalisation over the last axis followed by gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps);

/// Column-wise normalisation over the rows of x (samples, or samples x time
/// when tokens are stacked). Train mode uses batch statistics and updates the
/// running ones; eval mode uses the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     BatchNormState<T>& state, Mode mode, double momentum, double eps);

/// Softmax over the last axis restricted to allowed positions. `mask` has one
/// row per logits row. Disallowed positions are exactly zero.
template <typename T> Tensor<T> softmax_masked(const Tensor<T>& logits, const Mask& mask);

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);

/// Multi-head scaled dot-product attention over packed segments.
/// q, k, v: [rows x heads*head_dim]; output has the same shape, heads
/// concatenated along columns.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const AttentionSegment> segments, std::size_t heads,
                           MaskSemantics semantics);

}  // namespace tcaf
