#include "tcaf/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

namespace tcaf {

namespace {

#ifdef NDEBUG
std::atomic<bool> g_nan_guard{false};
#else
std::atomic<bool> g_nan_guard{true};
#endif

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

// C[m x n] += A[m x k] * B[k x n]. Four rows of C share each pass over a row
// of B; columns are processed in panels that stay cache resident.
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n) {
  constexpr std::size_t kPanel = 256;
  for (std::size_t j0 = 0; j0 < n; j0 += kPanel) {
    const std::size_t j1 = std::min(n, j0 + kPanel);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T* __restrict c0 = c + i * n;
      T* __restrict c1 = c0 + n;
      T* __restrict c2 = c1 + n;
      T* __restrict c3 = c2 + n;
      const T* a0 = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
        const T* __restrict bp = b + p * n;
        for (std::size_t j = j0; j < j1; ++j) {
          const T bj = bp[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
    for (; i < m; ++i) {
      T* __restrict ci = c + i * n;
      const T* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ai[p];
        const T* __restrict bp = b + p * n;
        for (std::size_t j = j0; j < j1; ++j) ci[j] += av * bp[j];
      }
    }
  }
}

// C[m x n] += A^T * B with A[k x m], B[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto at = transposed(a, k, m);
  gemm_nn(at.data(), b, c, m, k, n);
}

// C[m x n] += A[m x k] * B^T with B[n x k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto bt = transposed(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

template <typename T>
void accumulate(detail::Node<T>& parent, std::span<const T> g) {
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

std::size_t last_extent(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

bool nan_guard_enabled() { return g_nan_guard.load(std::memory_order_relaxed); }
void set_nan_guard(bool enabled) { g_nan_guard.store(enabled, std::memory_order_relaxed); }

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

bool grad_enabled() { return t_grad_enabled; }
void set_grad_enabled(bool enabled) { t_grad_enabled = enabled; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result<T>({m, n}, std::move(out), "matmul", {a.node(), b.node()},
                                [m, k, n](detail::Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) gemm_nt(self.grad.data(), pb.value.data(), pa.ensure_grad().data(), m, n, k);
                                  if (pb.requires_grad) gemm_tn(pa.value.data(), self.grad.data(), pb.ensure_grad().data(), k, m, n);
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  return detail::make_result<T>({c, r}, transposed(a.data().data(), r, c), "transpose", {a.node()},
                                [r, c](detail::Node<T>& self) {
                                  auto g = transposed(self.grad.data(), c, r);
                                  accumulate<T>(*self.parents[0], g);
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  for (auto& p : self.parents)
                                    if (p->requires_grad) accumulate<T>(*p, self.grad);
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) accumulate<T>(pa, self.grad);
                                  if (pb.requires_grad) {
                                    auto& g = pb.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) {
                                    auto& g = pa.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
                                  }
                                  if (pb.requires_grad) {
                                    auto& g = pb.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a.node()},
                                [factor](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
                                });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "square", {a.node()},
                                [](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  auto& g = p.ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * p.value[i] * self.grad[i];
                                });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  require_matrix(x, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (b.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.data()[j];
  return detail::make_result<T>(x.shape(), std::move(out), "add_bias", {x.node(), b.node()},
                                [m, n](detail::Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (px.requires_grad) accumulate<T>(px, self.grad);
                                  if (pb.requires_grad) {
                                    auto& g = pb.ensure_grad();
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                                  }
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return detail::make_result<T>({}, {s}, "sum", {a.node()}, [](detail::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean: empty tensor");
  T s = T(0);
  for (T v : a.data()) s += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return detail::make_result<T>({}, {s * inv}, "mean", {a.node()}, [inv](detail::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mse");
  return mean(square(sub(a, b)));
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts differ, " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    widths.push_back(p.dim(1));
    total += p.dim(1);
    parents.push_back(p.node());
  }
  std::vector<T> out(m * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(d.data() + i * widths[k], widths[k], out.data() + i * total + col);
    col += widths[k];
  }
  return detail::make_result<T>({m, total}, std::move(out), "concat_cols", std::move(parents),
                                [m, total, widths](detail::Node<T>& self) {
                                  std::size_t c = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    auto& p = *self.parents[k];
                                    if (p.requires_grad) {
                                      auto& g = p.ensure_grad();
                                      for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < widths[k]; ++j)
                                          g[i * widths[k] + j] += self.grad[i * total + c + j];
                                    }
                                    c += widths[k];
                                  }
                                });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].dim(1);
  std::size_t total = 0;
  std::vector<std::size_t> counts;
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.dim(1) != n) throw DimensionError("concat_rows: widths differ, " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    counts.push_back(p.numel());
    total += p.dim(0);
    parents.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result<T>({total, n}, std::move(out), "concat_rows", std::move(parents),
                                [counts](detail::Node<T>& self) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < counts.size(); ++k) {
                                    auto& p = *self.parents[k];
                                    if (p.requires_grad)
                                      accumulate<T>(p, std::span<const T>(self.grad.data() + off, counts[k]));
                                    off += counts[k];
                                  }
                                });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  if (begin > end || end > x.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(1);
  std::vector<T> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  return detail::make_result<T>({end - begin, n}, std::move(out), "slice_rows", {x.node()},
                                [begin, n](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  require_matrix(x, "gather_rows");
  const std::size_t n = x.dim(1);
  std::vector<T> out(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= x.dim(0)) {
      throw DimensionError("gather_rows: row " + std::to_string(index[r]) + " outside " + shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + index[r] * n, n, out.data() + r * n);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return detail::make_result<T>({index.size(), n}, std::move(out), "gather_rows", {x.node()},
                                [idx = std::move(idx), n](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t r = 0; r < idx.size(); ++r)
                                    for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += self.grad[r * n + j];
                                });
}

template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::size_t> lengths) {
  require_matrix(x, "segment_mean");
  const std::size_t n = x.dim(1);
  std::size_t total = 0;
  for (auto len : lengths) {
    if (len == 0) throw DimensionError("segment_mean: empty segment");
    total += len;
  }
  if (total != x.dim(0)) {
    throw DimensionError("segment_mean: segments cover " + std::to_string(total) + " rows of " + shape_str(x.shape()));
  }
  std::vector<T> out(lengths.size() * n, T(0));
  std::size_t row = 0;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    for (std::size_t r = 0; r < lengths[s]; ++r, ++row)
      for (std::size_t j = 0; j < n; ++j) out[s * n + j] += x.data()[row * n + j];
    const T inv = T(1) / static_cast<T>(lengths[s]);
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] *= inv;
  }
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  return detail::make_result<T>({lengths.size(), n}, std::move(out), "segment_mean", {x.node()},
                                [lens = std::move(lens), n](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  std::size_t row = 0;
                                  for (std::size_t s = 0; s < lens.size(); ++s) {
                                    const T inv = T(1) / static_cast<T>(lens[s]);
                                    for (std::size_t r = 0; r < lens[s]; ++r, ++row)
                                      for (std::size_t j = 0; j < n; ++j) g[row * n + j] += self.grad[s * n + j] * inv;
                                  }
                                });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  return detail::make_result<T>(x.shape(), std::move(out), "relu", {x.node()}, [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * std::numbers::sqrt2_v<T> / T(2)));
  }
  return detail::make_result<T>(x.shape(), std::move(out), "gelu", {x.node()}, [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = p.value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * std::numbers::sqrt2_v<T> / T(2)));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : gelu(x);
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, RngStream& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return x;
  const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() >= rate ? keep_scale : T(0);
    out[i] = x.data()[i] * mask[i];
  }
  return detail::make_result<T>(x.shape(), std::move(out), "dropout", {x.node()},
                                [mask = std::move(mask)](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                                });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
  const std::size_t d = last_extent(x.shape());
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<T> xhat(x.numel()), inv_std(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "layer_norm", {x.node(), gain.node(), bias.node()},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& dy = self.grad;
        if (pg.requires_grad || pb.requires_grad) {
          auto& gg = pg.ensure_grad();
          auto& gb = pb.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += dy[r * d + j] * xhat[r * d + j];
              gb[j] += dy[r * d + j];
            }
        }
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          std::vector<T> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = dy[r * d + j] * pg.value[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat[r * d + j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
          }
        }
      });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     BatchNormState<T>& state, Mode mode, double momentum, double eps) {
  require_matrix(x, "batch_norm");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (state.running_mean.size() != d || gain.numel() != d || bias.numel() != d) {
    throw DimensionError("batch_norm: feature axis of " + shape_str(x.shape()) + " does not match state width " +
                         std::to_string(state.running_mean.size()));
  }
  if (mode == Mode::eval && state.batches_tracked == 0) {
    throw Error("batch_norm: eval mode before any training step (running statistics uninitialised)");
  }
  if (m == 0) return x;

  std::vector<T> mu(d, T(0)), inv_std(d), xhat(m * d), out(m * d);
  if (mode == Mode::train) {
    std::vector<T> var(d, T(0));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) mu[j] += x.data()[i * d + j];
    for (auto& v : mu) v /= static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const T c = x.data()[i * d + j] - mu[j];
        var[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      var[j] /= static_cast<T>(m);
      inv_std[j] = T(1) / std::sqrt(var[j] + static_cast<T>(eps));
      const T unbiased = m > 1 ? var[j] * static_cast<T>(m) / static_cast<T>(m - 1) : var[j];
      const T mom = static_cast<T>(momentum);
      state.running_mean[j] = (T(1) - mom) * state.running_mean[j] + mom * mu[j];
      state.running_var[j] = (T(1) - mom) * state.running_var[j] + mom * unbiased;
    }
    ++state.batches_tracked;
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = state.running_mean[j];
      inv_std[j] = T(1) / std::sqrt(state.running_var[j] + static_cast<T>(eps));
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (x.data()[i * d + j] - mu[j]) * inv_std[j];
      out[i * d + j] = xhat[i * d + j] * gain.data()[j] + bias.data()[j];
    }

  const bool batch_stats = mode == Mode::train;
  return detail::make_result<T>(
      x.shape(), std::move(out), "batch_norm", {x.node(), gain.node(), bias.node()},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), m, d, batch_stats](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& dy = self.grad;
        if (pg.requires_grad || pb.requires_grad) {
          auto& gg = pg.ensure_grad();
          auto& gb = pb.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += dy[i * d + j] * xhat[i * d + j];
              gb[j] += dy[i * d + j];
            }
        }
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        if (!batch_stats) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += dy[i * d + j] * pg.value[j] * inv_std[j];
          return;
        }
        std::vector<T> m1(d, T(0)), m2(d, T(0));
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = dy[i * d + j] * pg.value[j];
            m1[j] += dxh;
            m2[j] += dxh * xhat[i * d + j];
          }
        for (std::size_t j = 0; j < d; ++j) {
          m1[j] /= static_cast<T>(m);
          m2[j] /= static_cast<T>(m);
        }
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = dy[i * d + j] * pg.value[j];
            gx[i * d + j] += inv_std[j] * (dxh - m1[j] - xhat[i * d + j] * m2[j]);
          }
      });
}

namespace {

// Row softmax over allowed entries; returns false when a row has no support.
template <typename T>
bool softmax_row(const T* logits, const std::uint8_t* allowed, T* out, std::size_t n) {
  T mx = T(0);
  bool any = false;
  for (std::size_t j = 0; j < n; ++j)
    if (allowed[j] && (!any || logits[j] > mx)) {
      mx = logits[j];
      any = true;
    }
  if (!any) return false;
  T z = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = allowed[j] ? std::exp(logits[j] - mx) : T(0);
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
  return true;
}

// dS = P * (dP - <dP, P>) row-wise.
template <typename T>
void softmax_row_backward(const T* p, const T* dp, T* ds, std::size_t n) {
  T dot = T(0);
  for (std::size_t j = 0; j < n; ++j) dot += p[j] * dp[j];
  for (std::size_t j = 0; j < n; ++j) ds[j] += p[j] * (dp[j] - dot);
}

}  // namespace

template <typename T>
Tensor<T> softmax_masked(const Tensor<T>& logits, const Mask& mask) {
  const std::size_t n = last_extent(logits.shape());
  const std::size_t rows = n == 0 ? 0 : logits.numel() / n;
  if (mask.rows() != rows || mask.cols() != n) {
    throw DimensionError("softmax_masked: mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         " does not match logits " + shape_str(logits.shape()));
  }
  std::vector<T> out(logits.numel());
  std::vector<std::uint8_t> row_mask(n);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) row_mask[j] = mask(r, j) ? 1 : 0;
    if (!softmax_row(logits.data().data() + r * n, row_mask.data(), out.data() + r * n, n)) {
      throw MaskError("softmax_masked: row " + std::to_string(r) + " has no allowed position");
    }
  }
  auto probs = out;
  return detail::make_result<T>(logits.shape(), std::move(out), "softmax_masked", {logits.node()},
                                [probs = std::move(probs), rows, n](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r)
                                    softmax_row_backward(probs.data() + r * n, self.grad.data() + r * n, g.data() + r * n, n);
                                });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(logits.shape()));
  }
  if (m == 0) throw DimensionError("cross_entropy: empty batch");
  std::vector<T> probs(m * k);
  std::vector<std::uint8_t> all(k, 1);
  T loss = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= k) {
      throw DataError("cross_entropy: target " + std::to_string(targets[i]) + " outside " + std::to_string(k) + " classes");
    }
    const T* li = logits.data().data() + i * k;
    softmax_row(li, all.data(), probs.data() + i * k, k);
    T mx = li[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, li[j]);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) z += std::exp(li[j] - mx);
    loss += -(li[targets[i]] - mx - std::log(z));
  }
  loss /= static_cast<T>(m);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return detail::make_result<T>({}, {loss}, "cross_entropy", {logits.node()},
                                [probs = std::move(probs), tg = std::move(tg), m, k](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  const T s = self.grad[0] / static_cast<T>(m);
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < k; ++j)
                                      g[i * k + j] += s * (probs[i * k + j] - (j == tg[i] ? T(1) : T(0)));
                                });
}

template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const AttentionSegment> segments, std::size_t heads,
                           MaskSemantics semantics) {
  require_matrix(q, "masked_attention");
  require_same_shape(q, k, "masked_attention");
  require_same_shape(q, v, "masked_attention");
  const std::size_t rows = q.dim(0), width = q.dim(1);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("masked_attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t dh = width / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  for (const auto& seg : segments) {
    if (seg.offset + seg.length > rows || seg.mask.rows() != seg.length || seg.mask.cols() != seg.length) {
      throw DimensionError("masked_attention: segment outside packed rows or mask size mismatch");
    }
  }

  // probs[s][h] is length x length, row-major.
  std::vector<std::vector<T>> probs(segments.size() * heads);
  std::vector<T> out(rows * width, T(0));
  std::vector<T> logits;
  std::vector<std::uint8_t> support;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    const std::size_t n = seg.length;
    support.assign(n, 1);
    logits.resize(n);
    for (std::size_t h = 0; h < heads; ++h) {
      auto& p = probs[s * heads + h];
      p.assign(n * n, T(0));
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = q.data().data() + (seg.offset + i) * width + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          const bool allowed = seg.mask(i, j);
          if (semantics == MaskSemantics::exclude) support[j] = allowed ? 1 : 0;
          if (!allowed) {
            logits[j] = T(0);
            continue;
          }
          const T* kj = k.data().data() + (seg.offset + j) * width + h * dh;
          T dot = T(0);
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          logits[j] = dot * inv_sqrt;
        }
        if (!softmax_row(logits.data(), support.data(), p.data() + i * n, n)) {
          throw MaskError("attention: token " + std::to_string(i) + " of segment " + std::to_string(s) +
                          " has no allowed key under the attention mask");
        }
        T* oi = out.data() + (seg.offset + i) * width + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          const T pij = p[i * n + j];
          if (pij == T(0)) continue;
          const T* vj = v.data().data() + (seg.offset + j) * width + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }

  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  return detail::make_result<T>(
      {rows, width}, std::move(out), "masked_attention", {q.node(), k.node(), v.node()},
      [probs = std::move(probs), segs = std::move(segs), heads, dh, width, inv_sqrt](detail::Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        auto* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
        auto* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        auto* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
        const T* dout = self.grad.data();
        std::vector<T> dp, ds;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const auto& seg = segs[s];
          const std::size_t n = seg.length;
          dp.resize(n);
          for (std::size_t h = 0; h < heads; ++h) {
            const auto& p = probs[s * heads + h];
            for (std::size_t i = 0; i < n; ++i) {
              const T* doi = dout + (seg.offset + i) * width + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                const T pij = p[i * n + j];
                const T* vj = pv.value.data() + (seg.offset + j) * width + h * dh;
                T acc = T(0);
                for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                dp[j] = acc;
                if (gv && pij != T(0)) {
                  T* gvj = gv + (seg.offset + j) * width + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += pij * doi[c];
                }
              }
              ds.assign(n, T(0));
              softmax_row_backward(p.data() + i * n, dp.data(), ds.data(), n);
              const T* qi = pq.value.data() + (seg.offset + i) * width + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                // Forbidden entries carry a constant logit: no gradient path.
                if (!seg.mask(i, j)) continue;
                const T dsij = ds[j] * inv_sqrt;
                if (dsij == T(0)) continue;
                const T* kj = pk.value.data() + (seg.offset + j) * width + h * dh;
                if (gq) {
                  T* gqi = gq + (seg.offset + i) * width + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += dsij * kj[c];
                }
                if (gk) {
                  T* gkj = gk + (seg.offset + j) * width + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += dsij * qi[c];
                }
              }
            }
          }
        }
      });
}

#define TCAF_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> transpose(const Tensor<T>&);                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> square(const Tensor<T>&);                                                           \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                              \
  template Tensor<T> mean(const Tensor<T>&);                                                             \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                                            \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                            \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                             \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> segment_mean(const Tensor<T>&, std::span<const std::size_t>);                       \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> gelu(const Tensor<T>&);                                                             \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                           \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, RngStream&);                                \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);           \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&, \
                                Mode, double, double);                                                   \
  template Tensor<T> softmax_masked(const Tensor<T>&, const Mask&);                                      \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);                      \
  template Tensor<T> masked_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                      std::span<const AttentionSegment>, std::size_t, MaskSemantics);

TCAF_INSTANTIATE_OPS(float)
TCAF_INSTANTIATE_OPS(double)

}  // namespace tcaf
