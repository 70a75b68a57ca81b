#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tcaf/tensor.hpp"

namespace tcaf {

using NamedTensor = std::pair<std::string, Tensor<double>>;

struct GradCheckOptions {
  double eps = 1e-5;
  // Denominator floor for the relative error, scaled by max(1, |f|), so
  // entries whose true gradient is ~0 are judged on an absolute scale.
  double abs_floor = 1e-6;
  // Probes whose error exceeds retry_above are re-estimated at eps * factor
  // for each factor in turn, keeping the smallest error.
  double retry_above = 1e-5;
  std::vector<double> retry_factors = {10.0, 0.1, 0.01};
  // When non-zero, only this many evenly strided elements per parameter are probed.
  std::size_t max_probes_per_param = 0;
};

struct ParamGradError {
  std::string name;
  std::size_t probed = 0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::vector<ParamGradError> per_param;

  std::string table() const;
};

double relative_error(double analytic, double numeric, double abs_floor);

/// Central differences of `fn` against its reverse-mode gradients. `fn` must
/// be deterministic (re-seed any dropout stream inside it) and return a scalar.
GradCheckReport grad_check(const std::function<Tensor<double>()>& fn, std::vector<NamedTensor> params,
                           const GradCheckOptions& options = {});

}  // namespace tcaf
