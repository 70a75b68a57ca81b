#include "tcaf/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace tcaf {

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& fn, std::vector<NamedTensor> params,
                           const GradCheckOptions& options) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  const Tensor<double> loss = fn();
  // Cancellation noise in (up - down) grows with |f|, so the floor does too.
  const double floor = options.abs_floor * std::max(1.0, std::abs(loss.item()));
  backward(loss);

  GradCheckReport report;
  for (auto& [name, p] : params) {
    const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                      : std::vector<double>(p.numel(), 0.0);
    ParamGradError entry;
    entry.name = name;
    std::size_t stride = 1;
    if (options.max_probes_per_param > 0 && p.numel() > options.max_probes_per_param) {
      stride = (p.numel() + options.max_probes_per_param - 1) / options.max_probes_per_param;
    }
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < p.numel(); i += stride) {
      const double original = values[i];
      auto central = [&](double h) {
        values[i] = original + h;
        const double up = fn().item();
        values[i] = original - h;
        const double down = fn().item();
        values[i] = original;
        return (up - down) / (2.0 * h);
      };
      double numeric = central(options.eps);
      double err = relative_error(analytic[i], numeric, floor);
      // A ReLU kink inside [x-h, x+h] or strong curvature spoils one step size
      // but not all of them; a wrong gradient disagrees at every step.
      for (double factor : options.retry_factors) {
        if (err <= options.retry_above) break;
        const double n = central(options.eps * factor);
        const double e = relative_error(analytic[i], n, floor);
        if (e < err) {
          err = e;
          numeric = n;
        }
      }
      ++entry.probed;
      if (err > entry.max_rel_err || entry.probed == 1) {
        entry.max_rel_err = err;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(std::move(entry));
    p.zero_grad();
  }
  return report;
}

std::string GradCheckReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(32) << "parameter" << std::right << std::setw(8) << "probed" << std::setw(14)
     << "max_rel_err" << std::setw(16) << "analytic" << std::setw(16) << "numeric" << '\n';
  for (const auto& e : per_param) {
    os << std::left << std::setw(32) << e.name << std::right << std::setw(8) << e.probed << std::setw(14)
       << std::scientific << std::setprecision(3) << e.max_rel_err << std::setw(16) << e.analytic << std::setw(16)
       << e.numeric << std::defaultfloat << '\n';
  }
  os << "max_rel_err " << std::scientific << std::setprecision(3) << max_rel_err << std::defaultfloat << '\n';
  return os.str();
}

}  // namespace tcaf
