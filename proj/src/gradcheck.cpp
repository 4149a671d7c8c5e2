#include "cvslt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cvslt {

std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& p, double h) {
  if (!(h > 0.0)) throw ContractError("finite difference step must be positive");
  auto values = p.data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f();
    values[i] = saved - h;
    const double down = f();
    values[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("max_relative_error: " + std::to_string(analytic.size()) + " vs " +
                         std::to_string(numeric.size()) + " elements");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, relative_error(analytic[i], numeric[i]));
  return worst;
}

double norm_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("norm_relative_error: " + std::to_string(analytic.size()) + " vs " +
                         std::to_string(numeric.size()) + " elements");
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

}  // namespace cvslt
