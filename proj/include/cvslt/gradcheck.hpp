#pragma once

// Central finite differences used as an independent oracle for backward().

#include <functional>
#include <span>
#include <vector>

#include "cvslt/autodiff.hpp"

namespace cvslt {

/// (f(p+h) - f(p-h)) / 2h for every element of `p`; `p` is restored afterwards.
/// `f` must be deterministic (dropout off, noise frozen).
std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& p, double h = 1e-5);

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// Largest relative_error over paired elements.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric);

/// ||a - n|| / max(||a||, ||n||, floor) over a whole tensor. Elementwise ratios
/// are meaningless for entries near the central-difference noise floor
/// (about eps * |f| / h), which a large model always has some of; `floor`
/// keeps gradients that are structurally zero from dividing noise by noise.
double norm_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-8);

}  // namespace cvslt
