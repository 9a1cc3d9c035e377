#pragma once

#include <functional>
#include <span>
#include <vector>

namespace saeg {

/// Central-difference gradient, (f(x + h e_i) - f(x - h e_i)) / (2h) per
/// coordinate. 64-bit only; throws NumericError if f returns a non-finite
/// value at any probe point.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h);

} // namespace saeg
