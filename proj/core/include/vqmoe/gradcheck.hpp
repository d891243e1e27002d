#pragma once

#include "vqmoe/tensor.hpp"

#include <functional>
#include <vector>

namespace vqmoe {

// Central-difference gradient oracle: per coordinate,
// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
// f must be deterministic; x is perturbed in place and restored.
std::vector<double> finite_difference_gradient(
    const std::function<double(const Tensor&)>& f, const Tensor& x,
    double eps = 1e-5);

// max_i |ad_i - fd_i| / (1 + |fd_i|)
double gradient_gap(const std::vector<double>& autodiff_grad,
                    const std::vector<double>& fd_grad);

}  // namespace vqmoe
