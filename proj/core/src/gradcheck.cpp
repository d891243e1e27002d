#include "vqmoe/gradcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace vqmoe {

std::vector<double> finite_difference_gradient(
    const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (eps <= 0.0)
    throw std::runtime_error("finite_difference_gradient: eps must be positive");
  Tensor t = x;  // shared handle, perturbations hit the caller's buffer
  std::vector<double> g(static_cast<size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double saved = t.data()[i];
    t.data()[i] = saved + eps;
    const double fp = f(t);
    t.data()[i] = saved - eps;
    const double fm = f(t);
    t.data()[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error(
          "finite_difference_gradient: non-finite evaluation at coordinate " +
          std::to_string(i));
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

double gradient_gap(const std::vector<double>& autodiff_grad,
                    const std::vector<double>& fd_grad) {
  if (autodiff_grad.size() != fd_grad.size())
    throw std::runtime_error("gradient_gap: length mismatch " +
                             std::to_string(autodiff_grad.size()) + " vs " +
                             std::to_string(fd_grad.size()));
  double worst = 0.0;
  for (size_t i = 0; i < autodiff_grad.size(); ++i) {
    const double gap =
        std::abs(autodiff_grad[i] - fd_grad[i]) / (1.0 + std::abs(fd_grad[i]));
    if (gap > worst) worst = gap;
  }
  return worst;
}

}  // namespace vqmoe
