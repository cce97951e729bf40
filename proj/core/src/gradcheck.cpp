#include "mprvit/gradcheck.hpp"

#include <cmath>
#include <vector>

namespace mprvit {

template <class S>
double grad_check(const std::function<TensorT<S>(const TensorT<S>&)>& f, TensorT<S>& x, S h,
                  std::size_t max_coords, double dead_zone) {
  if (h <= S(0)) throw ContractError("grad_check: h must be positive");
  tape_reset<S>();
  const bool prev = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  TensorT<S> loss = f(x);
  if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
  backward(loss);
  std::vector<S> analytic(x.grad().begin(), x.grad().end());
  x.set_requires_grad(prev);
  x.drop_grad();

  const std::size_t n = x.numel();
  std::size_t stride = 1;
  if (max_coords > 0 && n > max_coords) stride = (n + max_coords - 1) / max_coords;

  double worst = 0.0;
  auto data = x.data();
  TapePause<S> pause;  // finite-difference evaluations stay off the tape
  for (std::size_t i = 0; i < n; i += stride) {
    const S saved = data[i];
    data[i] = saved + h;
    const double fp = static_cast<double>(f(x).item());
    data[i] = saved - h;
    const double fm = static_cast<double>(f(x).item());
    data[i] = saved;
    const double central = (fp - fm) / (2.0 * static_cast<double>(h));
    const double a = static_cast<double>(analytic[i]);
    if (std::abs(a) < dead_zone && std::abs(central) < dead_zone) continue;
    const double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
    if (err > worst) worst = err;
  }
  return worst;
}

template double grad_check<float>(const std::function<TensorT<float>(const TensorT<float>&)>&,
                                  TensorT<float>&, float, std::size_t, double);
template double grad_check<double>(const std::function<TensorT<double>(const TensorT<double>&)>&,
                                   TensorT<double>&, double, std::size_t, double);

}  // namespace mprvit
