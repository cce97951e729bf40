#pragma once

#include <functional>

#include "mprvit/tensor.hpp"

namespace mprvit {

// Central-difference check of the analytic gradient of a scalar-valued graph
// with respect to `x`. `f` must rebuild the graph from the current contents of
// x on every call (x may be a parameter shared with a model). Returns the
// maximum over checked elements of
//   |analytic - central| / (|analytic| + |central| + 1e-12).
// When max_coords > 0, elements are probed at a fixed stride so large tensors
// stay affordable; coverage is deterministic.
//
// dead_zone: coordinates where both |analytic| and |central| fall below this
// absolute floor are treated as agreeing. Mathematically inert coordinates
// (e.g. a conv bias that a following instance norm cancels exactly) carry
// only rounding noise on both sides, which the relative formula would
// otherwise score as total disagreement. 0 disables the floor.
template <class S>
double grad_check(const std::function<TensorT<S>(const TensorT<S>&)>& f, TensorT<S>& x, S h,
                  std::size_t max_coords = 0, double dead_zone = 0.0);

}  // namespace mprvit
