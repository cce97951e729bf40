#include "mprvit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mprvit {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <class S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// (outer, axis, inner) stride decomposition for line-wise ops.
struct AxisSplit {
  std::size_t outer = 1, axis = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.axis = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// TensorT
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> TensorT<S>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), S(0), requires_grad);
}

template <class S>
TensorT<S> TensorT<S>::full(Shape shape, S value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

template <class S>
TensorT<S> TensorT<S>::from(Shape shape, std::vector<S> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("Tensor::from: " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

template <class S>
TensorT<S> TensorT<S>::scalar(S value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

template <class S>
TensorT<S> TensorT<S>::uniform(Shape shape, S lo, S hi, Rng& rng, bool requires_grad) {
  std::vector<S> data(shape_numel(shape));
  for (S& v : data) v = static_cast<S>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return from(std::move(shape), std::move(data), requires_grad);
}

template <class S>
TensorT<S> TensorT<S>::he_uniform(Shape shape, std::size_t fan_in, Rng& rng, bool requires_grad) {
  const S bound = static_cast<S>(std::sqrt(6.0 / static_cast<double>(fan_in)));
  return uniform(std::move(shape), -bound, bound, rng, requires_grad);
}

template <class S>
S TensorT<S>::item() const {
  if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

template <class S>
std::span<S> TensorT<S>::grad() {
  if (!has_grad()) throw ContractError("grad(): no gradient populated");
  return {node_->grad.data(), node_->grad.size()};
}

template <class S>
std::span<const S> TensorT<S>::grad() const {
  if (!has_grad()) throw ContractError("grad(): no gradient populated");
  return {node_->grad.data(), node_->grad.size()};
}

template <class S>
TensorT<S> TensorT<S>::clone() const {
  return from(node_->shape, node_->value, false);
}

template <class S>
bool TensorT<S>::all_finite() const {
  for (S v : node_->value) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class S>
GradTape<S>& GradTape<S>::current() {
  thread_local GradTape<S> tape;
  return tape;
}

template <class S>
void GradTape<S>::clear() {
  records_.clear();
  next_seq_ = 1;
}

template <class S>
void GradTape<S>::record(std::shared_ptr<detail::TensorNode<S>> node) {
  node->seq = next_seq_++;
  records_.push_back(std::move(node));
}

template <class S>
void GradTape<S>::run_backward(const TensorT<S>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a defined scalar tensor");
  }
  auto loss_node = loss.node();
  loss_node->ensure_grad();
  loss_node->grad[0] = S(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    detail::TensorNode<S>& node = **it;
    if (!node.grad.empty() && node.backward_fn) node.backward_fn(node);
  }
  // Release intermediate grads and rules; leaves keep their grads.
  for (auto& rec : records_) {
    rec->grad.clear();
    rec->backward_fn = nullptr;
    rec->parents.clear();
  }
  clear();
}

template <class S>
void backward(const TensorT<S>& loss) {
  GradTape<S>::current().run_backward(loss);
}

template <class S>
void tape_reset() {
  GradTape<S>::current().clear();
}

namespace detail {

template <class S>
TensorT<S> make_op(Shape shape, std::vector<S> value, std::vector<TensorT<S>> parents,
                   std::function<void(TensorNode<S>&)> bw, const char* name) {
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = name;
  auto& tape = GradTape<S>::current();
  bool track = false;
  if (tape.enabled()) {
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) {
      if (p.defined()) node->parents.push_back(p.node());
    }
    node->backward_fn = std::move(bw);
    tape.record(node);
  }
  return TensorT<S>::wrap(std::move(node));
}

template <class S>
void accumulate(TensorNode<S>& dst, const S* src, std::size_t n) {
  if (!dst.requires_grad) return;
  dst.ensure_grad();
  S* g = dst.grad.data();
  for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  check_same_shape(a, b, "add");
  const std::size_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  auto bw = [](detail::TensorNode<S>& node) {
    detail::accumulate(*node.parents[0], node.grad.data(), node.grad.size());
    detail::accumulate(*node.parents[1], node.grad.data(), node.grad.size());
  };
  return detail::make_op<S>(a.shape(), std::move(out), {a, b}, bw, "add");
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  check_same_shape(a, b, "sub");
  const std::size_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
  auto bw = [](detail::TensorNode<S>& node) {
    detail::accumulate(*node.parents[0], node.grad.data(), node.grad.size());
    auto& p1 = *node.parents[1];
    if (p1.requires_grad) {
      p1.ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) p1.grad[i] -= node.grad[i];
    }
  };
  return detail::make_op<S>(a.shape(), std::move(out), {a, b}, bw, "sub");
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  check_same_shape(a, b, "mul");
  const std::size_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  auto bw = [](detail::TensorNode<S>& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    const std::size_t n = node.grad.size();
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pa.grad[i] += node.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pb.grad[i] += node.grad[i] * pa.value[i];
    }
  };
  return detail::make_op<S>(a.shape(), std::move(out), {a, b}, bw, "mul");
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S factor) {
  const std::size_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * factor;
  auto bw = [factor](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) p.grad[i] += node.grad[i] * factor;
  };
  return detail::make_op<S>(a.shape(), std::move(out), {a}, bw, "scale");
}

template <class S>
TensorT<S> abs_val(const TensorT<S>& a) {
  const std::size_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] < S(0) ? -pa[i] : pa[i];
  auto bw = [](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      const S x = p.value[i];
      const S s = x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
      p.grad[i] += node.grad[i] * s;
    }
  };
  return detail::make_op<S>(a.shape(), std::move(out), {a}, bw, "abs");
}

template <class S>
TensorT<S> activation(const TensorT<S>& x, Act kind) {
  const std::size_t n = x.numel();
  std::vector<S> out(n);
  const S* px = x.data().data();
  switch (kind) {
    case Act::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = px[i] > S(0) ? px[i] : S(0);
      break;
    case Act::tanh: {
      // IEEE rounding saturates tanh to exactly +-1 for large inputs; the
      // contract is the open interval, so pin to the nearest value inside it.
      const S one_in = std::nextafter(S(1), S(0));
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::min(std::max(std::tanh(px[i]), -one_in), one_in);
      }
      break;
    }
    case Act::gelu:
      for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(px[i]);
        out[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865476)));
      }
      break;
  }
  auto bw = [kind](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const std::size_t n = node.grad.size();
    switch (kind) {
      case Act::relu:
        for (std::size_t i = 0; i < n; ++i) {
          if (p.value[i] > S(0)) p.grad[i] += node.grad[i];
        }
        break;
      case Act::tanh:
        for (std::size_t i = 0; i < n; ++i) {
          const S y = node.value[i];
          p.grad[i] += node.grad[i] * (S(1) - y * y);
        }
        break;
      case Act::gelu:
        for (std::size_t i = 0; i < n; ++i) {
          const double v = static_cast<double>(p.value[i]);
          const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
          const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014327;
          p.grad[i] += node.grad[i] * static_cast<S>(cdf + v * pdf);
        }
        break;
    }
  };
  return detail::make_op<S>(x.shape(), std::move(out), {x}, bw, "activation");
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace {

// c[M,N] = a[M,K] * b[K,N]; c must be zero-initialized.
template <class S>
void matmul_kernel(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    S* crow = c + static_cast<std::size_t>(i) * n;
    const S* arow = a + static_cast<std::size_t>(i) * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const S av = arow[kk];
      const S* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,N] += a[M,K] * b[N,K]^T  (b stored row-major [N,K]). Transposing b
// first keeps the inner loop in vectorizable axpy form.
template <class S>
void matmul_nt_kernel(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<S> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = b[j * k + kk];
  }
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    S* crow = c + static_cast<std::size_t>(i) * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const S av = arow[kk];
      const S* brow = bt.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[K,N] += a[M,K]^T * b[M,N]
template <class S>
void matmul_tn_kernel(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t kk = 0; kk < static_cast<std::ptrdiff_t>(k); ++kk) {
    S* crow = c + static_cast<std::size_t>(kk) * n;
    for (std::size_t i = 0; i < m; ++i) {
      const S av = a[i * k + static_cast<std::size_t>(kk)];
      const S* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2) {
    throw DimensionError("matmul: inner extents disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<S> out(m * n, S(0));
  matmul_kernel(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto bw = [m, k, n](detail::TensorNode<S>& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      matmul_nt_kernel(node.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      matmul_tn_kernel(pa.value.data(), node.grad.data(), pb.grad.data(), m, k, n);
    }
  };
  return detail::make_op<S>(Shape{m, n}, std::move(out), {a, b}, bw, "matmul");
}

template <class S>
TensorT<S> transpose2d(const TensorT<S>& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d: expected rank-2, got " + shape_str(a.shape()));
  const std::size_t m = a.extent(0), n = a.extent(1);
  std::vector<S> out(m * n);
  const S* pa = a.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
  auto bw = [m, n](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += node.grad[j * m + i];
  };
  return detail::make_op<S>(Shape{n, m}, std::move(out), {a}, bw, "transpose2d");
}

template <class S>
TensorT<S> add_row_bias(const TensorT<S>& x, const TensorT<S>& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.extent(0)) {
    throw DimensionError("add_row_bias: last extent of " + shape_str(x.shape()) +
                         " must match bias " + shape_str(bias.shape()));
  }
  const std::size_t d = bias.extent(0);
  const std::size_t rows = x.numel() / d;
  std::vector<S> out(x.numel());
  const S* px = x.data().data();
  const S* pb = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = px[r * d + j] + pb[j];
  auto bw = [rows, d](detail::TensorNode<S>& node) {
    auto& px = *node.parents[0];
    auto& pb = *node.parents[1];
    if (px.requires_grad) detail::accumulate(px, node.grad.data(), node.grad.size());
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) pb.grad[j] += node.grad[r * d + j];
    }
  };
  return detail::make_op<S>(x.shape(), std::move(out), {x, bias}, bw, "add_row_bias");
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<S> out(x.data().begin(), x.data().end());
  auto bw = [](detail::TensorNode<S>& node) {
    detail::accumulate(*node.parents[0], node.grad.data(), node.grad.size());
  };
  return detail::make_op<S>(std::move(shape), std::move(out), {x}, bw, "reshape");
}

template <class S>
TensorT<S> slice(const TensorT<S>& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank()) throw DimensionError("slice: axis out of range");
  if (start + len > x.extent(axis) || len == 0) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of bounds for extent " + std::to_string(x.extent(axis)));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<S> out(s.outer * len * s.inner);
  const S* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const S* src = px + (o * s.axis + start) * s.inner;
    S* dst = out.data() + o * len * s.inner;
    std::copy(src, src + len * s.inner, dst);
  }
  auto bw = [s, start, len](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      S* dst = p.grad.data() + (o * s.axis + start) * s.inner;
      const S* src = node.grad.data() + o * len * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  };
  return detail::make_op<S>(std::move(out_shape), std::move(out), {x}, bw, "slice");
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& base = parts[0].shape();
  if (axis >= base.size()) throw DimensionError("concat: axis out of range");
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != base.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (i != axis && p.shape()[i] != base[i]) {
        throw DimensionError("concat: extent mismatch at axis " + std::to_string(i));
      }
    }
    total_axis += p.extent(axis);
  }
  Shape out_shape = base;
  out_shape[axis] = total_axis;
  const AxisSplit s = split_axis(out_shape, axis);
  std::vector<S> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets(parts.size());
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    offsets[pi] = off;
    const std::size_t alen = parts[pi].extent(axis);
    const S* src = parts[pi].data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      S* dst = out.data() + (o * s.axis + off) * s.inner;
      std::copy(src + o * alen * s.inner, src + (o + 1) * alen * s.inner, dst);
    }
    off += alen;
  }
  std::vector<TensorT<S>> parents(parts.begin(), parts.end());
  auto bw = [s, offsets](detail::TensorNode<S>& node) {
    // Each parent's axis extent is re-derived from its buffer length.
    for (std::size_t pi = 0; pi < node.parents.size(); ++pi) {
      auto& p = *node.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      const std::size_t alen = p.value.size() / (s.outer * s.inner);
      for (std::size_t o = 0; o < s.outer; ++o) {
        const S* src = node.grad.data() + (o * s.axis + offsets[pi]) * s.inner;
        S* dst = p.grad.data() + o * alen * s.inner;
        for (std::size_t i = 0; i < alen * s.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return detail::make_op<S>(std::move(out_shape), std::move(out), std::move(parents), bw, "concat");
}

template <class S>
TensorT<S> nchw_to_tokens(const TensorT<S>& x) {
  if (x.rank() != 4) throw DimensionError("nchw_to_tokens: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t t = h * w;
  std::vector<S> out(b * t * c);
  const S* px = x.data().data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const S* plane = px + (bi * c + ci) * t;
      S* dst = out.data() + bi * t * c + ci;
      for (std::size_t ti = 0; ti < t; ++ti) dst[ti * c] = plane[ti];
    }
  auto bw = [b, c, t](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t ci = 0; ci < c; ++ci) {
        S* plane = p.grad.data() + (bi * c + ci) * t;
        const S* src = node.grad.data() + bi * t * c + ci;
        for (std::size_t ti = 0; ti < t; ++ti) plane[ti] += src[ti * c];
      }
  };
  return detail::make_op<S>(Shape{b, t, c}, std::move(out), {x}, bw, "nchw_to_tokens");
}

template <class S>
TensorT<S> tokens_to_nchw(const TensorT<S>& x, std::size_t h, std::size_t w) {
  if (x.rank() != 3) throw DimensionError("tokens_to_nchw: expected [B,T,C], got " + shape_str(x.shape()));
  const std::size_t b = x.extent(0), t = x.extent(1), c = x.extent(2);
  if (t != h * w) throw DimensionError("tokens_to_nchw: token count != h*w");
  std::vector<S> out(b * c * t);
  const S* px = x.data().data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci) {
      S* plane = out.data() + (bi * c + ci) * t;
      const S* src = px + bi * t * c + ci;
      for (std::size_t ti = 0; ti < t; ++ti) plane[ti] = src[ti * c];
    }
  auto bw = [b, c, t](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const S* plane = node.grad.data() + (bi * c + ci) * t;
        S* dst = p.grad.data() + bi * t * c + ci;
        for (std::size_t ti = 0; ti < t; ++ti) dst[ti * c] += plane[ti];
      }
  };
  return detail::make_op<S>(Shape{b, c, h, w}, std::move(out), {x}, bw, "tokens_to_nchw");
}

// ---------------------------------------------------------------------------
// Reductions and softmax
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  double acc = 0.0;  // sequential, fixed order
  for (S v : x.data()) acc += static_cast<double>(v);
  auto bw = [](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const S g = node.grad[0];
    for (S& v : p.grad) v += g;
  };
  return detail::make_op<S>(Shape{1}, {static_cast<S>(acc)}, {x}, bw, "sum");
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
  const std::size_t n = x.numel();
  double acc = 0.0;
  for (S v : x.data()) acc += static_cast<double>(v);
  auto bw = [n](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const S g = node.grad[0] / static_cast<S>(n);
    for (S& v : p.grad) v += g;
  };
  return detail::make_op<S>(Shape{1}, {static_cast<S>(acc / static_cast<double>(n))}, {x}, bw, "mean");
}

template <class S>
TensorT<S> softmax(const TensorT<S>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<S> out(x.numel());
  const S* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.axis * s.inner + in;
      S m = px[base];
      for (std::size_t a = 1; a < s.axis; ++a) m = std::max(m, px[base + a * s.inner]);
      double denom = 0.0;
      for (std::size_t a = 0; a < s.axis; ++a) {
        const S e = std::exp(px[base + a * s.inner] - m);
        out[base + a * s.inner] = e;
        denom += static_cast<double>(e);
      }
      const S inv = static_cast<S>(1.0 / denom);
      for (std::size_t a = 0; a < s.axis; ++a) out[base + a * s.inner] *= inv;
    }
  }
  auto bw = [s](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.axis * s.inner + in;
        double dot = 0.0;
        for (std::size_t a = 0; a < s.axis; ++a) {
          const std::size_t i = base + a * s.inner;
          dot += static_cast<double>(node.grad[i]) * static_cast<double>(node.value[i]);
        }
        for (std::size_t a = 0; a < s.axis; ++a) {
          const std::size_t i = base + a * s.inner;
          p.grad[i] += node.value[i] * (node.grad[i] - static_cast<S>(dot));
        }
      }
    }
  };
  return detail::make_op<S>(x.shape(), std::move(out), {x}, bw, "softmax");
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define MPRVIT_INSTANTIATE(S)                                                                     \
  template class TensorT<S>;                                                                      \
  template class GradTape<S>;                                                                     \
  template void backward<S>(const TensorT<S>&);                                                   \
  template void tape_reset<S>();                                                                  \
  template TensorT<S> detail::make_op<S>(Shape, std::vector<S>, std::vector<TensorT<S>>,          \
                                         std::function<void(detail::TensorNode<S>&)>,            \
                                         const char*);                                           \
  template void detail::accumulate<S>(detail::TensorNode<S>&, const S*, std::size_t);            \
  template TensorT<S> add<S>(const TensorT<S>&, const TensorT<S>&);                              \
  template TensorT<S> sub<S>(const TensorT<S>&, const TensorT<S>&);                              \
  template TensorT<S> mul<S>(const TensorT<S>&, const TensorT<S>&);                              \
  template TensorT<S> scale<S>(const TensorT<S>&, S);                                            \
  template TensorT<S> abs_val<S>(const TensorT<S>&);                                             \
  template TensorT<S> activation<S>(const TensorT<S>&, Act);                                     \
  template TensorT<S> matmul<S>(const TensorT<S>&, const TensorT<S>&);                           \
  template TensorT<S> transpose2d<S>(const TensorT<S>&);                                         \
  template TensorT<S> add_row_bias<S>(const TensorT<S>&, const TensorT<S>&);                     \
  template TensorT<S> reshape<S>(const TensorT<S>&, Shape);                                      \
  template TensorT<S> slice<S>(const TensorT<S>&, std::size_t, std::size_t, std::size_t);        \
  template TensorT<S> concat<S>(const std::vector<TensorT<S>>&, std::size_t);                    \
  template TensorT<S> nchw_to_tokens<S>(const TensorT<S>&);                                      \
  template TensorT<S> tokens_to_nchw<S>(const TensorT<S>&, std::size_t, std::size_t);            \
  template TensorT<S> sum<S>(const TensorT<S>&);                                                 \
  template TensorT<S> mean<S>(const TensorT<S>&);                                                \
  template TensorT<S> softmax<S>(const TensorT<S>&, std::size_t);

MPRVIT_INSTANTIATE(float)
MPRVIT_INSTANTIATE(double)

#undef MPRVIT_INSTANTIATE

}  // namespace mprvit
