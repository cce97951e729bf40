#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mprvit/errors.hpp"
#include "mprvit/rng.hpp"

namespace mprvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the reverse-mode graph. Leaves own parameters/inputs; op
// outputs additionally carry their parents and a backward rule that reads
// this node's grad and accumulates into the parents' grads.
template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same length as value when present
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t seq = 0;  // execution order stamp (0 for leaves)
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

}  // namespace detail

// Dense N-d float tensor handle with optional tape participation. Image data
// uses (batch, channel, height, width) order; buffers are row-major with the
// last axis fastest. Copying a TensorT copies the handle, not the buffer.
//
// Thread model: a tensor is immutable while shared, the tape is single-writer
// and thread-local, and evaluation with recording disabled (TapePause or
// requires_grad=false everywhere) is safe from concurrent threads.
template <class S>
class TensorT {
 public:
  using Node = detail::TensorNode<S>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false);
  static TensorT full(Shape shape, S value, bool requires_grad = false);
  static TensorT from(Shape shape, std::vector<S> data, bool requires_grad = false);
  static TensorT scalar(S value, bool requires_grad = false);
  // Uniform in [lo, hi).
  static TensorT uniform(Shape shape, S lo, S hi, Rng& rng, bool requires_grad = false);
  // He-uniform: bound sqrt(6 / fan_in).
  static TensorT he_uniform(Shape shape, std::size_t fan_in, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<S> data() { return {node_->value.data(), node_->value.size()}; }
  std::span<const S> data() const { return {node_->value.data(), node_->value.size()}; }
  S item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<S> grad();
  std::span<const S> grad() const;
  void zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), S(0));
  }
  void drop_grad() {
    if (node_) node_->grad.clear();
  }

  // Deep copy of values (detached leaf).
  TensorT clone() const;
  bool all_finite() const;

  std::shared_ptr<Node> node() const { return node_; }
  static TensorT wrap(std::shared_ptr<Node> node) {
    TensorT t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---------------------------------------------------------------------------
// Gradient tape
// ---------------------------------------------------------------------------

// Ordered record of executed ops for one thread. backward() replays it in
// reverse execution order, visiting every recorded op exactly once, then
// clears it. Leaves keep their accumulated grads; intermediate grads are
// released during the sweep.
template <class S>
class GradTape {
 public:
  static GradTape& current();

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }
  std::size_t recorded_ops() const { return records_.size(); }
  void clear();
  void record(std::shared_ptr<detail::TensorNode<S>> node);
  void run_backward(const TensorT<S>& loss);

 private:
  bool enabled_ = true;
  std::uint64_t next_seq_ = 1;
  std::vector<std::shared_ptr<detail::TensorNode<S>>> records_;
};

// Scoped "no recording" guard for frozen-weight evaluation.
template <class S>
class TapePause {
 public:
  TapePause() : prev_(GradTape<S>::current().enabled()) {
    GradTape<S>::current().set_enabled(false);
  }
  ~TapePause() { GradTape<S>::current().set_enabled(prev_); }
  TapePause(const TapePause&) = delete;
  TapePause& operator=(const TapePause&) = delete;

 private:
  bool prev_;
};

// Populates grads of every requires_grad leaf reachable from `loss`.
// `loss` must be scalar; grad of loss w.r.t. itself is 1.
template <class S>
void backward(const TensorT<S>& loss);

// Discards any recorded-but-unconsumed graph (used between forward-only runs).
template <class S>
void tape_reset();

namespace detail {
// Registers an op output on the tape when recording applies. `compute` already
// ran; `bw` reads node.grad and accumulates into parents' grads.
template <class S>
TensorT<S> make_op(Shape shape, std::vector<S> value, std::vector<TensorT<S>> parents,
                   std::function<void(TensorNode<S>&)> bw, const char* name);
template <class S>
void accumulate(TensorNode<S>& dst, const S* src, std::size_t n);
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / structural / reduction ops (all differentiable)
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);
template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);
template <class S>
TensorT<S> scale(const TensorT<S>& a, S factor);
template <class S>
TensorT<S> abs_val(const TensorT<S>& a);  // subgradient 0 at ties

enum class Act { relu, tanh, gelu };
template <class S>
TensorT<S> activation(const TensorT<S>& x, Act kind);
template <class S>
TensorT<S> relu(const TensorT<S>& x) { return activation(x, Act::relu); }
template <class S>
TensorT<S> tanh_act(const TensorT<S>& x) { return activation(x, Act::tanh); }
template <class S>
TensorT<S> gelu(const TensorT<S>& x) { return activation(x, Act::gelu); }

// 2-d matrix product [M,K] x [K,N] -> [M,N].
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b);
template <class S>
TensorT<S> transpose2d(const TensorT<S>& a);

// Adds a length-D bias vector to every row of a [..., D] tensor.
template <class S>
TensorT<S> add_row_bias(const TensorT<S>& x, const TensorT<S>& bias);

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape);
template <class S>
TensorT<S> slice(const TensorT<S>& x, std::size_t axis, std::size_t start, std::size_t len);
template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, std::size_t axis);

// [B,C,H,W] -> [B, H*W, C] token layout and back.
template <class S>
TensorT<S> nchw_to_tokens(const TensorT<S>& x);
template <class S>
TensorT<S> tokens_to_nchw(const TensorT<S>& x, std::size_t h, std::size_t w);

template <class S>
TensorT<S> sum(const TensorT<S>& x);
template <class S>
TensorT<S> mean(const TensorT<S>& x);

template <class S>
TensorT<S> softmax(const TensorT<S>& x, std::size_t axis);

}  // namespace mprvit
