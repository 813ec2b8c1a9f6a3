#ifndef KRRST_AUTODIFF_HPP_
#define KRRST_AUTODIFF_HPP_

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "krrst/tensor.hpp"

namespace krrst::ad {

using NodeId = std::int64_t;

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  NodeId id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = -1;
};

// Define-by-run reverse-mode tape. Nodes are appended in creation order, so
// ids increase strictly and every parent id is smaller than its child's.
// A tape belongs to a single thread of execution.
class Tape {
 public:
  // Called with the upstream gradient of the node's output; routes
  // contributions to parents through accumulate().
  using BackwardFn = std::function<void(const Tensor& out_grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an op output. Throws NumericError naming `op` if the value is
  // not finite. The backward closure is dropped when no parent needs grads.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> parents, BackwardFn backward);

  // Adds `grad` into the adjoint of `v`; ignored for nodes without grads.
  void accumulate(const Var& v, const Tensor& grad);

  // Reverse sweep from a scalar loss. Returns the gradient of every
  // requires_grad leaf; leaves the loss does not reach get zeros.
  std::map<NodeId, Tensor> backward(const Var& loss);

  // Adjoint after backward(); zeros if the node was not reached.
  Tensor grad(const Var& v) const;

  const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string op;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
};

// ---- differentiable operations -------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var neg(const Var& a);
// x: n x d, bias: d (or 1 x d), broadcast over rows.
Var add_row_bias(const Var& x, const Var& bias);
Var reshape(const Var& a, Shape shape);
Var relu(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_squares(const Var& a);
// sum_i w_i * a_i^2 with constant weights w (same shape as a).
Var weighted_sum_squares(const Var& a, const Tensor& weights);

Var trace(const Var& a);
// a + s * I for square a and scalar s.
Var add_diag(const Var& a, const Var& s);

// Mean over rows of -sum_j p_ij log softmax(logits)_ij.
Var softmax_cross_entropy(const Var& logits, const Tensor& target_probs);

// 2-D convolution, NCHW input, square odd kernel, stride 1, "same" zero
// padding. `bias` may be an invalid Var.
Var conv2d(const Var& x, const Var& weight, const Var& bias);
// 2x2 average pooling with stride 2 on NCHW input (odd trailing rows/cols dropped).
Var avg_pool2(const Var& x);

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased (divide by count)
};

// Per-channel normalization with statistics of the current batch. Channels
// are axis 1 of an (N, C) or (N, C, H, W) tensor. gamma/beta may be invalid
// Vars (no affine). Batch statistics used are written to `stats` if non-null.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats = nullptr);
// y = x * scale_c + shift_c per channel with constant scale/shift; the
// eval-mode half of batch normalization.
Var channel_affine(const Var& x, std::span<const double> scale, std::span<const double> shift);

// ---- plain tensor kernels shared with oracles and optimizers --------------

Tensor matmul(const Tensor& a, const Tensor& b);
void check_same_shape(std::string_view op, const Shape& a, const Shape& b);

}  // namespace krrst::ad

#endif  // KRRST_AUTODIFF_HPP_
