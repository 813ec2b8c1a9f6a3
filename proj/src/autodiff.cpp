#include "krrst/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>

#include "krrst/errors.hpp"

namespace krrst::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.ptr(), t.dim(0), t.dim(1)); }
MutMap as_matrix(Tensor& t) { return MutMap(t.ptr(), t.dim(0), t.dim(1)); }

void require_rank(std::string_view op, const Tensor& t, std::int64_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

DType result_dtype(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) {
    throw DimensionError(std::string(op) + ": dtype mismatch " + std::string(dtype_name(a.dtype())) + " vs " +
                         std::string(dtype_name(b.dtype())));
  }
  return a.dtype();
}

// Channel geometry of an (N, C) or (N, C, H, W) tensor.
struct ChannelLayout {
  std::int64_t n, c, inner;
};

ChannelLayout channel_layout(std::string_view op, const Tensor& x) {
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  throw DimensionError(std::string(op) + ": expected (N, C) or (N, C, H, W), got " + shape_str(x.shape()));
}

}  // namespace

// ---- Var / Tape -------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf tensor contains non-finite values");
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.is_leaf = true;
  node.op = "leaf";
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  bool needs_grad = false;
  for (const auto& p : parents) {
    if (!p.valid()) continue;
    if (&p.tape() != this) throw ContractError(std::string(op) + ": operands live on different tapes");
    needs_grad = needs_grad || p.requires_grad();
  }
  if (!value.all_finite()) throw NumericError("op '" + std::string(op) + "' produced a non-finite value");
  value.quantize();
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs_grad;
  node.op = std::string(op);
  if (needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

void Tape::accumulate(const Var& v, const Tensor& grad) {
  if (!v.valid()) return;
  auto& node = nodes_[static_cast<std::size_t>(v.id())];
  if (!node.requires_grad) return;
  if (grad.numel() != node.value.numel()) {
    throw DimensionError("gradient shape " + shape_str(grad.shape()) + " does not match value shape " +
                         shape_str(node.value.shape()) + " of op '" + node.op + "'");
  }
  if (node.grad.empty()) {
    node.grad = grad.reshaped(node.value.shape());
  } else {
    auto dst = node.grad.data();
    auto src = grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

std::map<NodeId, Tensor> Tape::backward(const Var& loss) {
  if (!loss.valid() || &loss.tape() != this) throw ContractError("backward: loss is not on this tape");
  if (loss.value().numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  std::map<NodeId, Tensor> out;
  if (nodes_[static_cast<std::size_t>(loss.id())].requires_grad) {
    nodes_[static_cast<std::size_t>(loss.id())].grad = Tensor::ones(loss.shape());
    for (NodeId id = loss.id(); id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      if (node.grad.empty() || !node.backward) continue;
      if (!node.grad.all_finite()) {
        throw NumericError("backward: non-finite gradient flowing into op '" + node.op + "'");
      }
      node.backward(node.grad, *this);
    }
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& node = nodes_[i];
    if (!node.is_leaf || !node.requires_grad) continue;
    Tensor g = node.grad.empty() ? Tensor::zeros(node.value.shape()) : node.grad;
    if (!g.all_finite()) throw NumericError("backward: non-finite gradient at leaf " + std::to_string(i));
    out.emplace(static_cast<NodeId>(i), std::move(g));
  }
  return out;
}

Tensor Tape::grad(const Var& v) const {
  const auto& node = nodes_[static_cast<std::size_t>(v.id())];
  return node.grad.empty() ? Tensor::zeros(node.value.shape()) : node.grad;
}

// ---- kernels ----------------------------------------------------------------

void check_same_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({a.dim(0), b.dim(1)}, result_dtype("matmul", a, b));
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  out.quantize();
  return out;
}

// ---- ops --------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tensor out = matmul(a.value(), b.value());
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b](const Tensor& g, Tape& tape) {
    if (a.requires_grad()) {
      Tensor ga(a.shape());
      as_matrix(ga).noalias() = as_matrix(g) * as_matrix(b.value()).transpose();
      tape.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb(b.shape());
      as_matrix(gb).noalias() = as_matrix(a.value()).transpose() * as_matrix(g);
      tape.accumulate(b, gb);
    }
  });
}

Var transpose(const Var& a) {
  return a.tape().record("transpose", a.value().transposed(), {a},
                         [a](const Tensor& g, Tape& tape) { tape.accumulate(a, g.transposed()); });
}

Var add(const Var& a, const Var& b) {
  check_same_shape("add", a.shape(), b.shape());
  Tensor out(a.shape(), result_dtype("add", a.value(), b.value()));
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return a.tape().record("add", std::move(out), {a, b}, [a, b](const Tensor& g, Tape& tape) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape("sub", a.shape(), b.shape());
  Tensor out(a.shape(), result_dtype("sub", a.value(), b.value()));
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](const Tensor& g, Tape& tape) {
    tape.accumulate(a, g);
    if (b.requires_grad()) {
      Tensor gb = g;
      for (auto& v : gb.data()) v = -v;
      tape.accumulate(b, gb);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape("mul", a.shape(), b.shape());
  Tensor out(a.shape(), result_dtype("mul", a.value(), b.value()));
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](const Tensor& g, Tape& tape) {
    if (a.requires_grad()) {
      Tensor ga(a.shape());
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] = g[i] * b.value()[i];
      tape.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb(b.shape());
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] = g[i] * a.value()[i];
      tape.accumulate(b, gb);
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape().record("scale", std::move(out), {a}, [a, s](const Tensor& g, Tape& tape) {
    Tensor ga = g;
    for (auto& v : ga.data()) v *= s;
    tape.accumulate(a, ga);
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_row_bias(const Var& x, const Var& bias) {
  require_rank("add_row_bias", x.value(), 2);
  const auto n = x.shape()[0], d = x.shape()[1];
  if (bias.value().numel() != d) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs rows of width " + std::to_string(d));
  }
  Tensor out = x.value();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) out(i, j) += bias.value()[j];
  return x.tape().record("add_row_bias", std::move(out), {x, bias}, [x, bias, n, d](const Tensor& g, Tape& tape) {
    tape.accumulate(x, g);
    if (bias.requires_grad()) {
      Tensor gb(bias.shape());
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      tape.accumulate(bias, gb);
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  return a.tape().record("reshape", a.value().reshaped(std::move(shape)), {a},
                         [a](const Tensor& g, Tape& tape) { tape.accumulate(a, g.reshaped(a.shape())); });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape().record("relu", std::move(out), {a}, [a](const Tensor& g, Tape& tape) {
    Tensor ga = g;
    const auto& x = a.value();
    for (std::int64_t i = 0; i < ga.numel(); ++i)
      if (!(x[i] > 0.0)) ga[i] = 0.0;
    tape.accumulate(a, ga);
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record("sum", Tensor::scalar(s, a.value().dtype()), {a}, [a](const Tensor& g, Tape& tape) {
    tape.accumulate(a, Tensor::full(a.shape(), g.item()));
  });
}

Var mean(const Var& a) {
  const auto n = static_cast<double>(std::max<std::int64_t>(a.value().numel(), 1));
  return scale(sum(a), 1.0 / n);
}

Var sum_squares(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  return a.tape().record("sum_squares", Tensor::scalar(s, a.value().dtype()), {a}, [a](const Tensor& g, Tape& tape) {
    Tensor ga = a.value();
    const double k = 2.0 * g.item();
    for (auto& v : ga.data()) v *= k;
    tape.accumulate(a, ga);
  });
}

Var weighted_sum_squares(const Var& a, const Tensor& weights) {
  check_same_shape("weighted_sum_squares", a.shape(), weights.shape());
  double s = 0.0;
  for (std::int64_t i = 0; i < a.value().numel(); ++i) s += weights[i] * a.value()[i] * a.value()[i];
  return a.tape().record("weighted_sum_squares", Tensor::scalar(s, a.value().dtype()), {a},
                         [a, weights](const Tensor& g, Tape& tape) {
                           Tensor ga(a.shape());
                           const double k = 2.0 * g.item();
                           for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] = k * weights[i] * a.value()[i];
                           tape.accumulate(a, ga);
                         });
}

Var trace(const Var& a) {
  require_rank("trace", a.value(), 2);
  if (a.shape()[0] != a.shape()[1]) throw DimensionError("trace of non-square " + shape_str(a.shape()));
  double s = 0.0;
  for (std::int64_t i = 0; i < a.shape()[0]; ++i) s += a.value()(i, i);
  return a.tape().record("trace", Tensor::scalar(s, a.value().dtype()), {a}, [a](const Tensor& g, Tape& tape) {
    Tensor ga(a.shape());
    for (std::int64_t i = 0; i < a.shape()[0]; ++i) ga(i, i) = g.item();
    tape.accumulate(a, ga);
  });
}

Var add_diag(const Var& a, const Var& s) {
  require_rank("add_diag", a.value(), 2);
  if (a.shape()[0] != a.shape()[1]) throw DimensionError("add_diag on non-square " + shape_str(a.shape()));
  if (s.value().numel() != 1) throw DimensionError("add_diag: shift must be scalar, got " + shape_str(s.shape()));
  Tensor out = a.value();
  const double k = s.value().item();
  for (std::int64_t i = 0; i < out.dim(0); ++i) out(i, i) += k;
  return a.tape().record("add_diag", std::move(out), {a, s}, [a, s](const Tensor& g, Tape& tape) {
    tape.accumulate(a, g);
    if (s.requires_grad()) {
      double t = 0.0;
      for (std::int64_t i = 0; i < g.dim(0); ++i) t += g(i, i);
      tape.accumulate(s, Tensor::full(s.shape(), t));
    }
  });
}

Var softmax_cross_entropy(const Var& logits, const Tensor& target_probs) {
  require_rank("softmax_cross_entropy", logits.value(), 2);
  check_same_shape("softmax_cross_entropy", logits.shape(), target_probs.shape());
  const auto n = logits.shape()[0], c = logits.shape()[1];
  if (n < 1) throw ContractError("softmax_cross_entropy: empty batch");
  Tensor probs(logits.shape());
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::int64_t j = 0; j < c; ++j) mx = std::max(mx, logits.value()(i, j));
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) z += std::exp(logits.value()(i, j) - mx);
    const double log_z = mx + std::log(z);
    for (std::int64_t j = 0; j < c; ++j) {
      const double log_q = logits.value()(i, j) - log_z;
      probs(i, j) = std::exp(log_q);
      if (target_probs(i, j) != 0.0) loss -= target_probs(i, j) * log_q;
    }
  }
  loss /= static_cast<double>(n);
  return logits.tape().record(
      "softmax_cross_entropy", Tensor::scalar(loss), {logits},
      [logits, target_probs, probs, n, c](const Tensor& g, Tape& tape) {
        Tensor gl(logits.shape());
        const double k = g.item() / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) {
          double mass = 0.0;
          for (std::int64_t j = 0; j < c; ++j) mass += target_probs(i, j);
          for (std::int64_t j = 0; j < c; ++j) gl(i, j) = k * (probs(i, j) * mass - target_probs(i, j));
        }
        tape.accumulate(logits, gl);
      });
}

// ---- convolution / pooling / normalization -----------------------------------

namespace {

// cols: (C*k*k) x (H*W) patch matrix of one sample with zero padding k/2.
void im2col(const double* img, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k, double* cols) {
  const std::int64_t pad = k / 2;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t ky = 0; ky < k; ++ky)
      for (std::int64_t kx = 0; kx < k; ++kx) {
        const std::int64_t row = (ch * k + ky) * k + kx;
        double* dst = cols + row * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + ky - pad;
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t sx = x + kx - pad;
            dst[y * w + x] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? img[(ch * h + sy) * w + sx] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k, double* img) {
  const std::int64_t pad = k / 2;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t ky = 0; ky < k; ++ky)
      for (std::int64_t kx = 0; kx < k; ++kx) {
        const std::int64_t row = (ch * k + ky) * k + kx;
        const double* src = cols + row * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t sx = x + kx - pad;
            if (sx >= 0 && sx < w) img[(ch * h + sy) * w + sx] += src[y * w + x];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
  require_rank("conv2d", x.value(), 4);
  require_rank("conv2d", weight.value(), 4);
  const auto n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const auto co = weight.shape()[0], k = weight.shape()[2];
  if (weight.shape()[1] != c || weight.shape()[3] != k || k % 2 == 0) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  if (bias.valid() && bias.value().numel() != co) throw DimensionError("conv2d: bias length != output channels");
  const std::int64_t ckk = c * k * k, hw = h * w;
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * ckk * hw));
  Tensor out({n, co, h, w}, result_dtype("conv2d", x.value(), weight.value()));
  ConstMap wm(weight.value().ptr(), co, ckk);
  for (std::int64_t s = 0; s < n; ++s) {
    double* col = cols->data() + s * ckk * hw;
    im2col(x.value().ptr() + s * c * hw, c, h, w, k, col);
    MutMap(out.ptr() + s * co * hw, co, hw).noalias() = wm * ConstMap(col, ckk, hw);
    if (bias.valid()) {
      for (std::int64_t o = 0; o < co; ++o)
        for (std::int64_t p = 0; p < hw; ++p) out[(s * co + o) * hw + p] += bias.value()[o];
    }
  }
  return x.tape().record(
      "conv2d", std::move(out), {x, weight, bias},
      [x, weight, bias, cols, n, c, h, w, co, k, ckk, hw](const Tensor& g, Tape& tape) {
        ConstMap wm(weight.value().ptr(), co, ckk);
        if (weight.requires_grad()) {
          Tensor gw(weight.shape());
          MutMap gwm(gw.ptr(), co, ckk);
          for (std::int64_t s = 0; s < n; ++s) {
            gwm.noalias() += ConstMap(g.ptr() + s * co * hw, co, hw) * ConstMap(cols->data() + s * ckk * hw, ckk, hw).transpose();
          }
          tape.accumulate(weight, gw);
        }
        if (bias.valid() && bias.requires_grad()) {
          Tensor gb(bias.shape());
          for (std::int64_t s = 0; s < n; ++s)
            for (std::int64_t o = 0; o < co; ++o)
              for (std::int64_t p = 0; p < hw; ++p) gb[o] += g[(s * co + o) * hw + p];
          tape.accumulate(bias, gb);
        }
        if (x.requires_grad()) {
          Tensor gx(x.shape());
          RowMat dcol(ckk, hw);
          for (std::int64_t s = 0; s < n; ++s) {
            dcol.noalias() = wm.transpose() * ConstMap(g.ptr() + s * co * hw, co, hw);
            col2im(dcol.data(), c, h, w, k, gx.ptr() + s * c * hw);
          }
          tape.accumulate(x, gx);
        }
      });
}

Var avg_pool2(const Var& x) {
  require_rank("avg_pool2", x.value(), 4);
  const auto n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const auto oh = h / 2, ow = w / 2;
  if (oh < 1 || ow < 1) throw DimensionError("avg_pool2: spatial extent too small in " + shape_str(x.shape()));
  Tensor out({n, c, oh, ow}, x.value().dtype());
  const auto& in = x.value();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = in.ptr() + p * h * w;
    double* dst = out.ptr() + p * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        const double* s0 = src + (2 * y) * w + 2 * xx;
        dst[y * ow + xx] = 0.25 * (s0[0] + s0[1] + s0[w] + s0[w + 1]);
      }
  }
  return x.tape().record("avg_pool2", std::move(out), {x}, [x, n, c, h, w, oh, ow](const Tensor& g, Tape& tape) {
    Tensor gx(x.shape());
    for (std::int64_t p = 0; p < n * c; ++p) {
      const double* src = g.ptr() + p * oh * ow;
      double* dst = gx.ptr() + p * h * w;
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          const double v = 0.25 * src[y * ow + xx];
          double* d0 = dst + (2 * y) * w + 2 * xx;
          d0[0] += v;
          d0[1] += v;
          d0[w] += v;
          d0[w + 1] += v;
        }
    }
    tape.accumulate(x, gx);
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats) {
  const auto layout = channel_layout("batch_norm", x.value());
  const std::int64_t n = layout.n, c = layout.c, inner = layout.inner;
  const std::int64_t count = n * inner;
  if (count < 2) throw ContractError("batch_norm: batch statistics need at least 2 values per channel");
  if (gamma.valid() && gamma.value().numel() != c) throw DimensionError("batch_norm: gamma length != channels");
  if (beta.valid() && beta.value().numel() != c) throw DimensionError("batch_norm: beta length != channels");
  const auto& in = x.value();
  std::vector<double> mu(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* p = in.ptr() + (s * c + ch) * inner;
      for (std::int64_t i = 0; i < inner; ++i) mu[static_cast<std::size_t>(ch)] += p[i];
    }
  for (auto& m : mu) m /= static_cast<double>(count);
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* p = in.ptr() + (s * c + ch) * inner;
      const double m = mu[static_cast<std::size_t>(ch)];
      for (std::int64_t i = 0; i < inner; ++i) var[static_cast<std::size_t>(ch)] += (p[i] - m) * (p[i] - m);
    }
  for (auto& v : var) v /= static_cast<double>(count);
  if (stats) *stats = BatchStats{mu, var};

  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch)
    (*inv_std)[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(ch)] + eps);
  auto xhat = std::make_shared<Tensor>(in.shape());
  Tensor out(in.shape(), in.dtype());
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto cu = static_cast<std::size_t>(ch);
      const double g = gamma.valid() ? gamma.value()[ch] : 1.0;
      const double b = beta.valid() ? beta.value()[ch] : 0.0;
      const std::int64_t off = (s * c + ch) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        const double xh = (in[off + i] - mu[cu]) * (*inv_std)[cu];
        (*xhat)[off + i] = xh;
        out[off + i] = g * xh + b;
      }
    }
  return x.tape().record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, n, c, inner, count](const Tensor& g, Tape& tape) {
        std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0), sum_gx(static_cast<std::size_t>(c), 0.0);
        for (std::int64_t s = 0; s < n; ++s)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t off = (s * c + ch) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
              sum_g[static_cast<std::size_t>(ch)] += g[off + i];
              sum_gx[static_cast<std::size_t>(ch)] += g[off + i] * (*xhat)[off + i];
            }
          }
        if (gamma.valid() && gamma.requires_grad()) tape.accumulate(gamma, Tensor(gamma.shape(), sum_gx));
        if (beta.valid() && beta.requires_grad()) tape.accumulate(beta, Tensor(beta.shape(), sum_g));
        if (x.requires_grad()) {
          Tensor gx(x.shape());
          const double inv_count = 1.0 / static_cast<double>(count);
          for (std::int64_t s = 0; s < n; ++s)
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const auto cu = static_cast<std::size_t>(ch);
              const double gm = gamma.valid() ? gamma.value()[ch] : 1.0;
              const double k = gm * (*inv_std)[cu];
              const double mg = sum_g[cu] * inv_count, mgx = sum_gx[cu] * inv_count;
              const std::int64_t off = (s * c + ch) * inner;
              for (std::int64_t i = 0; i < inner; ++i) gx[off + i] = k * (g[off + i] - mg - (*xhat)[off + i] * mgx);
            }
          tape.accumulate(x, gx);
        }
      });
}

Var channel_affine(const Var& x, std::span<const double> scale_c, std::span<const double> shift_c) {
  const auto layout = channel_layout("channel_affine", x.value());
  const std::int64_t n = layout.n, c = layout.c, inner = layout.inner;
  if (static_cast<std::int64_t>(scale_c.size()) != c || static_cast<std::int64_t>(shift_c.size()) != c) {
    throw DimensionError("channel_affine: parameter length != channels");
  }
  std::vector<double> sc(scale_c.begin(), scale_c.end());
  Tensor out = x.value();
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t off = (s * c + ch) * inner;
      for (std::int64_t i = 0; i < inner; ++i) out[off + i] = out[off + i] * sc[static_cast<std::size_t>(ch)] + shift_c[static_cast<std::size_t>(ch)];
    }
  return x.tape().record("channel_affine", std::move(out), {x}, [x, sc, n, c, inner](const Tensor& g, Tape& tape) {
    Tensor gx = g.reshaped(x.shape());
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t off = (s * c + ch) * inner;
        for (std::int64_t i = 0; i < inner; ++i) gx[off + i] *= sc[static_cast<std::size_t>(ch)];
      }
    tape.accumulate(x, gx);
  });
}

}  // namespace krrst::ad
