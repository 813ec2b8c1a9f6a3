#include "krrst/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "krrst/errors.hpp"

namespace krrst {

std::string_view dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw FormatError("unknown dtype '" + std::string(name) + "'");
}

std::size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype), data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
  }
  quantize();
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  std::fill(t.data_.begin(), t.data_.end(), value);
  t.quantize();
  return t;
}

Tensor Tensor::eye(std::int64_t n, DType dtype) {
  Tensor t({n, n}, dtype);
  for (std::int64_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return Tensor({}, {value}, dtype); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const auto r = static_cast<std::int64_t>(rows.size());
  const auto c = r ? static_cast<std::int64_t>(rows.begin()->size()) : 0;
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(r * c));
  for (const auto& row : rows) {
    if (static_cast<std::int64_t>(row.size()) != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({static_cast<std::int64_t>(values.size())}, std::vector<double>(values));
}

std::int64_t Tensor::dim(std::int64_t axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::cast(DType dtype) const {
  Tensor t = *this;
  t.dtype_ = dtype;
  t.quantize();
  return t;
}

Tensor Tensor::slice_rows(std::int64_t begin, std::int64_t end) const {
  if (rank() < 1 || begin < 0 || end > shape_[0] || begin > end) {
    throw DimensionError("row slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(shape_));
  }
  const std::int64_t row = shape_[0] ? numel() / shape_[0] : 0;
  Shape s = shape_;
  s[0] = end - begin;
  Tensor t(s, dtype_);
  std::copy(data_.begin() + begin * row, data_.begin() + end * row, t.data_.begin());
  return t;
}

Tensor Tensor::gather_rows(std::span<const std::int64_t> rows) const {
  if (rank() < 1) throw DimensionError("gather_rows on scalar");
  const std::int64_t row = shape_[0] ? numel() / shape_[0] : 0;
  Shape s = shape_;
  s[0] = static_cast<std::int64_t>(rows.size());
  Tensor t(s, dtype_);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    if (r < 0 || r >= shape_[0]) throw DimensionError("row index " + std::to_string(r) + " out of range");
    std::copy(data_.begin() + r * row, data_.begin() + (r + 1) * row,
              t.data_.begin() + static_cast<std::int64_t>(i) * row);
  }
  return t;
}

Tensor Tensor::transposed() const {
  if (rank() != 2) throw DimensionError("transpose needs a 2-D tensor, got " + shape_str(shape_));
  const auto r = shape_[0], c = shape_[1];
  Tensor t({c, r}, dtype_);
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) t(j, i) = (*this)(i, j);
  return t;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::quantize() {
  if (dtype_ == DType::f32) {
    for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
  }
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return std::memcmp(a.ptr(), b.ptr(), sizeof(double) * static_cast<std::size_t>(a.numel())) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace krrst
