#ifndef KRRST_TENSOR_HPP_
#define KRRST_TENSOR_HPP_

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace krrst {

using Shape = std::vector<std::int64_t>;

enum class DType { f32, f64 };

std::string_view dtype_name(DType dt);
DType parse_dtype(std::string_view name);  // throws FormatError
std::size_t dtype_size(DType dt);

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array. Values are held in double precision; an f32 tensor
// keeps every entry rounded to the nearest float so that arithmetic and
// serialization agree on what the tensor contains.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::f64);

  static Tensor zeros(Shape shape, DType dtype = DType::f64);
  static Tensor ones(Shape shape, DType dtype = DType::f64);
  static Tensor full(Shape shape, double value, DType dtype = DType::f64);
  static Tensor eye(std::int64_t n, DType dtype = DType::f64);
  static Tensor scalar(double value, DType dtype = DType::f64);
  // Row-major 2-D literal, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  // 2-D element access.
  double& operator()(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
  double operator()(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }
  double item() const;

  Tensor reshaped(Shape shape) const;
  Tensor cast(DType dtype) const;
  // Rows [begin, end) of the leading axis.
  Tensor slice_rows(std::int64_t begin, std::int64_t end) const;
  Tensor gather_rows(std::span<const std::int64_t> rows) const;
  Tensor transposed() const;  // 2-D only

  bool all_finite() const;
  // Re-rounds values to the storage dtype (no-op for f64).
  void quantize();

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  DType dtype_ = DType::f64;
  std::vector<double> data_;
};

bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& a);

}  // namespace krrst

#endif  // KRRST_TENSOR_HPP_
