#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evosam::nk {

// Model math runs in float32. Building with EVOSAM_REAL_F64 produces the
// float64 shadow used only by gradient checks.
#ifdef EVOSAM_REAL_F64
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<int>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor. Plain value type: copying copies the data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = real(0));
  Tensor(Shape shape, std::vector<real> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor matrix(std::initializer_list<std::initializer_list<real>> rows);

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return data_.size(); }

  // 2-D helpers; a 1-D tensor counts as a single row.
  int rows() const;
  int cols() const;

  std::span<real> data() { return data_; }
  std::span<const real> data() const { return data_; }
  real* ptr() { return data_.data(); }
  const real* ptr() const { return data_.data(); }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }
  real& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  real at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  /// Elementwise accumulate; shapes must match.
  Tensor& operator+=(const Tensor& o);

  Tensor reshaped(Shape shape) const;
  void fill(real v);
  bool all_finite() const;

  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  std::vector<real> data_;
};

/// Max absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace evosam::nk
