#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vqlogits/errors.hpp"

namespace vqlogits {

using Index = std::int32_t;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of rank <= 3 with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage, which is what
// lets parameters be tied (two modules holding one Tensor) and lets the tape
// write gradients back into the tensors it recorded. Use clone() for a deep
// copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    check_rank(shape);
    s_->data.assign(shape_size(shape), T(0));
    shape_ = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    check_rank(shape);
    if (data.size() != shape_size(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    shape_ = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : Tensor(std::move(shape), std::vector<T>(data), requires_grad) {}

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return s_->data.size(); }

  // 2-D views used by most ops.
  std::size_t rows() const {
    return std::accumulate(shape_.begin(), shape_.end() - 1, std::size_t{1}, std::multiplies<>());
  }
  std::size_t cols() const { return shape_.back(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }

  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }
  bool is_leaf() const { return s_->leaf; }
  void mark_non_leaf() { s_->leaf = false; }

  bool has_grad() const { return !s_->grad.empty(); }

  // Gradient buffer, allocated (zeroed) on first access. The gradient is a
  // side buffer written by backward rules, hence reachable through const.
  std::span<T> grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }

  void zero_grad() const { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
  void drop_grad() const { s_->grad.clear(); s_->grad.shrink_to_fit(); }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* storage_id() const { return s_.get(); }

  Tensor clone() const {
    Tensor out(shape(), std::vector<T>(s_->data), requires_grad());
    return out;
  }

  // Handle with a new shape of identical size; shares storage and gradient.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    check_rank(shape);
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  void fill(T value) { std::fill(s_->data.begin(), s_->data.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(size());
    std::transform(s_->data.begin(), s_->data.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out), requires_grad());
  }

  bool all_finite() const {
    return std::all_of(s_->data.begin(), s_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

 private:
  struct Storage {
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
  };

  static void check_rank(const Shape& shape) {
    if (shape.empty() || shape.size() > 3) {
      throw DimensionError("tensor rank must be 1..3, got shape " + shape_str(shape));
    }
  }

  std::shared_ptr<Storage> s_;
  Shape shape_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;

template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

// Views of a tensor (or of its gradient) as an rows() x cols() matrix.
template <typename T>
MatrixMap<T> as_matrix(Tensor<T>& t) {
  return MatrixMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                      static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
ConstMatrixMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatrixMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                           static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatrixMap<T> grad_matrix(const Tensor<T>& t) {
  return MatrixMap<T>(t.grad().data(), static_cast<Eigen::Index>(t.rows()),
                      static_cast<Eigen::Index>(t.cols()));
}

}  // namespace vqlogits
