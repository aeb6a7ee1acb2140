#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "migs/errors.hpp"

namespace migs {

// Dense row-major n-d array. This is deliberately minimal: shape plus a flat
// buffer. All structured operations (conv, pooling, ...) live in the autograd
// layer; Tensor itself only supports what optimizers and serialization need.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, S fill = S(0)) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), fill);
  }

  Tensor(std::initializer_list<int> shape, S fill = S(0))
      : Tensor(std::vector<int>(shape), fill) {}

  static Tensor scalar(S v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  S& at(int i) { return data_[idx1(i)]; }
  const S& at(int i) const { return data_[idx1(i)]; }
  S& at(int i, int j) { return data_[idx2(i, j)]; }
  const S& at(int i, int j) const { return data_[idx2(i, j)]; }
  S& at(int i, int j, int k) { return data_[idx3(i, j, k)]; }
  const S& at(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
  S& at(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
  const S& at(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(S(0)); }

  void add_scaled(const Tensor& o, S c) {
    assert(same_shape(o));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += c * o.data_[i];
  }

  bool all_finite() const {
    for (const S& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool bitwise_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (data_[i] != o.data_[i]) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[static_cast<std::int64_t>(i)] = static_cast<T>(data_[i]);
    return out;
  }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ContractError("negative tensor dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::size_t idx1(int i) const {
    assert(ndim() == 1);
    return static_cast<std::size_t>(i);
  }
  std::size_t idx2(int i, int j) const {
    assert(ndim() == 2);
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t idx3(int i, int j, int k) const {
    assert(ndim() == 3);
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t idx4(int i, int j, int k, int l) const {
    assert(ndim() == 4);
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
  }

  std::vector<int> shape_;
  std::vector<S> data_;
};

}  // namespace migs
