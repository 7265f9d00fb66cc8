#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fedleak {

// Dense row-major tensor of 64-bit reals. 64-bit precision is load-bearing:
// the reconstruction path subtracts nearly-equal gradient slices and would
// lose the signal at 32 bits.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Checked indexing for 2-4D tensors; hot loops index data() directly.
  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double& at(std::size_t i, std::size_t j, std::size_t k);
  double at(std::size_t i, std::size_t j, std::size_t k) const;
  double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l);
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const;

  Tensor reshaped(std::vector<std::size_t> shape) const;

  double max() const;
  double max_abs() const;
  double sum() const;
  double mean() const;

  void fill(double v);
  void add(const Tensor& other);               // this += other
  void add_scaled(const Tensor& other, double s);  // this += s * other
  void scale(double s);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace fedleak
