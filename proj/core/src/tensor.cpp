#include "fedleak/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fedleak {

namespace {
std::size_t checked_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d < 1) throw std::invalid_argument("Tensor: shape entries must be >= 1");
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_numel(shape_) != data_.size()) {
    throw std::invalid_argument("Tensor: shape/data size mismatch (" +
                                shape_str() + " vs " +
                                std::to_string(data_.size()) + " values)");
  }
}

double& Tensor::at(std::size_t i, std::size_t j) {
  return data_[i * shape_[1] + j];
}
double Tensor::at(std::size_t i, std::size_t j) const {
  return data_[i * shape_[1] + j];
}
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k,
                   std::size_t l) {
  return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k,
                  std::size_t l) const {
  return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  if (checked_numel(shape) != data_.size()) {
    throw std::invalid_argument("Tensor::reshaped: element count mismatch");
  }
  return Tensor(std::move(shape), data_);
}

double Tensor::max() const {
  return *std::max_element(data_.begin(), data_.end());
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

double Tensor::sum() const {
  return std::accumulate(data_.begin(), data_.end(), 0.0);
}

double Tensor::mean() const { return sum() / double(data_.size()); }

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add(const Tensor& other) {
  if (!same_shape(other)) {
    throw std::invalid_argument("Tensor::add: shape mismatch " + shape_str() +
                                " vs " + other.shape_str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void Tensor::add_scaled(const Tensor& other, double s) {
  if (!same_shape(other)) {
    throw std::invalid_argument("Tensor::add_scaled: shape mismatch " +
                                shape_str() + " vs " + other.shape_str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i)
    data_[i] += s * other.data_[i];
}

void Tensor::scale(double s) {
  for (double& v : data_) v *= s;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

}  // namespace fedleak
