#include "rapnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "rapnet/error.hpp"

namespace rapnet::nn {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (auto e : shape_) {
    if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_) {
    if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not hold " +
                         std::to_string(data_.size()) + " values");
  }
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar tensor of shape " +
                        shape_string(shape_));
  }
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace rapnet::nn
