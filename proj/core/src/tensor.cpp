#include "cgnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cgnet/errors.hpp"

namespace cgnet {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_size(shape_)) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_string(shape_));
  }
}

double& Tensor::at(std::size_t c, std::size_t h, std::size_t w) {
  return data_[(c * shape_[1] + h) * shape_[2] + w];
}

double Tensor::at(std::size_t c, std::size_t h, std::size_t w) const {
  return data_[(c * shape_[1] + h) * shape_[2] + w];
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

std::size_t Tensor::slice_size() const {
  return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0];
}

std::span<double> Tensor::slice(std::size_t i) {
  const auto n = slice_size();
  return std::span<double>(data_).subspan(i * n, n);
}

std::span<const double> Tensor::slice(std::size_t i) const {
  const auto n = slice_size();
  return std::span<const double>(data_).subspan(i * n, n);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape shape) {
  if (shape_size(shape) != data_.size()) {
    throw ConfigError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::sample(std::size_t i) const {
  Shape s(shape_.begin() + 1, shape_.end());
  auto src = slice(i);
  return Tensor(std::move(s), std::vector<double>(src.begin(), src.end()));
}

Tensor Tensor::stack(std::span<const Tensor> items) {
  if (items.empty()) return Tensor();
  Shape s{items.size()};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  Tensor out(s);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!items[i].same_shape(items[0])) throw ConfigError("stack: shape mismatch");
    std::copy(items[i].values().begin(), items[i].values().end(), out.slice(i).begin());
  }
  return out;
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ConfigError(std::string(what) + ": expected shape " + shape_string(expected) +
                      ", got " + shape_string(t.shape()));
  }
}

}  // namespace cgnet
