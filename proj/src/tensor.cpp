#include "infobottle/tensor.hpp"

#include <cmath>
#include <sstream>

namespace infobottle {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

ShapeError::ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
    : std::invalid_argument(op + ": shape mismatch " + shape_str(lhs) + " vs " + shape_str(rhs)) {}

ShapeError::ShapeError(const std::string& op, const std::string& detail)
    : std::invalid_argument(op + ": " + detail) {}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor", "zero dimension in " + shape_str(shape));
  }
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor", "zero dimension in " + shape_str(shape));
  }
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor", "shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                                   " values, got " + std::to_string(data.size()));
  }
}

std::size_t Tensor::rows() const {
  if (shape.size() <= 1) return 1;
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.empty()) return 1;
  if (shape.size() == 1) return shape[0];
  return data.size() / shape[0];
}

double Tensor::item() const {
  if (data.size() != 1) throw ShapeError("item", "expected one element, got " + shape_str(shape));
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::frobenius_norm() const {
  double s = 0.0;
  for (double v : data) s += v * v;
  return std::sqrt(s);
}

}  // namespace infobottle
