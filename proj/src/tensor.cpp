#include "mobe/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mobe {

std::size_t shape_size(const Shape& shape) {
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

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " needs " +
                     std::to_string(shape_size(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

std::size_t Tensor::rows() const {
  if (shape_.size() <= 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw ShapeError("2-D view requested for rank " + std::to_string(shape_.size()) +
                   " tensor " + shape_str(shape_));
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw ShapeError("2-D view requested for rank " + std::to_string(shape_.size()) +
                   " tensor " + shape_str(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  }
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t count) const {
  if (rank() != 2 || begin + count > shape_[0]) {
    throw ShapeError("slice_rows out of range on " + shape_str(shape_));
  }
  const std::size_t c = shape_[1];
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return Tensor(Shape{count, c}, std::move(out));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  if (rank() != 2) throw ShapeError("gather_rows on " + shape_str(shape_));
  const std::size_t c = shape_[1];
  std::vector<double> out;
  out.reserve(rows.size() * c);
  for (auto r : rows) {
    if (r >= shape_[0]) {
      throw ShapeError("gather_rows index " + std::to_string(r) + " out of range for " +
                       shape_str(shape_));
    }
    out.insert(out.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * c),
               data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  }
  return Tensor(Shape{rows.size(), c}, std::move(out));
}

}  // namespace mobe
