#include "shapprune/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

#include "shapprune/errors.hpp"

namespace shapprune {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  for (auto extent : shape_)
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto extent : shape_)
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  if (shape_size(shape_) != data_.size())
    throw ShapeError("shape " + shape_str(shape_) + " needs " + std::to_string(shape_size(shape_)) +
                     " values, got " + std::to_string(data_.size()));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  return shape_[axis];
}

std::span<float> Tensor::grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0f);
  return *grad_;
}

std::span<const float> Tensor::grad() const {
  if (!grad_) throw InvalidArgument("tensor has no gradient buffer");
  return *grad_;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

std::size_t Tensor::row_size() const {
  if (shape_.empty()) throw ShapeError("scalar tensor has no rows");
  return data_.size() / shape_[0];
}

std::span<float> Tensor::row(std::size_t i) {
  const auto n = row_size();
  return std::span<float>(data_).subspan(i * n, n);
}

std::span<const float> Tensor::row(std::size_t i) const {
  const auto n = row_size();
  return std::span<const float>(data_).subspan(i * n, n);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > dim(0))
    throw ShapeError("row slice [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(shape_));
  const auto n = row_size();
  Shape out = shape_;
  out[0] = end - begin;
  return Tensor(std::move(out), std::vector<float>(data_.begin() + begin * n, data_.begin() + end * n));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  if (rows.empty()) throw ShapeError("gather of zero rows");
  const auto n = row_size();
  Shape out = shape_;
  out[0] = rows.size();
  std::vector<float> data;
  data.reserve(rows.size() * n);
  for (auto r : rows) {
    if (r >= shape_[0]) throw ShapeError("row " + std::to_string(r) + " out of range");
    data.insert(data.end(), data_.begin() + r * n, data_.begin() + (r + 1) * n);
  }
  return Tensor(std::move(out), std::move(data));
}

}  // namespace shapprune
