#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shapprune {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 array. Copies are deep.
///
/// A gradient buffer of the same shape may be attached on demand; it is not
/// touched by any of the arithmetic helpers and exists for optimizers that
/// want to keep a variable and its gradient together.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  bool has_grad() const noexcept { return grad_.has_value(); }
  /// Gradient buffer, zero-initialized on first access.
  std::span<float> grad();
  std::span<const float> grad() const;
  void drop_grad() noexcept { grad_.reset(); }

  /// Same data, new shape with the same element count.
  Tensor reshaped(Shape shape) const;
  void fill(float value);

  /// Rows [begin, end) along axis 0.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  /// Rows picked by index along axis 0.
  Tensor gather_rows(std::span<const std::size_t> rows) const;
  std::span<float> row(std::size_t i);
  std::span<const float> row(std::size_t i) const;
  std::size_t row_size() const;

  bool operator==(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
  std::optional<std::vector<float>> grad_;
};

}  // namespace shapprune
