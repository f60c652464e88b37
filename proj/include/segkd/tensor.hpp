#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace segkd {

// Dense row-major float32 array. Shape is explicit; no broadcasting.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<float> data);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, float value);

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_[i]; }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

}  // namespace segkd
