#pragma once

// Dense row-major multi-dimensional array of doubles. The only tensor type
// used across the project; autodiff nodes, datasets and checkpoints all
// carry these.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ex2l {

class NDArray {
 public:
  NDArray() = default;

  explicit NDArray(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

  NDArray(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size())
      throw std::invalid_argument("NDArray: shape/data size mismatch");
  }

  static NDArray zeros(std::vector<std::size_t> shape) { return NDArray(std::move(shape)); }

  static NDArray full(std::vector<std::size_t> shape, double v) {
    NDArray a(std::move(shape));
    std::fill(a.data_.begin(), a.data_.end(), v);
    return a;
  }

  static NDArray scalar(double v) { return NDArray({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Linear index from up to 4 subscripts, row-major.
  double& at(std::size_t i) { return data_.at(i); }
  double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at3(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at3(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  double at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  bool same_shape(const NDArray& o) const { return shape_ == o.shape_; }

  NDArray reshaped(std::vector<std::size_t> shape) const {
    if (checked_numel(shape) != numel())
      throw std::invalid_argument("NDArray: reshape changes element count");
    return NDArray(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  double max() const {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : data_) m = v > m ? v : m;
    return m;
  }

  static std::string shape_string(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += "x";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e < 1) throw std::invalid_argument("NDArray: extents must be >= 1");
      n *= e;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Error taxonomy shared across modules. The CLI maps these onto its exit
// codes (2 config, 3 data, 4 internal).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ex2l
