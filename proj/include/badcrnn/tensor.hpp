#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <vector>

namespace badcrnn {

// Dense row-major float64 array with a runtime shape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : shape(std::move(dims)), data(count(shape), fill) {}

  static std::size_t count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> span() noexcept { return data; }
  std::span<const double> span() const noexcept { return data; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool operator==(const Tensor&) const = default;
};

}  // namespace badcrnn
