#pragma once

#include <random>

#include "mobe/rng.hpp"
#include "mobe/tensor.hpp"

namespace mobe::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, sd);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline Tensor random_simplex(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(Shape{rows, cols});
  std::exponential_distribution<double> e(1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += t(r, c) = e(rng);
    for (std::size_t c = 0; c < cols; ++c) t(r, c) /= s;
  }
  return t;
}

inline Tensor one_hot_rows(const std::vector<std::size_t>& cls, std::size_t n) {
  Tensor t(Shape{cls.size(), n});
  for (std::size_t r = 0; r < cls.size(); ++r) t(r, cls[r]) = 1.0;
  return t;
}

}  // namespace mobe::testing
