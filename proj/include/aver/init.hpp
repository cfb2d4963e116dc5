#pragma once

// Weight initialization. Kaiming-uniform feeds layers followed by a ReLU;
// Xavier-uniform suits linear, tanh, and sigmoid-gated layers.

#include <cmath>
#include <vector>

#include "aver/errors.hpp"
#include "aver/rng.hpp"
#include "aver/tensor.hpp"

namespace aver {

template <typename T = float>
TensorT<T> kaiming_uniform(Rng& rng, std::vector<int> shape, int fan_in) {
  require(fan_in > 0, "kaiming_uniform: fan_in must be positive, got ", fan_in);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> v(numel_of(shape));
  for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return TensorT<T>(std::move(shape), std::move(v));
}

template <typename T = float>
TensorT<T> xavier_uniform(Rng& rng, std::vector<int> shape, int fan_in, int fan_out) {
  require(fan_in > 0 && fan_out > 0, "xavier_uniform: fans must be positive, got ", fan_in, " and ",
          fan_out);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> v(numel_of(shape));
  for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return TensorT<T>(std::move(shape), std::move(v));
}

}  // namespace aver
