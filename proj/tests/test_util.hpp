#pragma once

#include <random>

#include "ndlab/tensor.hpp"

namespace ndlab::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = normal(rng);
  return t;
}

}  // namespace ndlab::testing
