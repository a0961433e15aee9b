#pragma once

// Shared helpers for the test suites.

#include "affnet/blocks.hpp"

namespace testutil {

inline affnet::Tensor rand_tensor(affnet::Shape shape, affnet::Rng& rng,
                                  double scale = 1.0,
                                  bool requires_grad = false) {
  std::vector<double> v(static_cast<size_t>(affnet::numel(shape)));
  for (double& x : v) x = rng.gaussian() * scale;
  return affnet::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline void zero_params(affnet::ParamList& params) {
  for (auto& p : params)
    std::fill(p.tensor.mutable_values().begin(),
              p.tensor.mutable_values().end(), 0.0);
}

inline void set_values(affnet::Tensor t, double v) {
  std::fill(t.mutable_values().begin(), t.mutable_values().end(), v);
}

}  // namespace testutil
