#pragma once

// Finite-difference helpers without any test-framework dependency, for the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <random>

#include "lesionseg/tensor.hpp"

namespace testutil_na {

using lesionseg::Shape;
using lesionseg::Tensor;

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> unif(static_cast<double>(lo),
                                              static_cast<double>(hi));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(unif(rng));
  return t;
}

template <typename T, typename F>
Tensor<T> fd_gradient(F&& loss, Tensor<T>& param, T h = T(1e-5)) {
  Tensor<T> grad(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T saved = param[i];
    param[i] = saved + h;
    const T up = loss();
    param[i] = saved - h;
    const T down = loss();
    param[i] = saved;
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

/// Worst componentwise relative difference, with an absolute floor at a small
/// fraction of the overall gradient scale.
template <typename T>
T max_grad_rel_error(const Tensor<T>& analytic, const Tensor<T>& numeric) {
  T scale = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    scale = std::max(scale, std::abs(analytic[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  T worst = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const T denom = std::max(
        {std::abs(analytic[i]), std::abs(numeric[i]), T(0.01) * scale, T(1e-12)});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace testutil_na
