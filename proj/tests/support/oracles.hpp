#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dtsst/tensor.hpp"

namespace testing_oracles {

inline dtsst::Tensor random_tensor(dtsst::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                   double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(dtsst::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return dtsst::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Central differences of a scalar function with respect to every element of `x`,
// evaluated without touching the tape.
inline std::vector<double> numeric_grad(const std::function<double()>& f, const dtsst::Tensor& x,
                                        double h = 1e-6) {
  dtsst::NoGradGuard guard;
  auto data = x.mutable_data();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double up = f();
    data[i] = orig - h;
    const double down = f();
    data[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(std::span<const double> a, const std::vector<double>& n) {
  double worst = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(n[i]), 1e-6});
    worst = std::max(worst, std::abs(a[i] - n[i]) / denom);
  }
  return worst;
}

// Weighted sum of all outputs with fixed pseudo-random weights, so every output
// element contributes a distinct gradient direction.
inline double weighted_sum(const dtsst::Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double s = 0.0;
  for (double v : y.data()) s += u(rng) * v;
  return s;
}

inline dtsst::Tensor weighted_sum_tensor(const dtsst::Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(y.numel());
  for (auto& v : w) v = u(rng);
  return dtsst::Tensor::from(y.shape(), std::move(w));
}

}  // namespace testing_oracles
