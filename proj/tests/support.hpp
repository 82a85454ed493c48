#pragma once

// Shared test helpers: random tensors and a central finite-difference oracle.

#include "mamo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testing {

using mamo::Shape;
using mamo::Tensor;

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Tensor<double> random_param(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::parameter(shape, random_values(mamo::numel(shape), rng, lo, hi));
}

inline Tensor<double> random_const(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::constant(shape, random_values(mamo::numel(shape), rng, lo, hi));
}

struct GradCheck {
  double max_rel_error = 0;
  std::string worst;  // "<input index>[<flat index>]" of the worst entry
  std::size_t entries = 0;
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kRelFloor = 1e-8;

// Compares the tape gradient of loss() with respect to each input against
// central differences (step 1e-5), entry by entry, with the error measure
// |analytic - fd| / (|fd| + 1e-8). Inputs without a gradient count as zero.
inline GradCheck check_gradients(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                                 double step = kFdStep) {
  for (auto& t : inputs) t.clear_grad();
  {
    mamo::Tape<double> tape;
    mamo::Tape<double>::Scope scope(tape);
    tape.backward(loss());
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
    t.clear_grad();
  }
  GradCheck out;
  mamo::Tape<double>::Pause pause;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto v = inputs[i].mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double saved = v[j];
      v[j] = saved + step;
      const double up = loss().item();
      v[j] = saved - step;
      const double down = loss().item();
      v[j] = saved;
      const double fd = (up - down) / (2 * step);
      const double err = std::abs(analytic[i][j] - fd) / (std::abs(fd) + kRelFloor);
      ++out.entries;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = std::to_string(i) + "[" + std::to_string(j) + "] analytic " + std::to_string(analytic[i][j]) +
                    " fd " + std::to_string(fd);
      }
    }
  }
  return out;
}

// Scalar probe of a tensor: sum(y * w) for fixed random weights, so every
// output entry carries a distinct downstream gradient.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return mamo::sum(mamo::mul(y, random_const(y.shape(), rng)));
}

}  // namespace testing
