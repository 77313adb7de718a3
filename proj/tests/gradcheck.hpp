#pragma once

// Central finite-difference gradient oracle. Independent of the backward
// rules it checks: it only re-runs forward passes with perturbed leaves.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "sacnet/rng.hpp"
#include "sacnet/tensor.hpp"

namespace gradcheck {

using sacnet::TensorPtr;

struct Result {
  double max_err = 0.0;   // |ad - fd| / max(1, |ad|, |fd|)
  int64_t n_checked = 0;
};

// f builds a scalar loss from the given leaves; leaves must have
// requires_grad=true. eps defaults to the 1e-3 the acceptance suite pins.
inline Result check(const std::function<TensorPtr(const std::vector<TensorPtr>&)>& f,
                    const std::vector<TensorPtr>& leaves, double eps = 1e-3) {
  for (auto& l : leaves) l->zero_grad();
  auto loss = f(leaves);
  sacnet::backward(loss);

  Result res;
  for (auto& leaf : leaves) {
    leaf->ensure_grad();
    for (int64_t i = 0; i < leaf->size(); ++i) {
      const double saved = leaf->data[i];
      leaf->data[i] = saved + eps;
      const double lp = f(leaves)->value();
      leaf->data[i] = saved - eps;
      const double lm = f(leaves)->value();
      leaf->data[i] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double ad = leaf->grad[i];
      const double err = std::fabs(ad - fd) / std::max({1.0, std::fabs(ad), std::fabs(fd)});
      if (err > res.max_err) res.max_err = err;
      ++res.n_checked;
    }
  }
  return res;
}

inline TensorPtr random_tensor(sacnet::Shape shape, sacnet::Rng& rng, double lo = -1.0,
                               double hi = 1.0, bool requires_grad = true) {
  int64_t n = sacnet::numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.uniform(lo, hi);
  return sacnet::Tensor::create(std::move(shape), std::move(data), requires_grad);
}

}  // namespace gradcheck
