#pragma once

#include <functional>

#include "quadnet/tensor.hpp"

namespace quadnet {

// Central-difference check of d f / d leaves. `f` rebuilds the graph from the
// leaves (which are perturbed in place) and returns a scalar. Result is the
// max over coordinates of |analytic - numeric| / max(1, |numeric|).
// Leaves must already require grad so that `f` sees the same graph node.
template <class T>
T grad_check_leaves(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> leaves, T eps = T(1e-5)) {
  for (auto& l : leaves) {
    if (!l.needs_grad()) throw Error("grad_check: leaf does not require grad");
    l.zero_grad();
  }
  auto eval = [&]() {
    NoGradGuard guard;
    Tensor<T> y = f();
    if (y.size() != 1) throw Error("grad_check: function is not scalar-valued, shape " + to_string(y.shape()));
    if (!std::isfinite(y.item())) throw Error("grad_check: non-finite function value");
    return y.item();
  };
  Tensor<T> y = f();
  if (y.size() != 1) throw Error("grad_check: function is not scalar-valued, shape " + to_string(y.shape()));
  if (!all_finite(y)) throw Error("grad_check: non-finite function value");
  if (y.needs_grad()) y.backward();
  T worst = 0;
  for (auto& l : leaves) {
    const Tensor<T> analytic = l.grad();
    if (!all_finite(analytic)) throw Error("grad_check: non-finite analytic gradient");
    auto v = l.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T orig = v[i];
      v[i] = orig + eps;
      const T fp = eval();
      v[i] = orig - eps;
      const T fm = eval();
      v[i] = orig;
      const T numeric = (fp - fm) / (T(2) * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(numeric)));
    }
  }
  return worst;
}

template <class T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T eps = T(1e-5)) {
  Tensor<T> leaf = x.clone();
  leaf.requires_grad(true);
  return grad_check_leaves<T>([&]() { return f(leaf); }, {leaf}, eps);
}

}  // namespace quadnet
