#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cgraph/tensor.hpp"

namespace cgraph {

// Adam with bias correction and a stepwise learning-rate decay: the rate in
// effect at step counter t (0-based) is base * decay^floor(t / decay_every).
template <class T>
struct OptimizerState {
  T lr_base = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T decay = T(0.95);
  int decay_every = 1000;
  long step = 0;

  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void init(const std::vector<int>& sizes) {
    m.clear();
    v.clear();
    for (int s : sizes) {
      m.emplace_back(static_cast<std::size_t>(s), T(0));
      v.emplace_back(static_cast<std::size_t>(s), T(0));
    }
  }

  T current_lr() const {
    T lr = lr_base;
    const long k = step / decay_every;
    for (long i = 0; i < k; ++i) lr *= decay;
    return lr;
  }
};

// One update over a parameter set. Parameters are immutable tensors, so the
// update returns fresh tensors in the same order. Throws TrainingError
// naming the parameter on any non-finite gradient.
template <class T>
std::vector<Tensor<T>> adam_step(const std::vector<Tensor<T>>& params,
                                 const std::vector<Tensor<T>>& grads,
                                 OptimizerState<T>& state,
                                 const std::vector<std::string>& names = {}) {
  if (params.size() != grads.size())
    throw ContractError("adam_step: parameter/gradient count mismatch");
  if (state.m.size() != params.size()) {
    std::vector<int> sizes;
    for (const auto& p : params) sizes.push_back(p.size());
    state.init(sizes);
  }
  const T lr = state.current_lr();
  state.step += 1;
  const T b1t = std::pow(state.beta1, T(state.step));
  const T b2t = std::pow(state.beta2, T(state.step));

  std::vector<Tensor<T>> updated;
  updated.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const auto& g = grads[i];
    if (p.size() != g.size())
      throw ContractError("adam_step: shape mismatch at parameter " + std::to_string(i));
    auto& mi = state.m[i];
    auto& vi = state.v[i];
    std::vector<T> out(static_cast<std::size_t>(p.size()));
    const T* pp = p.ptr();
    const T* pg = g.ptr();
    for (int j = 0; j < p.size(); ++j) {
      const T gj = pg[j];
      if (!std::isfinite(gj)) {
        const std::string nm = i < names.size() ? names[i] : ("#" + std::to_string(i));
        throw TrainingError("non-finite gradient in parameter " + nm);
      }
      mi[static_cast<std::size_t>(j)] = state.beta1 * mi[static_cast<std::size_t>(j)] + (T(1) - state.beta1) * gj;
      vi[static_cast<std::size_t>(j)] = state.beta2 * vi[static_cast<std::size_t>(j)] + (T(1) - state.beta2) * gj * gj;
      const T mhat = mi[static_cast<std::size_t>(j)] / (T(1) - b1t);
      const T vhat = vi[static_cast<std::size_t>(j)] / (T(1) - b2t);
      out[static_cast<std::size_t>(j)] = pp[j] - lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    updated.push_back(Tensor<T>::from(p.shape(), std::move(out)));
  }
  return updated;
}

}  // namespace cgraph
