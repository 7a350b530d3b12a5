#pragma once

// Central-difference verification of the analytic gradients, plus the
// registry of per-primitive checks behind the `gradcheck` CLI command.

#include <functional>
#include <string>
#include <vector>

#include "cgraph/ops.hpp"
#include "cgraph/rng.hpp"
#include "cgraph/tensor.hpp"

namespace cgraph {

template <class T>
using ScalarFn = std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>;

// Max over coordinates of |analytic - central| / max(1, |central|).
// `f` must produce a scalar; it sees the input as a watched leaf on the
// analytic pass and as a plain constant on the difference passes.
template <class T>
T finite_diff_gradcheck(const ScalarFn<T>& f, const Tensor<T>& x, T h = T(1e-5)) {
  Tape<T> tape;
  Tensor<T> leaf = tape.watch(x);
  Tensor<T> y = f(tape, leaf);
  if (y.size() != 1)
    throw ContractError("finite_diff_gradcheck: f returned non-scalar " + shape_str(y.shape()));
  Tensor<T> analytic;
  if (y.tape()) {
    tape.backward(y);
    analytic = tape.grad(leaf);
  } else {
    analytic = Tensor<T>::zeros(x.shape());  // constant function of the input
  }

  std::vector<T> base = x.to_vector();
  T worst = T(0);
  for (int i = 0; i < x.size(); ++i) {
    std::vector<T> plus = base, minus = base;
    plus[static_cast<std::size_t>(i)] += h;
    minus[static_cast<std::size_t>(i)] -= h;
    Tape<T> t1, t2;
    const T fp = f(t1, Tensor<T>::from(x.shape(), std::move(plus))).item();
    const T fm = f(t2, Tensor<T>::from(x.shape(), std::move(minus))).item();
    const T central = (fp - fm) / (T(2) * h);
    const T err = std::abs(analytic.at(i) - central) / std::max(T(1), std::abs(central));
    worst = std::max(worst, err);
  }
  return worst;
}

// One registered primitive check: runs the finite-difference harness on a
// deterministic random instance and reports the max relative error.
struct GradCheckCase {
  std::string name;
  std::function<double(std::uint64_t seed)> run;
};

namespace detail {

inline Tensor<double> rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(static_cast<std::size_t>(numel(s)));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(s), std::move(d));
}

}  // namespace detail

// Checks for every differentiable primitive in the engine. Composite model
// checks are registered separately by the model layer.
inline std::vector<GradCheckCase> primitive_gradchecks() {
  using Td = Tensor<double>;
  std::vector<GradCheckCase> cases;
  auto probe = [](const ScalarFn<double>& f, const Td& x) {
    return finite_diff_gradcheck<double>(f, x);
  };

  cases.push_back({"add_broadcast", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto b = detail::rand_tensor({3, 1}, rng);
    auto x = detail::rand_tensor({3, 4}, rng);
    double e1 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(add(v, b), add(v, b))); }, x);
    double e2 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(add(x, v), add(x, v))); }, b);
    return std::max(e1, e2);
  }});
  cases.push_back({"subtract", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto b = detail::rand_tensor({2, 5}, rng);
    auto x = detail::rand_tensor({2, 5}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(sub(v, b), sub(v, b))); }, x);
  }});
  cases.push_back({"multiply_broadcast", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto b = detail::rand_tensor({1, 4}, rng);
    auto x = detail::rand_tensor({3, 4}, rng);
    double e1 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(mul(v, b), v)); }, x);
    double e2 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(mul(x, v), x)); }, b);
    return std::max(e1, e2);
  }});
  cases.push_back({"scale", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({7}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(scale(v, 1.7), scale(v, 1.7))); }, x);
  }});
  cases.push_back({"matmul", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto a = detail::rand_tensor({3, 4}, rng);
    auto b = detail::rand_tensor({4, 2}, rng);
    double e1 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(matmul(v, b), matmul(v, b))); }, a);
    double e2 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(matmul(a, v), matmul(a, v))); }, b);
    return std::max(e1, e2);
  }});
  cases.push_back({"transpose", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto a = detail::rand_tensor({3, 5}, rng);
    auto x = detail::rand_tensor({3, 5}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(transpose(v), transpose(a))); }, x);
  }});
  cases.push_back({"concat", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto b = detail::rand_tensor({2, 3}, rng);
    auto x = detail::rand_tensor({2, 2}, rng);
    return probe([&](Tape<double>&, const Td& v) {
      auto c = concat<double>({v, b}, 1);
      return reduce_sum(mul(c, c));
    }, x);
  }});
  cases.push_back({"slice_flat", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({10}, rng);
    return probe([&](Tape<double>&, const Td& v) {
      auto s = slice_flat(v, 2, {2, 3});
      return reduce_sum(mul(s, s));
    }, x);
  }});
  cases.push_back({"gather_columns", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({3, 6}, rng);
    std::vector<int> idx{5, 0, 3, 3};
    return probe([&](Tape<double>&, const Td& v) {
      auto s = gather_columns(v, idx);
      return reduce_sum(mul(s, s));
    }, x);
  }});
  cases.push_back({"relu", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({4, 4}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(relu(v), relu(v))); }, x);
  }});
  cases.push_back({"tanh", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({4, 4}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(tanh(v), tanh(v))); }, x);
  }});
  cases.push_back({"sigmoid", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({4, 4}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(sigmoid(v), sigmoid(v))); }, x);
  }});
  cases.push_back({"log_clamped", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({4, 4}, rng, 0.1, 2.0);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(log_clamped(v)); }, x);
  }});
  cases.push_back({"rsqrt_eps", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({3, 3}, rng, 0.2, 2.0);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(rsqrt_eps(v)); }, x);
  }});
  cases.push_back({"gather_flat", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({8}, rng);
    std::vector<int> idx{3, 3, 0, 7, 1, 2};
    return probe([&](Tape<double>&, const Td& v) {
      auto s = gather_flat(v, idx, {2, 3});
      return reduce_sum(mul(s, s));
    }, x);
  }});
  cases.push_back({"softmax_rows", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto w = detail::rand_tensor({3, 5}, rng);
    auto x = detail::rand_tensor({3, 5}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(softmax_rows(v), w)); }, x);
  }});
  cases.push_back({"log_softmax_rows", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto w = detail::rand_tensor({3, 5}, rng);
    auto x = detail::rand_tensor({3, 5}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(log_softmax_rows(v), w)); }, x);
  }});
  cases.push_back({"layer_norm", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({4, 6}, rng);
    auto gain = detail::rand_tensor({6}, rng, 0.5, 1.5);
    auto bias = detail::rand_tensor({6}, rng);
    auto w = detail::rand_tensor({4, 6}, rng);
    double e1 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(layer_norm(v, gain, bias), w)); }, x);
    double e2 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(layer_norm(x, v, bias), w)); }, gain);
    double e3 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(layer_norm(x, gain, v), w)); }, bias);
    return std::max({e1, e2, e3});
  }});
  cases.push_back({"conv3x3", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({2, 5, 5}, rng);
    auto w = detail::rand_tensor({3, 2, 3, 3}, rng);
    auto b = detail::rand_tensor({3}, rng);
    auto m = detail::rand_tensor({3, 5, 5}, rng);
    double e1 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(conv3x3(v, w, b), m)); }, x);
    double e2 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(conv3x3(x, v, b), m)); }, w);
    double e3 = probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(conv3x3(x, w, v), m)); }, b);
    return std::max({e1, e2, e3});
  }});
  cases.push_back({"adaptive_avg_pool_1d", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({3, 7}, rng);
    auto w = detail::rand_tensor({3, 4}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(adaptive_avg_pool_1d(v, 4), w)); }, x);
  }});
  cases.push_back({"reduce_sum", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({3, 3}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(v, v)); }, x);
  }});
  cases.push_back({"reduce_mean", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({3, 3}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_mean(mul(v, v)); }, x);
  }});
  cases.push_back({"l2_norm", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({6}, rng, 0.2, 1.0);
    return probe([&](Tape<double>&, const Td& v) { return l2_norm(v); }, x);
  }});
  cases.push_back({"max_elemwise", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto a = detail::rand_tensor({4, 4}, rng);
    auto x = detail::rand_tensor({4, 4}, rng);
    return probe([&](Tape<double>&, const Td& v) {
      auto m = max_elemwise<double>({v, a});
      return reduce_sum(mul(m, m));
    }, x);
  }});
  cases.push_back({"neighbor_max_diff", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({3, 5}, rng);
    std::vector<std::vector<int>> nb{{1, 2}, {0, 3}, {4, 1}, {2}, {0, 1, 2}};
    auto w = detail::rand_tensor({3, 5}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(neighbor_max_diff(v, nb), w)); }, x);
  }});
  cases.push_back({"l2_normalize_columns", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({4, 5}, rng, 0.2, 1.2);
    auto w = detail::rand_tensor({4, 5}, rng);
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(l2_normalize_columns(v), w)); }, x);
  }});
  cases.push_back({"masked_zero", [probe](std::uint64_t seed) {
    Rng rng(seed);
    auto x = detail::rand_tensor({4, 4}, rng);
    std::vector<double> mv(16);
    for (auto& v : mv) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    auto mask = Tensor<double>::from({4, 4}, std::move(mv));
    return probe([&](Tape<double>&, const Td& v) { return reduce_sum(mul(masked_zero(v, mask), v)); }, x);
  }});
  return cases;
}

}  // namespace cgraph
