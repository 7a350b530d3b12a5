#pragma once

// Confusion-minimizing Node Contrast: entropy map over the foreground
// prediction, threshold mask selecting highly confused positions, partition
// into in-/out-of-subgraph node sets, semantic center anchor, and the
// contrastive objective over cosine edges.

#include <vector>

#include "cgraph/graph.hpp"
#include "cgraph/ops.hpp"
#include "cgraph/spg.hpp"

namespace cgraph {

template <class T>
struct CNCConfig {
  T delta = T(0.2);  // entropy threshold, in (0, ln 2)
  T tau = T(0.1);    // temperature
  T alpha = T(0.01); // loss weight
};

template <class T>
struct ConfusionSelection {
  Tensor<T> entropy;        // H x W, values in [0, ln 2]
  Mask mask;                // M_delta at feature resolution
  Tensor<T> positives;      // C x |p|, confused nodes inside the subgraph
  Tensor<T> negatives;      // C x |n|, confused nodes outside
  std::vector<int> p_idx, n_idx;

  int p_count() const { return static_cast<int>(p_idx.size()); }
  int n_count() const { return static_cast<int>(n_idx.size()); }
};

// Binary prediction entropy per position: -[f log f + (1-f) log(1-f)].
template <class T>
Tensor<T> entropy_map(const Tensor<T>& fg) {
  auto one_minus = sub(Tensor<T>::full(fg.shape(), T(1)), fg);
  return neg(add(mul(fg, log_clamped(fg)), mul(one_minus, log_clamped(one_minus))));
}

// Threshold the entropy map at delta and split the selected query node
// columns by the resized ground truth. Empty selections are valid.
template <class T>
ConfusionSelection<T> select_confused(const Tensor<T>& entropy, const Mask& gt_resized,
                                      const Tensor<T>& query_nodes, T delta,
                                      SelectionCache* sel = nullptr) {
  const int h = entropy.dim(0), w = entropy.dim(1);
  if (gt_resized.h != h || gt_resized.w != w)
    throw DimError("select_confused: ground truth resolution mismatch");
  const int c = query_nodes.dim(0);
  auto flat = query_nodes.reshaped({c, h * w});

  auto compute = [&](bool positive) {
    return [&, positive]() {
      std::vector<int> idx;
      for (int i = 0; i < h * w; ++i) {
        if (!(entropy.at(i) > delta)) continue;
        const bool fg = gt_resized.v[static_cast<std::size_t>(i)] != 0;
        if (fg == positive) idx.push_back(i);
      }
      return idx;
    };
  };
  std::vector<int> p_idx, n_idx;
  if (sel) {
    p_idx = sel->select(compute(true));
    n_idx = sel->select(compute(false));
  } else {
    p_idx = compute(true)();
    n_idx = compute(false)();
  }

  ConfusionSelection<T> out;
  out.entropy = entropy.detached();
  out.mask = Mask::zeros(h, w);
  for (int i : p_idx) out.mask.v[static_cast<std::size_t>(i)] = 1;
  for (int i : n_idx) out.mask.v[static_cast<std::size_t>(i)] = 1;
  out.p_idx = p_idx;
  out.n_idx = n_idx;
  out.positives = p_idx.empty() ? Tensor<T>::zeros({c, 0}) : gather_columns(flat, p_idx);
  out.negatives = n_idx.empty() ? Tensor<T>::zeros({c, 0}) : gather_columns(flat, n_idx);
  return out;
}

// Mean query node vector over the resized-foreground positions.
template <class T>
Tensor<T> semantic_center(const Tensor<T>& query_nodes, const Mask& gt_resized) {
  const int c = query_nodes.dim(0), h = query_nodes.dim(1), w = query_nodes.dim(2);
  if (gt_resized.h != h || gt_resized.w != w)
    throw DimError("semantic_center: ground truth resolution mismatch");
  std::vector<int> idx;
  for (int i = 0; i < h * w; ++i)
    if (gt_resized.v[static_cast<std::size_t>(i)]) idx.push_back(i);
  if (idx.empty()) throw EpisodeSkip("semantic_center: empty foreground in resized ground truth");
  auto cols = gather_columns(query_nodes.reshaped({c, h * w}), idx);
  auto ones = Tensor<T>::full({static_cast<int>(idx.size()), 1}, T(1));
  return scale(matmul(cols, ones), T(1) / T(idx.size()));  // C x 1
}

// InfoNCE-style contrast: row i of the cost matrix is
// [cos(q, p_i), cos(q, n_1), ..., cos(q, n_|n|)]; the loss is the mean
// negative log-softmax mass on column 0 at temperature tau. Returns a plain
// zero when either side of the partition is empty.
template <class T>
Tensor<T> cnc_loss(const ConfusionSelection<T>& selection, const Tensor<T>& center, T tau) {
  if (tau <= T(0)) throw ArgError("cnc_loss: tau must be positive");
  const int np = selection.p_count(), nn = selection.n_count();
  if (np == 0 || nn == 0) return Tensor<T>::scalar(T(0));
  auto qhat = l2_normalize_columns(center);               // C x 1
  auto cos_p = matmul(transpose(l2_normalize_columns(selection.positives)), qhat);  // |p| x 1
  auto cos_n = matmul(transpose(qhat), l2_normalize_columns(selection.negatives));  // 1 x |n|
  auto tiled = matmul(Tensor<T>::full({np, 1}, T(1)), cos_n);                       // |p| x |n|
  auto cost = concat<T>({cos_p, tiled}, 1);               // |p| x (1+|n|)
  auto ls = log_softmax_rows(scale(cost, T(1) / tau));
  return neg(reduce_mean(gather_columns(ls, {0})));
}

}  // namespace cgraph
