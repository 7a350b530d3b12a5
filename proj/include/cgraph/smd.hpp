#pragma once

// Subgraph Matching Decoding: project support subgraph and query nodes into
// a shared space, self-update the support channel weights, build the
// support-node connectivity map, and fuse it with the query nodes through a
// small residual decoder. Also hosts the prototypical matching baseline used
// for ablation comparisons.

#include <vector>

#include "cgraph/graph.hpp"
#include "cgraph/ops.hpp"

namespace cgraph {

template <class T>
struct ResidualBlockParams {
  Tensor<T> conv1_w, conv1_b;  // C x C x 3 x 3, C
  Tensor<T> ln_gain, ln_bias;
  Tensor<T> conv2_w, conv2_b;
};

template <class T>
struct SMDParams {
  Tensor<T> w_s;               // C x C, support projection
  Tensor<T> w_q;               // C x C, query projection
  Tensor<T> w_a;               // C x C, channel self-update
  Tensor<T> fuse_w, fuse_b;    // C x (N+C) 1x1 fuse, bias C
  ResidualBlockParams<T> block1, block2;
  Tensor<T> head_w, head_b;    // 1 x C, 1
};

// Foreground probability map plus its image-resolution binarization.
// fg + bg = 1 exactly at every position.
template <class T>
struct Prediction {
  Tensor<T> fg;  // H x W, in (0, 1)
  Tensor<T> bg;  // H x W
  Mask binary;   // image resolution, fg > 0.5 upsampled nearest
};

// Shared-space projection: support subgraph columns through w_s, flattened
// query nodes (transposed) through w_q.
template <class T>
std::pair<Tensor<T>, Tensor<T>> project_shared(const Tensor<T>& support_subgraph,
                                               const Tensor<T>& query_nodes,
                                               const SMDParams<T>& p) {
  if (support_subgraph.dim(0) != query_nodes.dim(0))
    throw DimError("project_shared: channel mismatch");
  const int c = query_nodes.dim(0);
  const int hw = query_nodes.dim(1) * query_nodes.dim(2);
  auto vs = matmul(p.w_s, support_subgraph);                            // C x N
  auto vq = matmul(transpose(query_nodes.reshaped({c, hw})), p.w_q);    // HW x C
  return {vs, vq};
}

// (1 + tanh(W_a v)) ⊙ v; the gate stays in (0, 2) so output magnitude is
// bounded by twice the input.
template <class T>
Tensor<T> channel_self_update(const Tensor<T>& subgraph, const Tensor<T>& w_a) {
  return mul(add_scalar(tanh(matmul(w_a, subgraph)), T(1)), subgraph);
}

// Elementwise mean of K same-shaped subgraph tensors.
template <class T>
Tensor<T> aggregate_kshot(const std::vector<Tensor<T>>& subgraphs) {
  if (subgraphs.empty()) throw ArgError("aggregate_kshot: empty subgraph list");
  Tensor<T> acc = subgraphs[0];
  for (std::size_t i = 1; i < subgraphs.size(); ++i) acc = add(acc, subgraphs[i]);
  return scale(acc, T(1) / T(subgraphs.size()));
}

// Connectivity map: sigma(psi(Vq Vs)), where psi transposes HWxN and
// unflattens row-major to N x H x W.
template <class T>
Tensor<T> connectivity_map(const Tensor<T>& query_proj, const Tensor<T>& support_updated,
                           int h, int w) {
  if (query_proj.dim(1) != support_updated.dim(0))
    throw DimError("connectivity_map: shared-space dimension mismatch");
  if (query_proj.dim(0) != h * w) throw DimError("connectivity_map: HW mismatch");
  const int n = support_updated.dim(1);
  auto prod = matmul(query_proj, support_updated);  // HW x N
  return sigmoid(transpose(prod).reshaped({n, h, w}));
}

namespace detail {

template <class T>
Tensor<T> residual_block(const Tensor<T>& x, const ResidualBlockParams<T>& p) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto y = conv3x3(x, p.conv1_w, p.conv1_b);
  y = layer_norm_cols(y.reshaped({c, h * w}), p.ln_gain, p.ln_bias).reshaped({c, h, w});
  y = conv3x3(relu(y), p.conv2_w, p.conv2_b);
  return add(x, y);
}

template <class T>
Mask binarize_upsample(const Tensor<T>& fg, int img_h, int img_w) {
  const int h = fg.dim(0), w = fg.dim(1);
  Mask m = Mask::zeros(h, w);
  for (int i = 0; i < h * w; ++i) m.v[static_cast<std::size_t>(i)] = fg.at(i) > T(0.5) ? 1 : 0;
  return upsample_mask_nearest(m, img_h, img_w);
}

}  // namespace detail

// Fuse the connectivity map with the query nodes and decode a foreground
// probability map: 1x1 fuse to C channels, two residual blocks, 1x1 head,
// sigmoid. bg = 1 - fg; the binary mask is the thresholded map upsampled to
// image resolution.
template <class T>
Prediction<T> decode_prediction(const Tensor<T>& phi, const Tensor<T>& query_nodes,
                                const SMDParams<T>& p, int img_h, int img_w) {
  if (phi.dim(1) != query_nodes.dim(1) || phi.dim(2) != query_nodes.dim(2))
    throw DimError("decode_prediction: spatial shape mismatch");
  const int c = query_nodes.dim(0), h = phi.dim(1), w = phi.dim(2);
  const int hw = h * w;
  auto cat = concat<T>({phi, query_nodes}, 0).reshaped({phi.dim(0) + c, hw});
  if (p.fuse_w.dim(1) != cat.dim(0))
    throw DimError("decode_prediction: fuse projection expects " + shape_str(p.fuse_w.shape()) +
                   ", got input extent " + std::to_string(cat.dim(0)));
  auto x = add(matmul(p.fuse_w, cat), p.fuse_b.reshaped({c, 1})).reshaped({c, h, w});
  x = detail::residual_block(x, p.block1);
  x = detail::residual_block(x, p.block2);
  auto logits = add(matmul(p.head_w, x.reshaped({c, hw})), p.head_b.reshaped({1, 1}));
  auto fg = sigmoid(logits).reshaped({h, w});
  auto bg = sub(Tensor<T>::full({h, w}, T(1)), fg);
  return Prediction<T>{fg, bg, detail::binarize_upsample(fg.detached(), img_h, img_w)};
}

namespace detail {

// Masked average of support node columns: the class prototype.
template <class T>
Tensor<T> masked_prototype(const Tensor<T>& support_nodes, const Mask& support_mask) {
  const int c = support_nodes.dim(0), h = support_nodes.dim(1), w = support_nodes.dim(2);
  Mask rm = resize_mask(support_mask, h, w);
  if (rm.count() == 0) throw EpisodeSkip("prototypical_baseline: empty foreground after resize");
  std::vector<int> idx;
  for (int i = 0; i < h * w; ++i)
    if (rm.v[static_cast<std::size_t>(i)]) idx.push_back(i);
  auto fg_cols = gather_columns(support_nodes.reshaped({c, h * w}), idx);
  auto ones = Tensor<T>::full({static_cast<int>(idx.size()), 1}, T(1));
  return scale(matmul(fg_cols, ones), T(1) / T(idx.size()));  // C x 1
}

template <class T>
Prediction<T> prototype_match(const Tensor<T>& proto, const Tensor<T>& query_nodes, int img_h,
                              int img_w) {
  const int c = query_nodes.dim(0), h = query_nodes.dim(1), w = query_nodes.dim(2);
  auto cosmap = matmul(transpose(l2_normalize_columns(query_nodes.reshaped({c, h * w}))),
                       l2_normalize_columns(proto));  // HW x 1
  auto fg = sigmoid(scale(add_scalar(cosmap, T(-0.5)), T(20))).reshaped({h, w});
  auto bg = sub(Tensor<T>::full({h, w}, T(1)), fg);
  return Prediction<T>{fg, bg, binarize_upsample(fg.detached(), img_h, img_w)};
}

}  // namespace detail

// Prototypical matching baseline: masked-average support prototype, cosine
// matched to each query node, squashed with a fixed scale/shift:
// fg = sigma(20 * (cos - 0.5)).
template <class T>
Prediction<T> prototypical_baseline(const Tensor<T>& support_nodes, const Mask& support_mask,
                                    const Tensor<T>& query_nodes, int img_h, int img_w) {
  if (support_nodes.shape() != query_nodes.shape())
    throw DimError("prototypical_baseline: node shape mismatch");
  auto proto = detail::masked_prototype(support_nodes, support_mask);
  return detail::prototype_match(proto, query_nodes, img_h, img_w);
}

// K-shot variant: per-shot prototypes averaged before matching.
template <class T>
Prediction<T> prototypical_baseline_kshot(const std::vector<Tensor<T>>& support_nodes,
                                          const std::vector<Mask>& support_masks,
                                          const Tensor<T>& query_nodes, int img_h, int img_w) {
  if (support_nodes.empty() || support_nodes.size() != support_masks.size())
    throw ArgError("prototypical_baseline_kshot: support set mismatch");
  std::vector<Tensor<T>> protos;
  for (std::size_t s = 0; s < support_nodes.size(); ++s)
    protos.push_back(detail::masked_prototype(support_nodes[s], support_masks[s]));
  return detail::prototype_match(aggregate_kshot(protos), query_nodes, img_h, img_w);
}

}  // namespace cgraph
