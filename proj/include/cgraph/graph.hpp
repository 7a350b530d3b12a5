#pragma once

// Graph construction: a CxHxW feature map interpreted as a graph whose nodes
// are per-position channel vectors (index i = (h-1)*W + w, stored 0-based in
// row-major order) and whose edges are cosine similarities.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "cgraph/ops.hpp"
#include "cgraph/rng.hpp"
#include "cgraph/tensor.hpp"

namespace cgraph {

// Binary mask at arbitrary resolution, row-major uint8 {0,1}.
struct Mask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;

  static Mask zeros(int h, int w) { return Mask{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)}; }
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  int count() const {
    int c = 0;
    for (auto b : v) c += b;
    return c;
  }
};

// Dense top-k adjacency: a(i, j) = 1 iff j is among the k nearest semantic
// neighbors of i (j != i). Exactly k ones per row, zero diagonal.
struct Adjacency {
  int n = 0;
  int k = 0;
  std::vector<std::uint8_t> a;

  std::uint8_t at(int i, int j) const { return a[static_cast<std::size_t>(i) * n + j]; }
  std::vector<std::vector<int>> neighbor_lists() const {
    std::vector<std::vector<int>> nb(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      nb[static_cast<std::size_t>(i)].reserve(static_cast<std::size_t>(k));
      for (int j = 0; j < n; ++j)
        if (at(i, j)) nb[static_cast<std::size_t>(i)].push_back(j);
    }
    return nb;
  }
};

template <class T>
struct FeatureGraph {
  Tensor<T> nodes;  // C x H x W, kept in node-index order
  std::optional<Tensor<T>> edge_cache;  // HW x HW cosine similarities
  std::optional<Adjacency> adjacency;

  int channels() const { return nodes.dim(0); }
  int height() const { return nodes.dim(1); }
  int width() const { return nodes.dim(2); }
  int node_count() const { return nodes.dim(1) * nodes.dim(2); }
  Tensor<T> flat_nodes() const { return nodes.reshaped({nodes.dim(0), node_count()}); }
};

// 1-based node index convention for spatial position (h, w), both 1-based.
inline int node_index_1based(int h, int w, int width) { return (h - 1) * width + w; }

// ---------------------------------------------------------------------------
// Encoder: patch embedding + two residual per-position MLP blocks
// ---------------------------------------------------------------------------

template <class T>
struct MlpBlockParams {
  Tensor<T> ln_gain, ln_bias;  // layer norm over channels
  Tensor<T> w1, w2;            // two CxC projections
};

template <class T>
struct EncoderParams {
  int patch = 4;
  Tensor<T> patch_proj;  // C x (3*P*P)
  Tensor<T> patch_bias;  // C
  MlpBlockParams<T> block1, block2;
  Tensor<T> pos;  // learnable positional encoding E, C x H x W
};

namespace detail {

// Layer norm over the channel dimension of a CxN tensor (columns are nodes).
template <class T>
Tensor<T> layer_norm_cols(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  return transpose(layer_norm(transpose(x), gain, bias));
}

// Post-norm residual MLP block; normalizing the block output keeps feature
// scale bounded under appearance shift.
template <class T>
Tensor<T> mlp_block(const Tensor<T>& x, const MlpBlockParams<T>& p) {
  auto h = add(x, matmul(p.w2, relu(matmul(p.w1, x))));
  return layer_norm_cols(h, p.ln_gain, p.ln_bias);
}

// Zero-mean unit-variance normalization over all pixels, with the global
// intensity polarity canonicalized: if the standardized image is
// negatively skewed (minority-area structures darker than the background,
// as under an inverted-contrast appearance), the sign is flipped so
// structures always read bright. The flip decision is a constant with
// respect to gradients.
template <class T>
Tensor<T> zscore(const Tensor<T>& x) {
  auto centered = sub(x, reduce_mean(x));
  auto inv_std = rsqrt_eps(reduce_mean(mul(centered, centered)));
  auto z = mul(centered, inv_std);
  double skew = 0;
  for (T v : z.data()) skew += static_cast<double>(v) * static_cast<double>(v) * static_cast<double>(v);
  return skew >= 0 ? z : neg(z);
}

}  // namespace detail

// Image 3 x Himg x Wimg -> features C x (Himg/P) x (Wimg/P): per-image
// intensity standardization, non-overlapping P x P patches linearly
// projected, then two residual MLP blocks with layer norm.
template <class T>
Tensor<T> encode_image(const Tensor<T>& image, const EncoderParams<T>& enc) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimError("encode_image: expected 3xHxW image, got " + shape_str(image.shape()));
  const int p = enc.patch;
  const int hi = image.dim(1), wi = image.dim(2);
  if (hi % p != 0 || wi % p != 0)
    throw ArgError("encode_image: image " + std::to_string(hi) + "x" + std::to_string(wi) +
                   " not divisible by patch size " + std::to_string(p));
  const int h = hi / p, w = wi / p;
  const int d = 3 * p * p;
  // Patch columns as a flat-index permutation: row (c*P+py)*P+px of column
  // (by*w+bx) reads pixel (c, by*P+py, bx*P+px).
  std::vector<int> perm(static_cast<std::size_t>(d) * h * w);
  for (int c = 0; c < 3; ++c)
    for (int py = 0; py < p; ++py)
      for (int px = 0; px < p; ++px) {
        const int row = (c * p + py) * p + px;
        for (int by = 0; by < h; ++by)
          for (int bx = 0; bx < w; ++bx)
            perm[static_cast<std::size_t>(row) * h * w + by * w + bx] =
                (c * hi + by * p + py) * wi + bx * p + px;
      }
  auto patches = gather_flat(detail::zscore(image), perm, {d, h * w});
  auto feat = add(matmul(enc.patch_proj, patches),
                  enc.patch_bias.reshaped({enc.patch_bias.size(), 1}));
  feat = detail::mlp_block(feat, enc.block1);
  feat = detail::mlp_block(feat, enc.block2);
  return feat.reshaped({feat.dim(0), h, w});
}

// Node tensor of the graph modeling: elementwise F + E.
template <class T>
Tensor<T> add_positional(const Tensor<T>& feature, const Tensor<T>& pos) {
  if (feature.shape() != pos.shape())
    throw DimError("add_positional: feature " + shape_str(feature.shape()) +
                   " vs positional " + shape_str(pos.shape()));
  return add(feature, pos);
}

// Pairwise cosine similarities between node columns: symmetric, unit
// diagonal, entries in [-1, 1]. Norms carry a smooth 1e-8 guard.
template <class T>
Tensor<T> cosine_edges(const Tensor<T>& nodes) {
  if (nodes.rank() != 2) throw DimError("cosine_edges expects CxM nodes, got " + shape_str(nodes.shape()));
  auto unit = l2_normalize_columns(nodes);
  return matmul(transpose(unit), unit);
}

// Top-k semantic neighbors per row, diagonal excluded, ties broken toward
// the lower column index.
template <class T>
Adjacency topk_adjacency(const Tensor<T>& edges, int k) {
  if (edges.rank() != 2 || edges.dim(0) != edges.dim(1))
    throw DimError("topk_adjacency expects square edge matrix, got " + shape_str(edges.shape()));
  const int n = edges.dim(0);
  if (k < 1 || k > n - 1)
    throw ArgError("topk_adjacency: k=" + std::to_string(k) + " outside [1, " + std::to_string(n - 1) + "]");
  Adjacency adj{n, k, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n, 0)};
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(n) - 1);
  const T* p = edges.ptr();
  for (int i = 0; i < n; ++i) {
    order.clear();
    for (int j = 0; j < n; ++j)
      if (j != i) order.push_back(j);
    const T* row = p + static_cast<std::ptrdiff_t>(i) * n;
    // Descending weight, ties toward the lower column index.
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [row](int a, int b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    for (int s = 0; s < k; ++s) adj.a[static_cast<std::size_t>(i) * n + order[static_cast<std::size_t>(s)]] = 1;
  }
  return adj;
}

// ---------------------------------------------------------------------------
// Mask resizing and support subgraph extraction
// ---------------------------------------------------------------------------

// Average-pool the mask into the target grid and threshold at 0.5, ties to
// foreground.
inline Mask resize_mask(const Mask& m, int h, int w) {
  Mask out = Mask::zeros(h, w);
  for (int y = 0; y < h; ++y) {
    const int y0 = (y * m.h) / h, y1 = ((y + 1) * m.h + h - 1) / h;
    for (int x = 0; x < w; ++x) {
      const int x0 = (x * m.w) / w, x1 = ((x + 1) * m.w + w - 1) / w;
      int sum = 0;
      for (int yy = y0; yy < y1; ++yy)
        for (int xx = x0; xx < x1; ++xx) sum += m.at(yy, xx);
      const int area = (y1 - y0) * (x1 - x0);
      out.at(y, x) = (2 * sum >= area) ? 1 : 0;
    }
  }
  return out;
}

// Nearest-neighbor upsampling of a binary mask to image resolution.
inline Mask upsample_mask_nearest(const Mask& m, int h, int w) {
  Mask out = Mask::zeros(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = m.at(y * m.h / h, x * m.w / w);
  return out;
}

template <class T>
Tensor<T> mask_to_tensor(const Mask& m) {
  std::vector<T> d(m.v.begin(), m.v.end());
  return Tensor<T>::from({m.h, m.w}, std::move(d));
}

// Support nodes reduced to a fixed node count N. Default route: zero the
// background columns and pool the full map, so background zeros take part
// in the bin averages. The gather variant instead keeps only foreground
// columns before pooling.
template <class T>
Tensor<T> extract_support_subgraph(const Tensor<T>& nodes, const Mask& mask, int n,
                                   bool gather_foreground_only = false) {
  if (nodes.rank() != 3) throw DimError("extract_support_subgraph expects CxHxW nodes");
  const int c = nodes.dim(0), h = nodes.dim(1), w = nodes.dim(2);
  Mask rm = resize_mask(mask, h, w);
  if (rm.count() == 0)
    throw EpisodeSkip("support mask has no foreground after resizing to " +
                      std::to_string(h) + "x" + std::to_string(w));
  auto flat = nodes.reshaped({c, h * w});
  if (gather_foreground_only) {
    std::vector<int> idx;
    for (int i = 0; i < h * w; ++i)
      if (rm.v[static_cast<std::size_t>(i)]) idx.push_back(i);
    const int fg = static_cast<int>(idx.size());
    if (fg >= n) return adaptive_avg_pool_1d(gather_columns(flat, idx), n);
    // Fewer foreground columns than subgraph slots: cycle through them so
    // every slot carries a foreground node.
    std::vector<int> cyc(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) cyc[static_cast<std::size_t>(i)] = idx[static_cast<std::size_t>(i % fg)];
    return gather_columns(flat, cyc);
  }
  auto masked = masked_zero(flat, mask_to_tensor<T>(rm).reshaped({1, h * w}));
  return adaptive_avg_pool_1d(masked, n);
}

}  // namespace cgraph
