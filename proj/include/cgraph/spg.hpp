#pragma once

// Structural Prior Graph layer: Support Subgraph Linking (self-attention
// over the pooled support-class nodes), Interactive Subgraph Injection
// (cross-attention of both node maps onto the linked subgraph, shared
// weights), and Graph Structure Modeling (dynamic top-k max-relative graph
// convolution with residual update).

#include <cmath>
#include <functional>
#include <vector>

#include "cgraph/graph.hpp"
#include "cgraph/ops.hpp"

namespace cgraph {

// Frozen non-differentiable selections (top-k neighbor sets, confusion index
// sets). During gradient checking the recorded selections are replayed so
// the perturbed evaluations measure the same piecewise-smooth function the
// backward pass differentiates.
struct SelectionCache {
  bool replay = false;
  std::size_t cursor = 0;
  std::vector<std::vector<int>> entries;

  const std::vector<int>& select(const std::function<std::vector<int>()>& compute) {
    if (replay) {
      if (cursor >= entries.size()) throw ContractError("SelectionCache: replay past end");
      return entries[cursor++];
    }
    entries.push_back(compute());
    return entries.back();
  }
  void rewind() { cursor = 0; }
};

// Observer for forward-pass internals: every attention matrix, every GSM
// adjacency, and the node tensors leaving each SPG layer, in execution
// order.
template <class T>
struct Trace {
  std::vector<Tensor<T>> attention;
  std::vector<Adjacency> adjacencies;
  std::vector<Tensor<T>> layer_support_nodes;
  std::vector<Tensor<T>> layer_query_nodes;
  std::vector<int> layer_k;
};

template <class T>
struct ForwardCtx {
  Trace<T>* trace = nullptr;
  SelectionCache* sel = nullptr;
};

// ---------------------------------------------------------------------------
// Transformer block (single head, post-norm, FFN hidden width 2C)
// ---------------------------------------------------------------------------

template <class T>
struct TransformerParams {
  Tensor<T> wq, wk, wv, wo;          // C x C projections
  Tensor<T> ffn1, ffn2;              // 2C x C and C x 2C
  Tensor<T> ln1_gain, ln1_bias;      // around attention
  Tensor<T> ln2_gain, ln2_bias;      // around the FFN
};

// queries CxNq attend to keys/values CxNk; residual + layer norm around both
// the attention and the FFN.
template <class T>
Tensor<T> transformer_block(const Tensor<T>& queries, const Tensor<T>& keys_values,
                            const TransformerParams<T>& p, Trace<T>* trace = nullptr) {
  if (queries.rank() != 2 || keys_values.rank() != 2 || queries.dim(0) != keys_values.dim(0))
    throw DimError("transformer_block: channel mismatch " + shape_str(queries.shape()) +
                   " vs " + shape_str(keys_values.shape()));
  const int c = queries.dim(0);
  auto qp = matmul(transpose(queries), p.wq);       // Nq x C
  auto kp = matmul(transpose(keys_values), p.wk);   // Nk x C
  auto scores = scale(matmul(qp, transpose(kp)), T(1) / std::sqrt(T(c)));
  auto attn = softmax_rows(scores);                 // Nq x Nk, row-stochastic
  if (trace) trace->attention.push_back(attn.detached());
  auto agg = transpose(matmul(attn, matmul(transpose(keys_values), p.wv)));  // C x Nq
  auto h = detail::layer_norm_cols(add(queries, matmul(p.wo, agg)), p.ln1_gain, p.ln1_bias);
  auto ffn = matmul(p.ffn2, relu(matmul(p.ffn1, h)));
  return detail::layer_norm_cols(add(h, ffn), p.ln2_gain, p.ln2_bias);
}

// Support Subgraph Linking: self-attention over the pooled subgraph nodes.
template <class T>
Tensor<T> ssl_stage(const Tensor<T>& support_subgraph, const TransformerParams<T>& p,
                    Trace<T>* trace = nullptr) {
  return transformer_block(support_subgraph, support_subgraph, p, trace);
}

// ---------------------------------------------------------------------------
// 2D sinusoidal positional encoding
// ---------------------------------------------------------------------------

// First C/2 channels encode the column index, last C/2 the row index;
// within each half channels alternate sin/cos at frequencies
// 1/10000^(2j/(C/2)). Parameter-free and deterministic.
template <class T>
Tensor<T> sinusoidal_posenc(int c, int h, int w) {
  if (c % 4 != 0) throw ArgError("sinusoidal_posenc: C=" + std::to_string(c) + " not divisible by 4");
  const int half = c / 2;
  std::vector<T> out(static_cast<std::size_t>(c) * h * w);
  for (int ch = 0; ch < c; ++ch) {
    const bool row_half = ch >= half;
    const int within = row_half ? ch - half : ch;
    const int j = within / 2;
    const bool is_cos = within % 2 != 0;
    const double freq = std::pow(10000.0, -2.0 * j / half);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double pos = row_half ? y : x;
        const double v = is_cos ? std::cos(pos * freq) : std::sin(pos * freq);
        out[(static_cast<std::size_t>(ch) * h + y) * w + x] = static_cast<T>(v);
      }
    }
  }
  return Tensor<T>::from({c, h, w}, std::move(out));
}

// Interactive Subgraph Injection: both node maps, offset by the sinusoidal
// encoding, cross-attend to the linked subgraph with the same parameters
// (gradients from the two calls accumulate in one weight set).
template <class T>
std::pair<Tensor<T>, Tensor<T>> isi_stage(const Tensor<T>& query_nodes,
                                          const Tensor<T>& support_nodes,
                                          const Tensor<T>& linked_subgraph,
                                          const TransformerParams<T>& shared,
                                          Trace<T>* trace = nullptr) {
  if (query_nodes.shape() != support_nodes.shape())
    throw DimError("isi_stage: query/support node shape mismatch");
  const int c = query_nodes.dim(0), h = query_nodes.dim(1), w = query_nodes.dim(2);
  auto ipos = sinusoidal_posenc<T>(c, h, w);
  auto q = add(query_nodes, ipos).reshaped({c, h * w});
  auto s = add(support_nodes, ipos).reshaped({c, h * w});
  auto qo = transformer_block(q, linked_subgraph, shared, trace).reshaped({c, h, w});
  auto so = transformer_block(s, linked_subgraph, shared, trace).reshaped({c, h, w});
  return {qo, so};
}

// ---------------------------------------------------------------------------
// Graph Structure Modeling (dynamic top-k MRConv)
// ---------------------------------------------------------------------------

template <class T>
struct GsmParams {
  Tensor<T> w_phi;              // C x 2C
  Tensor<T> ln_gain, ln_bias;   // layer norm after the projection
};

// Recomputes cosine edges and top-k adjacency from the incoming nodes, then
// updates each node with the max-relative aggregate of its neighborhood:
//   out_i = phi(concat(x_i, max_j (x_i - x_j))) + x_i.
// The edge estimate is a constant for differentiation.
template <class T>
FeatureGraph<T> gsm_stage(const FeatureGraph<T>& graph, const GsmParams<T>& p, int k_layer,
                          ForwardCtx<T> ctx = {}) {
  const int c = graph.channels(), h = graph.height(), w = graph.width();
  const int m = h * w;
  if (k_layer > m - 1) throw ArgError("gsm_stage: k=" + std::to_string(k_layer) + " > HW-1");
  auto x = graph.flat_nodes();

  auto edges = cosine_edges(x.detached());
  Adjacency adj{m, k_layer, {}};
  auto rebuild = [&]() {
    Adjacency a = topk_adjacency(edges, k_layer);
    return a;
  };
  if (ctx.sel) {
    const auto& flat = ctx.sel->select([&]() {
      Adjacency a = rebuild();
      std::vector<int> enc;
      enc.reserve(static_cast<std::size_t>(m) * k_layer);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
          if (a.at(i, j)) enc.push_back(j);
      return enc;
    });
    adj.a.assign(static_cast<std::size_t>(m) * m, 0);
    for (int i = 0; i < m; ++i)
      for (int s = 0; s < k_layer; ++s)
        adj.a[static_cast<std::size_t>(i) * m + flat[static_cast<std::size_t>(i) * k_layer + s]] = 1;
  } else {
    adj = rebuild();
  }
  if (ctx.trace) ctx.trace->adjacencies.push_back(adj);

  auto maxdiff = neighbor_max_diff(x, adj.neighbor_lists());
  auto update = detail::layer_norm_cols(matmul(p.w_phi, concat<T>({x, maxdiff}, 0)),
                                        p.ln_gain, p.ln_bias);
  FeatureGraph<T> out;
  out.nodes = add(x, update).reshaped({c, h, w});
  out.edge_cache = edges;
  out.adjacency = adj;
  return out;
}

// ---------------------------------------------------------------------------
// Layer stack
// ---------------------------------------------------------------------------

template <class T>
struct SPGLayerParams {
  TransformerParams<T> ssl;
  TransformerParams<T> isi;   // shared between the query and support paths
  GsmParams<T> gsm;
  int k_layer = 9;
};

// Neighborhood schedule: linear from k in the first layer to 2k in the last,
// rounded to the nearest integer.
inline std::vector<int> k_schedule(int depth, int k) {
  std::vector<int> ks;
  for (int i = 1; i <= depth; ++i) {
    if (depth == 1) {
      ks.push_back(k);
    } else {
      ks.push_back(static_cast<int>(std::lround(k + (i - 1) * static_cast<double>(k) / (depth - 1))));
    }
  }
  return ks;
}

template <class T>
struct SPGStack {
  std::vector<SPGLayerParams<T>> layers;
  int subgraph_nodes = 64;          // N, the pooled support node count
  bool gather_foreground = false;   // subgraph extraction variant switch
};

template <class T>
struct SpgResult {
  FeatureGraph<T> support;
  FeatureGraph<T> query;
  Tensor<T> linked_subgraph;  // last layer's SSL output, C x N
};

// Full stack: per layer, re-extract the support subgraph from the current
// support nodes, link it, inject into both node maps, then run GSM on the
// support and query graphs (in that order).
template <class T>
SpgResult<T> spg_forward(const FeatureGraph<T>& support_graph, const FeatureGraph<T>& query_graph,
                         const Mask& support_mask, const SPGStack<T>& stack,
                         ForwardCtx<T> ctx = {}) {
  if (support_graph.nodes.shape() != query_graph.nodes.shape())
    throw DimError("spg_forward: support/query graph shape mismatch");
  FeatureGraph<T> s = support_graph;
  FeatureGraph<T> q = query_graph;
  Tensor<T> linked;
  for (const auto& layer : stack.layers) {
    auto sub = extract_support_subgraph(s.nodes, support_mask, stack.subgraph_nodes,
                                        stack.gather_foreground);
    linked = ssl_stage(sub, layer.ssl, ctx.trace);
    auto [qn, sn] = isi_stage(q.nodes, s.nodes, linked, layer.isi, ctx.trace);
    s = gsm_stage(FeatureGraph<T>{sn, {}, {}}, layer.gsm, layer.k_layer, ctx);
    q = gsm_stage(FeatureGraph<T>{qn, {}, {}}, layer.gsm, layer.k_layer, ctx);
    if (ctx.trace) {
      ctx.trace->layer_support_nodes.push_back(s.nodes.detached());
      ctx.trace->layer_query_nodes.push_back(q.nodes.detached());
      ctx.trace->layer_k.push_back(layer.k_layer);
    }
  }
  return {s, q, linked};
}

}  // namespace cgraph
