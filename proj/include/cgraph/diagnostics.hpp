#pragma once

// Offline graph inspection: PCA node coloring, plain-text graph exports
// (nodes with spatial coordinates and principal components, edges with
// cosine weights), and subgraph compactness statistics.

#include <fstream>
#include <string>
#include <vector>

#include "cgraph/graph.hpp"
#include "cgraph/serialize.hpp"
#include "cgraph/spg.hpp"

namespace cgraph {

struct StatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Principal components by power iteration with deflation on the column
// covariance (tolerance 1e-8, deterministic start). Components whose
// eigenvalue collapses to zero are padded with zero coordinates; each
// component's sign is fixed so its largest-magnitude coefficient is
// positive.
template <class T>
Tensor<T> pca_project(const Tensor<T>& nodes, int dims) {
  if (nodes.rank() != 2) throw DimError("pca_project expects CxM nodes");
  const int c = nodes.dim(0), m = nodes.dim(1);
  if (dims < 1 || dims > std::min(c, m))
    throw ArgError("pca_project: dims=" + std::to_string(dims) + " outside [1, min(C, M)]");

  // Center columns.
  std::vector<double> centered(static_cast<std::size_t>(c) * m);
  for (int i = 0; i < c; ++i) {
    double mean = 0;
    for (int j = 0; j < m; ++j) mean += static_cast<double>(nodes.at(i * m + j));
    mean /= m;
    for (int j = 0; j < m; ++j)
      centered[static_cast<std::size_t>(i) * m + j] = static_cast<double>(nodes.at(i * m + j)) - mean;
  }
  // Covariance C x C.
  std::vector<double> cov(static_cast<std::size_t>(c) * c, 0.0);
  detail::gemm_nt(c, m, c, centered.data(), centered.data(), cov.data());
  const double denom = m > 1 ? m - 1 : 1;
  for (auto& v : cov) v /= denom;

  std::vector<std::vector<double>> components;
  std::vector<double> out(static_cast<std::size_t>(dims) * m, 0.0);
  for (int d = 0; d < dims; ++d) {
    // Deterministic pseudo-random start, then deflated power iteration.
    std::vector<double> v(static_cast<std::size_t>(c));
    Rng rng(mix_seed(0xC0FFEEu, static_cast<std::uint64_t>(d)));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    for (const auto& prev : components) {
      double dot = 0;
      for (int i = 0; i < c; ++i) dot += v[static_cast<std::size_t>(i)] * prev[static_cast<std::size_t>(i)];
      for (int i = 0; i < c; ++i) v[static_cast<std::size_t>(i)] -= dot * prev[static_cast<std::size_t>(i)];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;

    double eig = 0;
    for (int it = 0; it < 1000; ++it) {
      std::vector<double> w(static_cast<std::size_t>(c), 0.0);
      for (int i = 0; i < c; ++i) {
        double acc = 0;
        for (int j = 0; j < c; ++j) acc += cov[static_cast<std::size_t>(i) * c + j] * v[static_cast<std::size_t>(j)];
        w[static_cast<std::size_t>(i)] = acc;
      }
      for (const auto& prev : components) {
        double dot = 0;
        for (int i = 0; i < c; ++i) dot += w[static_cast<std::size_t>(i)] * prev[static_cast<std::size_t>(i)];
        for (int i = 0; i < c; ++i) w[static_cast<std::size_t>(i)] -= dot * prev[static_cast<std::size_t>(i)];
      }
      double wn = 0;
      for (double x : w) wn += x * x;
      wn = std::sqrt(wn);
      if (wn < 1e-14) {
        eig = 0;
        break;
      }
      for (auto& x : w) x /= wn;
      double diff = 0;
      for (int i = 0; i < c; ++i) {
        const double dd = std::abs(std::abs(w[static_cast<std::size_t>(i)]) - std::abs(v[static_cast<std::size_t>(i)]));
        diff = std::max(diff, dd);
      }
      v = std::move(w);
      eig = wn;
      if (diff < 1e-8) break;
    }
    if (eig < 1e-12) {
      components.push_back(std::vector<double>(static_cast<std::size_t>(c), 0.0));
      continue;  // rank-deficient: remaining coordinates stay zero
    }
    // Sign convention: largest-magnitude coefficient positive.
    int arg = 0;
    for (int i = 1; i < c; ++i)
      if (std::abs(v[static_cast<std::size_t>(i)]) > std::abs(v[static_cast<std::size_t>(arg)])) arg = i;
    if (v[static_cast<std::size_t>(arg)] < 0)
      for (auto& x : v) x = -x;
    for (int j = 0; j < m; ++j) {
      double acc = 0;
      for (int i = 0; i < c; ++i) acc += v[static_cast<std::size_t>(i)] * centered[static_cast<std::size_t>(i) * m + j];
      out[static_cast<std::size_t>(d) * m + j] = acc;
    }
    components.push_back(std::move(v));
  }
  std::vector<T> outT(out.begin(), out.end());
  return Tensor<T>::from({dims, m}, std::move(outT));
}

// Plain-text graph export for one layer: `NODE idx h w label pc1 pc2 pc3`
// then `EDGE src dst weight`, ordered by node index and target index.
// Indices and coordinates are 0-based.
template <class T>
void export_graph(const FeatureGraph<T>& graph, const Mask& gt_resized, int layer_index,
                  const std::string& path) {
  if (!graph.edge_cache || !graph.adjacency)
    throw ContractError("export_graph: graph is missing edges or adjacency");
  const int h = graph.height(), w = graph.width(), m = h * w;
  if (gt_resized.h != h || gt_resized.w != w)
    throw DimError("export_graph: ground truth resolution mismatch");
  auto pcs = pca_project(graph.flat_nodes().detached(), 3);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# layer " << layer_index << " nodes " << m << " k " << graph.adjacency->k << "\n";
  for (int i = 0; i < m; ++i) {
    os << "NODE " << i << ' ' << i / w << ' ' << i % w << ' '
       << static_cast<int>(gt_resized.v[static_cast<std::size_t>(i)]);
    for (int d = 0; d < 3; ++d) os << ' ' << detail::fmt_g9(static_cast<double>(pcs.at(d * m + i)));
    os << '\n';
  }
  const auto& edges = *graph.edge_cache;
  const auto& adj = *graph.adjacency;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (adj.at(i, j))
        os << "EDGE " << i << ' ' << j << ' '
           << detail::fmt_g9(static_cast<double>(edges.at(i * m + j))) << '\n';
  if (!os) throw IoError("write failed: " + path);
}

struct CompactnessReport {
  double intra = 0;  // mean cosine within a class
  double inter = 0;  // mean cosine across classes
  double gap = 0;
};

// Mean intra-class vs inter-class cosine similarity of the node vectors
// under the resized ground truth partition.
template <class T>
CompactnessReport subgraph_stats(const FeatureGraph<T>& graph, const Mask& gt_resized) {
  const int h = graph.height(), w = graph.width(), m = h * w;
  if (gt_resized.h != h || gt_resized.w != w)
    throw DimError("subgraph_stats: ground truth resolution mismatch");
  const int fg = gt_resized.count();
  if (fg == 0 || fg == m)
    throw StatError("subgraph_stats: both classes must be present in the mask");
  auto edges = graph.edge_cache ? graph.edge_cache->detached()
                                : cosine_edges(graph.flat_nodes().detached());
  double intra = 0, inter = 0;
  long n_intra = 0, n_inter = 0;
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      const double e = static_cast<double>(edges.at(i * m + j));
      if (gt_resized.v[static_cast<std::size_t>(i)] == gt_resized.v[static_cast<std::size_t>(j)]) {
        intra += e;
        ++n_intra;
      } else {
        inter += e;
        ++n_inter;
      }
    }
  }
  CompactnessReport r;
  r.intra = n_intra ? intra / n_intra : 0.0;
  r.inter = n_inter ? inter / n_inter : 0.0;
  r.gap = r.intra - r.inter;
  return r;
}

// Band of positions within `radius` (Chebyshev) of the mask boundary:
// dilation minus erosion.
inline Mask boundary_band(const Mask& m, int radius) {
  Mask out = Mask::zeros(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      bool any = false, all = true;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int yy = y + dy, xx = x + dx;
          const bool v = yy >= 0 && yy < m.h && xx >= 0 && xx < m.w && m.at(yy, xx) != 0;
          any = any || v;
          all = all && v;
        }
      out.at(y, x) = (any && !all) ? 1 : 0;
    }
  return out;
}

}  // namespace cgraph
