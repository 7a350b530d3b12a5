#pragma once

// The assembled model: shared encoder, learnable positional encoding, SPG
// stack, and SMD head, with deterministic scaled-uniform initialization and
// a visitor over every learnable tensor (the basis for optimization,
// serialization and gradient checking).

#include <string>
#include <utility>
#include <vector>

#include "cgraph/episode.hpp"
#include "cgraph/graph.hpp"
#include "cgraph/rng.hpp"
#include "cgraph/smd.hpp"
#include "cgraph/spg.hpp"

namespace cgraph {

struct ModelConfig {
  int image_size = 64;
  int patch = 4;          // P
  int channels = 64;      // C
  int subgraph_nodes = 64;  // N
  int depth = 3;          // l
  int k = 9;
  // Support subgraph extraction variant: pool only the foreground node
  // columns rather than the zero-masked full map. Position-independent
  // subgraph slots are what lets the matching head generalize to classes in
  // unseen canvas regions; the masked-pool variant sits behind the same
  // switch.
  bool gather_foreground = true;

  int feat_size() const { return image_size / patch; }
};

template <class T>
struct ModelParams {
  EncoderParams<T> enc;
  std::vector<SPGLayerParams<T>> layers;
  SMDParams<T> smd;
};

// ---------------------------------------------------------------------------
// Visitor: every learnable tensor, fixed order, stable names
// ---------------------------------------------------------------------------

template <class T, class F>
void visit_params(ModelParams<T>& p, F&& f) {
  f("enc.patch_proj", p.enc.patch_proj);
  f("enc.patch_bias", p.enc.patch_bias);
  int bi = 1;
  for (auto* blk : {&p.enc.block1, &p.enc.block2}) {
    const std::string pre = "enc.block" + std::to_string(bi++) + ".";
    f(pre + "ln_gain", blk->ln_gain);
    f(pre + "ln_bias", blk->ln_bias);
    f(pre + "w1", blk->w1);
    f(pre + "w2", blk->w2);
  }
  f("enc.pos", p.enc.pos);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string pre = "spg." + std::to_string(i) + ".";
    auto& l = p.layers[i];
    for (auto [tag, tr] : {std::pair<const char*, TransformerParams<T>*>{"ssl.", &l.ssl},
                           {"isi.", &l.isi}}) {
      f(pre + tag + "wq", tr->wq);
      f(pre + tag + "wk", tr->wk);
      f(pre + tag + "wv", tr->wv);
      f(pre + tag + "wo", tr->wo);
      f(pre + tag + "ffn1", tr->ffn1);
      f(pre + tag + "ffn2", tr->ffn2);
      f(pre + tag + "ln1_gain", tr->ln1_gain);
      f(pre + tag + "ln1_bias", tr->ln1_bias);
      f(pre + tag + "ln2_gain", tr->ln2_gain);
      f(pre + tag + "ln2_bias", tr->ln2_bias);
    }
    f(pre + "gsm.w_phi", l.gsm.w_phi);
    f(pre + "gsm.ln_gain", l.gsm.ln_gain);
    f(pre + "gsm.ln_bias", l.gsm.ln_bias);
  }
  f("smd.w_s", p.smd.w_s);
  f("smd.w_q", p.smd.w_q);
  f("smd.w_a", p.smd.w_a);
  f("smd.fuse_w", p.smd.fuse_w);
  f("smd.fuse_b", p.smd.fuse_b);
  bi = 1;
  for (auto* blk : {&p.smd.block1, &p.smd.block2}) {
    const std::string pre = "smd.block" + std::to_string(bi++) + ".";
    f(pre + "conv1_w", blk->conv1_w);
    f(pre + "conv1_b", blk->conv1_b);
    f(pre + "ln_gain", blk->ln_gain);
    f(pre + "ln_bias", blk->ln_bias);
    f(pre + "conv2_w", blk->conv2_w);
    f(pre + "conv2_b", blk->conv2_b);
  }
  f("smd.head_w", p.smd.head_w);
  f("smd.head_b", p.smd.head_b);
}

template <class T>
std::vector<std::string> param_names(const ModelParams<T>& p) {
  std::vector<std::string> names;
  visit_params(const_cast<ModelParams<T>&>(p),
               [&](const std::string& n, Tensor<T>&) { names.push_back(n); });
  return names;
}

template <class T>
int param_count(const ModelParams<T>& p) {
  int total = 0;
  visit_params(const_cast<ModelParams<T>&>(p),
               [&](const std::string&, Tensor<T>& t) { total += t.size(); });
  return total;
}

// ---------------------------------------------------------------------------
// Initialization: scaled-uniform fan-in for projections, identity affines,
// zero biases and zero positional encoding
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
Tensor<T> uniform_fanin(Shape shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> d(static_cast<std::size_t>(numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(d));
}

template <class T>
TransformerParams<T> init_transformer(int c, Rng& rng) {
  TransformerParams<T> t;
  t.wq = uniform_fanin<T>({c, c}, c, rng);
  t.wk = uniform_fanin<T>({c, c}, c, rng);
  t.wv = uniform_fanin<T>({c, c}, c, rng);
  t.wo = uniform_fanin<T>({c, c}, c, rng);
  t.ffn1 = uniform_fanin<T>({2 * c, c}, c, rng);
  t.ffn2 = uniform_fanin<T>({c, 2 * c}, 2 * c, rng);
  t.ln1_gain = Tensor<T>::full({c}, T(1));
  t.ln1_bias = Tensor<T>::zeros({c});
  t.ln2_gain = Tensor<T>::full({c}, T(1));
  t.ln2_bias = Tensor<T>::zeros({c});
  return t;
}

template <class T>
ResidualBlockParams<T> init_resblock(int c, Rng& rng) {
  ResidualBlockParams<T> b;
  b.conv1_w = uniform_fanin<T>({c, c, 3, 3}, 9 * c, rng);
  b.conv1_b = Tensor<T>::zeros({c});
  b.ln_gain = Tensor<T>::full({c}, T(1));
  b.ln_bias = Tensor<T>::zeros({c});
  b.conv2_w = uniform_fanin<T>({c, c, 3, 3}, 9 * c, rng);
  b.conv2_b = Tensor<T>::zeros({c});
  return b;
}

}  // namespace detail

template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x1417));
  const int c = cfg.channels;
  const int p = cfg.patch;
  const int fs = cfg.feat_size();
  ModelParams<T> mp;
  mp.enc.patch = p;
  mp.enc.patch_proj = detail::uniform_fanin<T>({c, 3 * p * p}, 3 * p * p, rng);
  mp.enc.patch_bias = Tensor<T>::zeros({c});
  for (auto* blk : {&mp.enc.block1, &mp.enc.block2}) {
    blk->ln_gain = Tensor<T>::full({c}, T(1));
    blk->ln_bias = Tensor<T>::zeros({c});
    blk->w1 = detail::uniform_fanin<T>({c, c}, c, rng);
    blk->w2 = detail::uniform_fanin<T>({c, c}, c, rng);
  }
  mp.enc.pos = Tensor<T>::zeros({c, fs, fs});

  const auto ks = k_schedule(cfg.depth, cfg.k);
  for (int i = 0; i < cfg.depth; ++i) {
    SPGLayerParams<T> layer;
    layer.ssl = detail::init_transformer<T>(c, rng);
    layer.isi = detail::init_transformer<T>(c, rng);
    layer.gsm.w_phi = detail::uniform_fanin<T>({c, 2 * c}, 2 * c, rng);
    layer.gsm.ln_gain = Tensor<T>::full({c}, T(1));
    layer.gsm.ln_bias = Tensor<T>::zeros({c});
    layer.k_layer = ks[static_cast<std::size_t>(i)];
    mp.layers.push_back(std::move(layer));
  }

  const int n = cfg.subgraph_nodes;
  mp.smd.w_s = detail::uniform_fanin<T>({c, c}, c, rng);
  mp.smd.w_q = detail::uniform_fanin<T>({c, c}, c, rng);
  mp.smd.w_a = detail::uniform_fanin<T>({c, c}, c, rng);
  mp.smd.fuse_w = detail::uniform_fanin<T>({c, n + c}, n + c, rng);
  mp.smd.fuse_b = Tensor<T>::zeros({c});
  mp.smd.block1 = detail::init_resblock<T>(c, rng);
  mp.smd.block2 = detail::init_resblock<T>(c, rng);
  mp.smd.head_w = detail::uniform_fanin<T>({1, c}, c, rng);
  mp.smd.head_b = Tensor<T>::zeros({1});
  return mp;
}

// Fresh leaves on `tape` for every parameter.
template <class T>
ModelParams<T> watch_params(Tape<T>& tape, const ModelParams<T>& p) {
  ModelParams<T> out = p;
  visit_params(out, [&](const std::string&, Tensor<T>& t) { t = tape.watch(t); });
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <class T>
struct ForwardOut {
  Prediction<T> pred;
  FeatureGraph<T> support_out;
  FeatureGraph<T> query_out;
  Tensor<T> linked;  // last layer's linked subgraph, C x N
};

// Single-support forward through encoder, SPG stack and SMD.
template <class T>
ForwardOut<T> forward_full(const ModelParams<T>& mp, const ModelConfig& cfg,
                           const Tensor<T>& support_image, const Mask& support_mask,
                           const Tensor<T>& query_image, ForwardCtx<T> ctx = {}) {
  auto vs = add_positional(encode_image(support_image, mp.enc), mp.enc.pos);
  auto vq = add_positional(encode_image(query_image, mp.enc), mp.enc.pos);
  SPGStack<T> stack{mp.layers, cfg.subgraph_nodes, cfg.gather_foreground};
  auto spg = spg_forward(FeatureGraph<T>{vs, {}, {}}, FeatureGraph<T>{vq, {}, {}},
                         support_mask, stack, ctx);
  auto [vs_proj, vq_proj] = project_shared(spg.linked_subgraph, spg.query.nodes, mp.smd);
  auto vs_o = channel_self_update(vs_proj, mp.smd.w_a);
  auto phi = connectivity_map(vq_proj, vs_o, cfg.feat_size(), cfg.feat_size());
  auto pred = decode_prediction(phi, spg.query.nodes, mp.smd, cfg.image_size, cfg.image_size);
  return ForwardOut<T>{std::move(pred), std::move(spg.support), std::move(spg.query),
                       std::move(spg.linked_subgraph)};
}

// K-shot inference: each support runs the stack against the query; the
// channel-updated subgraphs are averaged for matching, and the decode path
// reuses the first run's query graph.
template <class T>
ForwardOut<T> forward_kshot(const ModelParams<T>& mp, const ModelConfig& cfg,
                            const Episode<T>& ep, ForwardCtx<T> ctx = {}) {
  if (ep.support.empty()) throw ArgError("forward_kshot: episode without support pairs");
  auto vq = add_positional(encode_image(ep.query_image, mp.enc), mp.enc.pos);
  SPGStack<T> stack{mp.layers, cfg.subgraph_nodes, cfg.gather_foreground};

  std::vector<Tensor<T>> updated;
  FeatureGraph<T> query_out, support_out;
  for (std::size_t s = 0; s < ep.support.size(); ++s) {
    auto vs = add_positional(encode_image(ep.support[s].first, mp.enc), mp.enc.pos);
    auto spg = spg_forward(FeatureGraph<T>{vs, {}, {}}, FeatureGraph<T>{vq, {}, {}},
                           ep.support[s].second, stack, ctx);
    auto [vs_proj, vq_proj] = project_shared(spg.linked_subgraph, spg.query.nodes, mp.smd);
    updated.push_back(channel_self_update(vs_proj, mp.smd.w_a));
    if (s == 0) {
      query_out = spg.query;
      support_out = spg.support;
    }
  }
  auto vs_o = aggregate_kshot(updated);
  const int c = cfg.channels, hw = cfg.feat_size() * cfg.feat_size();
  auto vq_proj = matmul(transpose(query_out.nodes.reshaped({c, hw})), mp.smd.w_q);
  auto phi = connectivity_map(vq_proj, vs_o, cfg.feat_size(), cfg.feat_size());
  auto pred = decode_prediction(phi, query_out.nodes, mp.smd, cfg.image_size, cfg.image_size);
  Tensor<T> linked;  // not meaningful across shots
  return ForwardOut<T>{std::move(pred), std::move(support_out), std::move(query_out), linked};
}

// Prototypical ablation path: same node construction, prototype matching
// head instead of SPG+SMD.
template <class T>
Prediction<T> forward_proto(const ModelParams<T>& mp, const ModelConfig& cfg,
                            const Tensor<T>& support_image, const Mask& support_mask,
                            const Tensor<T>& query_image) {
  auto vs = add_positional(encode_image(support_image, mp.enc), mp.enc.pos);
  auto vq = add_positional(encode_image(query_image, mp.enc), mp.enc.pos);
  return prototypical_baseline(vs, support_mask, vq, cfg.image_size, cfg.image_size);
}

template <class T>
Prediction<T> forward_proto_kshot(const ModelParams<T>& mp, const ModelConfig& cfg,
                                  const Episode<T>& ep) {
  std::vector<Tensor<T>> nodes;
  std::vector<Mask> masks;
  for (const auto& [img, mask] : ep.support) {
    nodes.push_back(add_positional(encode_image(img, mp.enc), mp.enc.pos));
    masks.push_back(mask);
  }
  auto vq = add_positional(encode_image(ep.query_image, mp.enc), mp.enc.pos);
  return prototypical_baseline_kshot(nodes, masks, vq, cfg.image_size, cfg.image_size);
}

}  // namespace cgraph
