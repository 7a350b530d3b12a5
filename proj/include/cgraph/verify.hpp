#pragma once

// The gradcheck entry point: every differentiable primitive plus composite
// checks through the encoder, the SPG stack, the SMD head, and the full
// training objective on a toy episode with frozen selections.

#include <string>
#include <vector>

#include "cgraph/gradcheck.hpp"
#include "cgraph/train.hpp"

namespace cgraph {

struct CheckReport {
  std::string name;
  double max_rel_err = 0;
  bool pass = false;
};

// Tiny deterministic episode (16x16 image, patch 4 -> 4x4 features) with
// rectangular masks; pairs with toy_model_config().
template <class T>
Episode<T> toy_episode(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x70e0));
  auto rand_img = [&]() {
    std::vector<T> d(static_cast<std::size_t>(3) * 16 * 16);
    for (auto& v : d) v = static_cast<T>(rng.uniform());
    return Tensor<T>::from({3, 16, 16}, std::move(d));
  };
  Mask ms = Mask::zeros(16, 16), mq = Mask::zeros(16, 16);
  for (int y = 3; y < 11; ++y)
    for (int x = 4; x < 12; ++x) ms.at(y, x) = 1;
  for (int y = 5; y < 13; ++y)
    for (int x = 2; x < 10; ++x) mq.at(y, x) = 1;
  Episode<T> ep;
  ep.support.push_back({rand_img(), ms});
  ep.query_image = rand_img();
  ep.query_mask = mq;
  ep.class_id = 1;
  ep.seed = seed;
  return ep;
}

inline ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch = 4;
  cfg.channels = 8;
  cfg.subgraph_nodes = 8;
  cfg.depth = 3;
  cfg.k = 3;  // schedule (3, 5, 6), all under HW-1 = 15
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameter flattening (for whole-model finite differences)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> flatten_params(const ModelParams<T>& p) {
  std::vector<T> flat;
  visit_params(const_cast<ModelParams<T>&>(p), [&](const std::string&, Tensor<T>& t) {
    auto d = t.data();
    flat.insert(flat.end(), d.begin(), d.end());
  });
  const int n = static_cast<int>(flat.size());
  return Tensor<T>::from({n}, std::move(flat));
}

// Rebuild a params struct whose tensors are slices of `x` (differentiable).
template <class T>
ModelParams<T> unflatten_params(const ModelParams<T>& like, const Tensor<T>& x) {
  ModelParams<T> mp = like;
  int off = 0;
  visit_params(mp, [&](const std::string&, Tensor<T>& t) {
    Shape s = t.shape();
    const int n = numel(s);
    t = slice_flat(x, off, std::move(s));
    off += n;
  });
  if (off != x.size()) throw ContractError("unflatten_params: size mismatch");
  return mp;
}

// ---------------------------------------------------------------------------
// Composite checks
// ---------------------------------------------------------------------------

// Gradient of the full objective (SPG stack + SMD + BCE + CNC) w.r.t. every
// parameter, against central differences with the non-differentiable
// selections recorded once and replayed across perturbations.
inline double composite_loss_gradcheck(std::uint64_t seed) {
  const ModelConfig cfg = toy_model_config();
  const CNCConfig<double> cnc;
  auto params = init_params<double>(cfg, seed);
  auto ep = toy_episode<double>(seed);

  SelectionCache sel;
  {
    ForwardCtx<double> ctx{nullptr, &sel};
    episode_loss(params, cfg, cnc, ep, ctx);
  }
  sel.replay = true;

  auto x0 = flatten_params(params);
  auto f = [&](Tape<double>&, const Tensor<double>& x) {
    sel.rewind();
    ForwardCtx<double> ctx{nullptr, &sel};
    return episode_loss(unflatten_params(params, x), cfg, cnc, ep, ctx).total;
  };
  return finite_diff_gradcheck<double>(f, x0);
}

inline double encoder_gradcheck(std::uint64_t seed) {
  ModelConfig cfg5;
  cfg5.image_size = 8;
  cfg5.patch = 4;
  cfg5.channels = 8;
  auto params = init_params<double>(cfg5, seed);
  Rng rng(seed);
  std::vector<double> img(3 * 8 * 8);
  for (auto& v : img) v = rng.uniform();
  auto image = Tensor<double>::from({3, 8, 8}, std::move(img));

  // Differentiate w.r.t. the image through the whole encoder.
  auto f_img = [&](Tape<double>&, const Tensor<double>& x) {
    auto y = encode_image(x, params.enc);
    return reduce_sum(mul(y, y));
  };
  const double e1 = finite_diff_gradcheck<double>(f_img, image);

  // And w.r.t. the encoder parameters.
  auto x0 = flatten_params(params);
  auto f_par = [&](Tape<double>&, const Tensor<double>& x) {
    auto mp = unflatten_params(params, x);
    auto y = add_positional(encode_image(image, mp.enc), mp.enc.pos);
    return reduce_sum(mul(y, y));
  };
  const double e2 = finite_diff_gradcheck<double>(f_par, x0);
  return std::max(e1, e2);
}

inline double transformer_gradcheck(std::uint64_t seed) {
  Rng rng(seed);
  const int c = 8;
  ModelConfig cfg = toy_model_config();
  auto params = init_params<double>(cfg, seed);
  const auto& tp = params.layers[0].ssl;
  auto q = detail::rand_tensor({c, 5}, rng);
  auto kv = detail::rand_tensor({c, 4}, rng);
  auto f = [&](Tape<double>&, const Tensor<double>& x) {
    auto y = transformer_block(x, kv, tp);
    return reduce_sum(mul(y, y));
  };
  return finite_diff_gradcheck<double>(f, q);
}

// SPG stack on a 4x4 feature map, parameters and the node maps both probed.
inline double spg_stack_gradcheck(std::uint64_t seed) {
  const ModelConfig cfg = toy_model_config();
  auto params = init_params<double>(cfg, seed);
  auto ep = toy_episode<double>(seed);
  SPGStack<double> stack{params.layers, cfg.subgraph_nodes, false};

  Rng rng(seed);
  auto vs = detail::rand_tensor({cfg.channels, 4, 4}, rng);

  SelectionCache sel;
  auto run = [&](const Tensor<double>& support_nodes, const Tensor<double>& query_nodes,
                 SelectionCache* s) {
    ForwardCtx<double> ctx{nullptr, s};
    auto r = spg_forward(FeatureGraph<double>{support_nodes, {}, {}},
                         FeatureGraph<double>{query_nodes, {}, {}}, ep.support[0].second,
                         stack, ctx);
    return reduce_sum(add(mul(r.query.nodes, r.query.nodes),
                          mul(r.support.nodes, r.support.nodes)));
  };
  auto vq0 = detail::rand_tensor({cfg.channels, 4, 4}, rng);
  run(vs, vq0, &sel);
  sel.replay = true;
  auto f = [&](Tape<double>&, const Tensor<double>& x) {
    sel.rewind();
    return run(vs, x, &sel);
  };
  return finite_diff_gradcheck<double>(f, vq0);
}

// SMD pipeline (projection, channel update, connectivity, decoder) on 4x4
// maps, w.r.t. its parameters.
inline double smd_gradcheck(std::uint64_t seed) {
  const ModelConfig cfg = toy_model_config();
  auto params = init_params<double>(cfg, seed);
  Rng rng(seed);
  auto sub = detail::rand_tensor({cfg.channels, cfg.subgraph_nodes}, rng);
  auto qn = detail::rand_tensor({cfg.channels, 4, 4}, rng);

  std::vector<double> flat;
  std::vector<Shape> shapes;
  std::vector<Tensor<double>*> fields{&params.smd.w_s, &params.smd.w_q, &params.smd.w_a,
                                      &params.smd.fuse_w, &params.smd.fuse_b,
                                      &params.smd.block1.conv1_w, &params.smd.block1.conv1_b,
                                      &params.smd.block1.ln_gain, &params.smd.block1.ln_bias,
                                      &params.smd.block1.conv2_w, &params.smd.block1.conv2_b,
                                      &params.smd.block2.conv1_w, &params.smd.block2.conv1_b,
                                      &params.smd.block2.ln_gain, &params.smd.block2.ln_bias,
                                      &params.smd.block2.conv2_w, &params.smd.block2.conv2_b,
                                      &params.smd.head_w, &params.smd.head_b};
  for (auto* t : fields) {
    shapes.push_back(t->shape());
    auto d = t->data();
    flat.insert(flat.end(), d.begin(), d.end());
  }
  auto x0 = Tensor<double>::from({static_cast<int>(flat.size())}, flat);
  auto f = [&](Tape<double>&, const Tensor<double>& x) {
    SMDParams<double> smd = params.smd;
    std::vector<Tensor<double>*> out{&smd.w_s, &smd.w_q, &smd.w_a, &smd.fuse_w, &smd.fuse_b,
                                     &smd.block1.conv1_w, &smd.block1.conv1_b,
                                     &smd.block1.ln_gain, &smd.block1.ln_bias,
                                     &smd.block1.conv2_w, &smd.block1.conv2_b,
                                     &smd.block2.conv1_w, &smd.block2.conv1_b,
                                     &smd.block2.ln_gain, &smd.block2.ln_bias,
                                     &smd.block2.conv2_w, &smd.block2.conv2_b,
                                     &smd.head_w, &smd.head_b};
    int off = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      *out[i] = slice_flat(x, off, shapes[i]);
      off += numel(shapes[i]);
    }
    auto [vs_p, vq_p] = project_shared(sub, qn, smd);
    auto vs_o = channel_self_update(vs_p, smd.w_a);
    auto phi = connectivity_map(vq_p, vs_o, 4, 4);
    auto pred = decode_prediction(phi, qn, smd, 16, 16);
    return reduce_sum(mul(pred.fg, pred.fg));
  };
  return finite_diff_gradcheck<double>(f, x0);
}

// The full report behind the `gradcheck` command: primitives over several
// seeds, then the composite checks.
inline std::vector<CheckReport> run_gradcheck_suite(double tolerance = 1e-4, int seeds = 5) {
  std::vector<CheckReport> reports;
  for (const auto& c : primitive_gradchecks()) {
    double worst = 0;
    for (int s = 0; s < seeds; ++s) worst = std::max(worst, c.run(0x9d5u + static_cast<std::uint64_t>(s)));
    reports.push_back({c.name, worst, worst < tolerance});
  }
  auto add = [&](const std::string& name, double err) {
    reports.push_back({name, err, err < tolerance});
  };
  add("encoder", encoder_gradcheck(21));
  add("transformer_block", transformer_gradcheck(22));
  add("spg_stack", spg_stack_gradcheck(23));
  add("smd_pipeline", smd_gradcheck(24));
  add("composite_loss", composite_loss_gradcheck(25));
  return reports;
}

}  // namespace cgraph
