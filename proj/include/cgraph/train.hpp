#pragma once

// Episodic training and evaluation: BCE segmentation loss at feature
// resolution, weighted CNC objective, Adam loop with stepwise LR decay and
// deterministic episode seeding, and Dice evaluation at image resolution.

#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <thread>
#include <vector>

#include "cgraph/cnc.hpp"
#include "cgraph/model.hpp"
#include "cgraph/optim.hpp"
#include "cgraph/synth.hpp"

namespace cgraph {

// Mean binary cross-entropy between the foreground map and the resized
// ground truth (the background term enters as 1 - fg against 1 - y).
template <class T>
Tensor<T> seg_loss(const Tensor<T>& fg, const Mask& gt_resized) {
  if (fg.dim(0) != gt_resized.h || fg.dim(1) != gt_resized.w)
    throw DimError("seg_loss: prediction/ground-truth resolution mismatch");
  auto y = mask_to_tensor<T>(gt_resized);
  auto one = Tensor<T>::full(fg.shape(), T(1));
  auto y_bg = sub(one, y);
  auto term = add(mul(y, log_clamped(fg)), mul(y_bg, log_clamped(sub(one, fg))));
  return neg(reduce_mean(term));
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& seg, const Tensor<T>& cnc, T alpha) {
  if (alpha < T(0)) throw ArgError("total_loss: alpha must be non-negative");
  return add(seg, scale(cnc, alpha));
}

// Full training objective for one episode (single support pair): forward,
// segmentation loss, and (when alpha > 0) the CNC term computed from the
// final query graph. The entropy selection reads a detached prediction, so
// the mask acts as a constant.
template <class T>
struct EpisodeLoss {
  Tensor<T> seg, cnc, total;
  ForwardOut<T> out;
  Mask gt_resized;
};

template <class T>
EpisodeLoss<T> episode_loss(const ModelParams<T>& mp, const ModelConfig& cfg,
                            const CNCConfig<T>& cnc_cfg, const Episode<T>& ep,
                            ForwardCtx<T> ctx = {}) {
  const int fs = cfg.feat_size();
  Mask gt = resize_mask(ep.query_mask, fs, fs);
  if (gt.count() == 0) throw EpisodeSkip("query mask empty at feature resolution");
  auto out = forward_full(mp, cfg, ep.support[0].first, ep.support[0].second,
                          ep.query_image, ctx);
  auto seg = seg_loss(out.pred.fg, gt);
  Tensor<T> cnc = Tensor<T>::scalar(T(0));
  if (cnc_cfg.alpha > T(0)) {
    auto entropy = entropy_map(out.pred.fg.detached());
    auto selection = select_confused(entropy, gt, out.query_out.nodes, cnc_cfg.delta, ctx.sel);
    auto center = semantic_center(out.query_out.nodes, gt);
    cnc = cnc_loss(selection, center, cnc_cfg.tau);
  }
  auto total = total_loss(seg, cnc, cnc_cfg.alpha);
  return EpisodeLoss<T>{seg, cnc, total, std::move(out), std::move(gt)};
}

// Prototypical-baseline objective under the identical protocol (encoder and
// positional encoding are the only parameters that matter; no CNC).
template <class T>
EpisodeLoss<T> episode_loss_proto(const ModelParams<T>& mp, const ModelConfig& cfg,
                                  const Episode<T>& ep) {
  const int fs = cfg.feat_size();
  Mask gt = resize_mask(ep.query_mask, fs, fs);
  if (gt.count() == 0) throw EpisodeSkip("query mask empty at feature resolution");
  auto pred = forward_proto(mp, cfg, ep.support[0].first, ep.support[0].second, ep.query_image);
  auto seg = seg_loss(pred.fg, gt);
  EpisodeLoss<T> el;
  el.seg = seg;
  el.cnc = Tensor<T>::scalar(T(0));
  el.total = seg;
  el.out.pred = std::move(pred);
  el.gt_resized = std::move(gt);
  return el;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum class ModelVariant { CGraph, Proto };

template <class T>
struct TrainConfig {
  ModelConfig model;
  CNCConfig<T> cnc;
  ModelVariant variant = ModelVariant::CGraph;
  T lr = T(1e-3);
  T lr_decay = T(0.95);
  int lr_decay_every = 1000;
  long iterations = 2000;
  std::uint64_t seed = 0;
};

struct MetricsRecord {
  long iter = 0;
  double seg = 0, cnc = 0, total = 0, lr = 0;
};

template <class T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<MetricsRecord> metrics;
  Episode<T> last_episode;
};

// Sequential episodic training. The sampler is a pure function of the
// sub-seed; episode skips advance the draw counter, so resampling stays
// deterministic. Aborts with the iteration index on a non-finite loss.
template <class T>
TrainResult<T> train_loop(const TrainConfig<T>& cfg,
                          const std::function<Episode<T>(std::uint64_t)>& sampler) {
  ModelParams<T> params = init_params<T>(cfg.model, cfg.seed);
  OptimizerState<T> opt;
  opt.lr_base = cfg.lr;
  opt.decay = cfg.lr_decay;
  opt.decay_every = cfg.lr_decay_every;

  TrainResult<T> result;
  result.metrics.reserve(static_cast<std::size_t>(cfg.iterations));
  std::uint64_t draw = 0;

  for (long iter = 0; iter < cfg.iterations; ++iter) {
    const double lr_now = static_cast<double>(opt.current_lr());
    // Draw until an episode survives the feature-resolution preconditions.
    Episode<T> ep;
    EpisodeLoss<T> el;
    auto tape = std::make_unique<Tape<T>>();
    ModelParams<T> bound;
    bool have = false;
    for (int attempt = 0; attempt < 64 && !have; ++attempt) {
      ep = sampler(mix_seed(cfg.seed, draw++));
      try {
        bound = watch_params(*tape, params);
        el = cfg.variant == ModelVariant::CGraph
                 ? episode_loss(bound, cfg.model, cfg.cnc, ep)
                 : episode_loss_proto(bound, cfg.model, ep);
        have = true;
      } catch (const EpisodeSkip&) {
        el = EpisodeLoss<T>();
        bound = ModelParams<T>();
        tape = std::make_unique<Tape<T>>();  // drop the partial recording, resample
      }
    }
    if (!have) throw TrainingError("train_loop: episode retry budget exhausted at iteration " +
                                   std::to_string(iter));
    const double total_v = static_cast<double>(el.total.item());
    if (!std::isfinite(total_v))
      throw TrainingError("train_loop: non-finite loss at iteration " + std::to_string(iter));
    tape->backward(el.total);

    std::vector<Tensor<T>> cur, grads;
    std::vector<std::string> names;
    visit_params(bound, [&](const std::string& n, Tensor<T>& t) {
      names.push_back(n);
      cur.push_back(t.detached());
      grads.push_back(tape->grad(t));
    });
    auto updated = adam_step(cur, grads, opt, names);
    std::size_t idx = 0;
    visit_params(params, [&](const std::string&, Tensor<T>& t) { t = updated[idx++]; });

    result.metrics.push_back(MetricsRecord{iter, static_cast<double>(el.seg.item()),
                                           static_cast<double>(el.cnc.item()), total_v, lr_now});
    if (iter + 1 == cfg.iterations) result.last_episode = ep;
  }
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Episode drawing for evaluation: retries sub-seeds until the query and
// every support mask survive resizing to the feature grid, so inference
// never trips an episode-skip.
template <class T>
Episode<T> sample_valid_episode(const SynthConfig& synth, int domain_id, int class_id, int shots,
                                std::uint64_t seed, int feat_h, int feat_w) {
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    auto ep = sample_episode<T>(synth, domain_id, class_id, shots, mix_seed(seed, attempt));
    bool ok = resize_mask(ep.query_mask, feat_h, feat_w).count() > 0;
    for (const auto& [img, mask] : ep.support)
      ok = ok && resize_mask(mask, feat_h, feat_w).count() > 0;
    if (ok) return ep;
  }
  throw SamplingError("sample_valid_episode: retry budget exhausted for seed " +
                      std::to_string(seed));
}

// Dice Sorensen coefficient as a percentage; two empty masks count as a
// perfect match.
inline double evaluate_dsc(const Mask& pred, const Mask& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw ArgError("evaluate_dsc: mask shapes differ");
  long inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    a += pred.v[i] != 0;
    b += gt.v[i] != 0;
    inter += (pred.v[i] != 0 && gt.v[i] != 0);
  }
  if (a + b == 0) return 100.0;
  return 200.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

struct EvalRow {
  int episode = 0;
  int class_id = 0;
  int domain_id = 0;
  double dsc = 0;
};

struct EvalSummary {
  std::vector<EvalRow> rows;
  std::map<int, double> per_class_mean;
  double mean = 0;
};

// Inference over a fixed episode list (no gradients, no CNC). Episodes may
// be evaluated concurrently; rows are reduced in episode-index order so the
// aggregation is deterministic.
template <class T>
EvalSummary evaluate_suite(const ModelParams<T>& params, const ModelConfig& cfg,
                           const std::vector<Episode<T>>& episodes, bool baseline = false,
                           int threads = 1) {
  if (episodes.empty()) throw ArgError("evaluate_suite: no episodes requested");
  std::vector<EvalRow> rows(episodes.size());
  auto run_one = [&](std::size_t i) {
    const auto& ep = episodes[i];
    Mask pred;
    if (baseline) {
      pred = ep.support.size() == 1
                 ? forward_proto(params, cfg, ep.support[0].first, ep.support[0].second,
                                 ep.query_image).binary
                 : forward_proto_kshot(params, cfg, ep).binary;
    } else if (ep.support.size() == 1) {
      pred = forward_full(params, cfg, ep.support[0].first, ep.support[0].second,
                          ep.query_image).pred.binary;
    } else {
      pred = forward_kshot(params, cfg, ep).pred.binary;
    }
    rows[i] = EvalRow{static_cast<int>(i), ep.class_id, ep.domain_id,
                      evaluate_dsc(pred, ep.query_mask)};
  };

  threads = std::max(1, threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < episodes.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&]() {
        for (std::size_t i = next.fetch_add(1); i < episodes.size(); i = next.fetch_add(1))
          run_one(i);
      });
    for (auto& th : pool) th.join();
  }

  EvalSummary summary;
  summary.rows = std::move(rows);
  std::map<int, std::pair<double, int>> acc;
  double total = 0;
  for (const auto& r : summary.rows) {
    acc[r.class_id].first += r.dsc;
    acc[r.class_id].second += 1;
    total += r.dsc;
  }
  for (const auto& [cls, pr] : acc) summary.per_class_mean[cls] = pr.first / pr.second;
  summary.mean = total / static_cast<double>(summary.rows.size());
  return summary;
}

}  // namespace cgraph
