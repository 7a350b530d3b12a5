// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Long-running criteria reuse training runs where the
// protocols coincide; independent runs are spread over a small worker pool.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <string>
#include <thread>
#include <vector>

#include "cgraph/cgraph.hpp"

using namespace cgraph;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int idx, const std::string& name, bool pass, const std::string& detail) {
  std::printf("criterion %d [%s]: %s (%s)\n", idx, name.c_str(), pass ? "PASS" : "FAIL",
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double minutes_since(clk::time_point t0) {
  return std::chrono::duration<double>(clk::now() - t0).count() / 60.0;
}

std::string run_cli(const std::string& args, int* exit_code) {
  const std::string cmd = std::string(CGRAPH_CLI_PATH) + " " + args + " 2>&1";
  std::string output;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) {
    *exit_code = -1;
    return output;
  }
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) output += buf;
  *exit_code = WEXITSTATUS(pclose(pipe));
  return output;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------

void criterion1_gradients() {
  auto t0 = clk::now();
  auto reports = run_gradcheck_suite();
  double worst = 0;
  bool pass = true;
  for (const auto& r : reports) {
    worst = std::max(worst, r.max_rel_err);
    pass = pass && r.pass;
  }
  const double mins = minutes_since(t0);
  pass = pass && mins < 2.0;
  char detail[160];
  std::snprintf(detail, sizeof(detail), "%zu checks, max rel err %.3e, %.2f min", reports.size(),
                worst, mins);
  report(1, "gradient fidelity", pass, detail);
}

void criterion2_oracles() {
  Rng rng(0xACCE);
  long mismatches = 0;
  long instances = 0;

  // top-k adjacency vs exhaustive sort.
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(6, 24);
    const int k = rng.uniform_int(1, n - 1);
    std::vector<double> ev(static_cast<std::size_t>(n) * n);
    for (auto& x : ev) x = trial % 4 == 0 ? std::round(rng.uniform(-1, 1) * 8) / 8 : rng.uniform(-1, 1);
    auto adj = topk_adjacency(Tensor<double>::from({n, n}, ev), k);
    for (int i = 0; i < n; ++i) {
      std::vector<int> order;
      for (int j = 0; j < n; ++j)
        if (j != i) order.push_back(j);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double ea = ev[static_cast<std::size_t>(i * n + a)];
        const double eb = ev[static_cast<std::size_t>(i * n + b)];
        return ea != eb ? ea > eb : a < b;
      });
      for (int s = 0; s < n - 1; ++s) {
        const bool want = s < k;
        if (adj.at(i, order[static_cast<std::size_t>(s)]) != want) ++mismatches;
      }
      if (adj.at(i, i) != 0) ++mismatches;
    }
    ++instances;
  }

  // adaptive pooling vs bin averages.
  for (int trial = 0; trial < 1000; ++trial) {
    const int l = rng.uniform_int(1, 30);
    const int n = rng.uniform_int(1, l);
    std::vector<double> v(static_cast<std::size_t>(l));
    for (auto& x : v) x = rng.uniform(-4, 4);
    auto out = adaptive_avg_pool_1d(Tensor<double>::from({1, l}, v), n);
    for (int b = 0; b < n; ++b) {
      const int lo = (b * l) / n, hi = ((b + 1) * l + n - 1) / n;
      double acc = 0;
      for (int j = lo; j < hi; ++j) acc += v[static_cast<std::size_t>(j)];
      if (std::abs(out.at(b) - acc / (hi - lo)) > 1e-12) ++mismatches;
    }
    ++instances;
  }

  // confusion selection vs a full scan.
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = rng.uniform_int(2, 8), w = rng.uniform_int(2, 8);
    std::vector<double> fg(static_cast<std::size_t>(h) * w);
    for (auto& x : fg) x = rng.uniform(0.01, 0.99);
    Mask gt = Mask::zeros(h, w);
    for (auto& x : gt.v) x = rng.uniform() < 0.5;
    const double delta = rng.uniform(0.02, 0.69);
    auto ent = entropy_map(Tensor<double>::from({h, w}, fg));
    std::vector<double> nodes(static_cast<std::size_t>(2) * h * w);
    for (auto& x : nodes) x = rng.uniform(-1, 1);
    auto sel = select_confused(ent, gt, Tensor<double>::from({2, h, w}, nodes), delta);
    int p = 0, n = 0;
    for (int i = 0; i < h * w; ++i) {
      const double f = fg[static_cast<std::size_t>(i)];
      const double e = -(f * std::log(f) + (1 - f) * std::log(1 - f));
      if (e > delta) (gt.v[static_cast<std::size_t>(i)] ? p : n) += 1;
    }
    if (sel.p_count() != p || sel.n_count() != n) ++mismatches;
    for (int i : sel.p_idx)
      if (!gt.v[static_cast<std::size_t>(i)]) ++mismatches;
    for (int i : sel.n_idx)
      if (gt.v[static_cast<std::size_t>(i)]) ++mismatches;
    ++instances;
  }

  // Dice vs direct counting.
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = rng.uniform_int(1, 12), w = rng.uniform_int(1, 12);
    Mask a = Mask::zeros(h, w), b = Mask::zeros(h, w);
    for (auto& x : a.v) x = rng.uniform() < 0.4;
    for (auto& x : b.v) x = rng.uniform() < 0.4;
    long inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
      sa += a.v[i];
      sb += b.v[i];
      inter += a.v[i] && b.v[i];
    }
    const double want = (sa + sb) == 0 ? 100.0 : 200.0 * inter / static_cast<double>(sa + sb);
    if (std::abs(evaluate_dsc(a, b) - want) > 1e-12) ++mismatches;
    ++instances;
  }

  char detail[120];
  std::snprintf(detail, sizeof(detail), "%ld instances, %ld mismatches", instances, mismatches);
  report(2, "oracle equivalence", mismatches == 0, detail);
}

void criterion3_attention() {
  ModelConfig cfg;  // defaults: 64x64, P=4, C=64, N=64, l=3, k=9
  auto params = init_params<double>(cfg, 0x33);
  SynthConfig synth;
  auto ep = sample_valid_episode<double>(synth, 0, 1, 1, 0x33, cfg.feat_size(), cfg.feat_size());
  Trace<double> trace;
  ForwardCtx<double> ctx{&trace, nullptr};
  forward_full(params, cfg, ep.support[0].first, ep.support[0].second, ep.query_image, ctx);

  bool rows_ok = true;
  double worst = 0;
  for (const auto& a : trace.attention) {
    const int m = a.dim(0), n = a.dim(1);
    for (int i = 0; i < m; ++i) {
      double row = 0;
      for (int j = 0; j < n; ++j) row += a.at(i * n + j);
      worst = std::max(worst, std::abs(row - 1.0));
      rows_ok = rows_ok && std::abs(row - 1.0) <= 1e-6;
    }
  }

  const auto ks = k_schedule(cfg.depth, cfg.k);
  bool sched_ok = ks == std::vector<int>{9, 14, 18};
  bool adj_ok = trace.adjacencies.size() == 6;  // support + query per layer
  for (std::size_t li = 0; li < trace.adjacencies.size() && adj_ok; ++li) {
    const auto& adj = trace.adjacencies[li];
    const int want_k = ks[li / 2];
    adj_ok = adj.k == want_k;
    for (int i = 0; i < adj.n && adj_ok; ++i) {
      int ones = 0;
      for (int j = 0; j < adj.n; ++j) ones += adj.at(i, j);
      adj_ok = ones == want_k && adj.at(i, i) == 0;
    }
  }
  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "%zu attention matrices, worst row deviation %.2e; k schedule (9,14,18) %s",
                trace.attention.size(), worst, sched_ok && adj_ok ? "verified" : "violated");
  report(3, "row-stochastic attention + adjacency", rows_ok && sched_ok && adj_ok, detail);
}

void criterion4_structure_invariance() {
  const auto a = DomainStyle::builtin_a();
  const auto b = DomainStyle::builtin_b();
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto layout = generate_layout(seed, 4);
    if (render_domain(layout, a).labels != render_domain(layout, b).labels) ++violations;
  }
  char detail[80];
  std::snprintf(detail, sizeof(detail), "100 layouts x 2 styles, %d violations", violations);
  report(4, "structure invariance", violations == 0, detail);
}

void criterion5_overfit() {
  auto t0 = clk::now();
  // Finer feature grid for this scenario: the 4x-patch default quantizes
  // mask upsampling to ~93% DSC ceiling, so the overfit check runs at P=2.
  TrainConfig<double> tc;
  tc.model.image_size = 64;
  tc.model.patch = 2;
  tc.model.channels = 32;
  tc.model.subgraph_nodes = 64;
  tc.iterations = 500;
  tc.seed = 11;
  SynthConfig synth;
  // Fixed episode: first candidate whose resize->binarize->upsample ceiling
  // leaves headroom over the 95% bar (the ceiling is a property of the
  // episode geometry, independent of the model).
  Episode<double> fixed;
  for (std::uint64_t cand = 1; cand <= 24; ++cand) {
    auto ep = sample_valid_episode<double>(synth, 0, 1, 1, cand, tc.model.feat_size(),
                                           tc.model.feat_size());
    Mask rm = resize_mask(ep.query_mask, tc.model.feat_size(), tc.model.feat_size());
    Mask up = upsample_mask_nearest(rm, tc.model.image_size, tc.model.image_size);
    if (evaluate_dsc(up, ep.query_mask) >= 97.0) {
      fixed = ep;
      break;
    }
  }
  if (fixed.support.empty()) {
    report(5, "overfit capability", false, "no candidate episode with ceiling >= 97");
    return;
  }
  auto res = train_loop<double>(tc, [&](std::uint64_t) { return fixed; });
  auto pred = forward_full(res.params, tc.model, fixed.support[0].first, fixed.support[0].second,
                           fixed.query_image).pred;
  const double dsc = evaluate_dsc(pred.binary, fixed.query_mask);
  const double mins = minutes_since(t0);
  char detail[120];
  std::snprintf(detail, sizeof(detail), "query DSC %.2f after %ld iterations, %.1f min", dsc,
                tc.iterations, mins);
  report(5, "overfit capability", dsc >= 95.0 && mins < 10.0, detail);
}

struct ProtocolRun {
  TrainResult<double> result;
  double band_entropy = 0;
};

// Shared protocol for criteria 6 and 7: train on domain A classes {1,2,3}.
ProtocolRun run_protocol(std::uint64_t seed, ModelVariant variant, double alpha) {
  SynthConfig synth;
  TrainConfig<double> tc;
  tc.iterations = 2000;
  tc.seed = seed;
  tc.variant = variant;
  tc.cnc.alpha = alpha;
  auto sampler = [synth](std::uint64_t s) {
    Rng r(s);
    const int cls = 1 + static_cast<int>(r.next_u64() % 3);
    return sample_episode<double>(synth, 0, cls, 1, splitmix64(s));
  };
  ProtocolRun run;
  run.result = train_loop<double>(tc, sampler);

  if (variant == ModelVariant::CGraph) {
    // Mean entropy over the 2-pixel boundary band of the final episode's
    // resized ground truth, under the final parameters.
    const auto& ep = run.result.last_episode;
    const int fs_ = tc.model.feat_size();
    auto out = forward_full(run.result.params, tc.model, ep.support[0].first,
                            ep.support[0].second, ep.query_image);
    Mask gt = resize_mask(ep.query_mask, fs_, fs_);
    Mask band = boundary_band(gt, 2);
    auto ent = entropy_map(out.pred.fg.detached());
    double acc = 0;
    int n = 0;
    for (int i = 0; i < ent.size(); ++i)
      if (band.v[static_cast<std::size_t>(i)]) {
        acc += ent.at(i);
        ++n;
      }
    run.band_entropy = n ? acc / n : 0.0;
  }
  return run;
}

void criteria67_cross_domain() {
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  ModelConfig cfg;
  SynthConfig synth;

  // 9 independent trainings (full, alpha=0, proto per seed) over a 2-worker
  // pool; each run owns its tape and RNG stream.
  struct Job {
    std::uint64_t seed;
    ModelVariant variant;
    double alpha;
    ProtocolRun out;
  };
  std::vector<Job> jobs;
  for (auto s : seeds) {
    jobs.push_back({s, ModelVariant::CGraph, 0.01, {}});
    jobs.push_back({s, ModelVariant::CGraph, 0.0, {}});
    jobs.push_back({s, ModelVariant::Proto, 0.0, {}});
  }
  std::atomic<std::size_t> next{0};
  const unsigned workers = std::min(2u, std::max(1u, std::thread::hardware_concurrency()));
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < workers; ++t)
    pool.emplace_back([&]() {
      for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1))
        jobs[i].out = run_protocol(jobs[i].seed, jobs[i].variant, jobs[i].alpha);
    });
  for (auto& th : pool) th.join();

  // Fixed evaluation set: 50 episodes, domain B, class 4.
  std::vector<Episode<double>> eval_eps;
  for (int e = 0; e < 50; ++e)
    eval_eps.push_back(sample_valid_episode<double>(synth, 1, 4, 1,
                                                    mix_seed(0xE7A1, static_cast<std::uint64_t>(e)),
                                                    cfg.feat_size(), cfg.feat_size()));

  double full_mean = 0, proto_mean = 0;
  int cnc_wins = 0;
  std::string per_seed;
  for (auto s : seeds) {
    const Job* full = nullptr;
    const Job* a0 = nullptr;
    const Job* proto = nullptr;
    for (const auto& j : jobs) {
      if (j.seed != s) continue;
      if (j.variant == ModelVariant::Proto) proto = &j;
      else if (j.alpha > 0) full = &j;
      else a0 = &j;
    }
    const double df = evaluate_suite(full->out.result.params, cfg, eval_eps, false, 2).mean;
    const double dp = evaluate_suite(proto->out.result.params, cfg, eval_eps, true, 2).mean;
    full_mean += df / seeds.size();
    proto_mean += dp / seeds.size();
    const bool win = full->out.band_entropy < a0->out.band_entropy;
    cnc_wins += win;
    char buf[160];
    std::snprintf(buf, sizeof(buf), " [seed %llu: full %.2f proto %.2f | band H %.4f vs %.4f]",
                  static_cast<unsigned long long>(s), df, dp, full->out.band_entropy,
                  a0->out.band_entropy);
    per_seed += buf;
  }

  char d6[320];
  std::snprintf(d6, sizeof(d6), "mean DSC full %.2f vs baseline %.2f%s", full_mean, proto_mean,
                per_seed.c_str());
  report(6, "cross-domain direction", full_mean >= proto_mean, d6);

  char d7[120];
  std::snprintf(d7, sizeof(d7), "boundary-band entropy lower with CNC in %d of %zu seeds",
                cnc_wins, seeds.size());
  report(7, "CNC effect", cnc_wins >= 2, d7);
}

void criterion8_exact_identities() {
  bool ok = true;
  std::string why;

  // fg + bg == 1 exactly at every position.
  ModelConfig cfg = toy_model_config();
  auto params = init_params<double>(cfg, 0x88);
  auto ep = toy_episode<double>(0x88);
  auto out = forward_full(params, cfg, ep.support[0].first, ep.support[0].second, ep.query_image);
  for (int i = 0; i < out.pred.fg.size(); ++i)
    if (out.pred.fg.at(i) + out.pred.bg.at(i) != 1.0) {
      ok = false;
      why = "fg+bg != 1";
    }

  // gsm_stage with a zero projection is the identity.
  Rng rng(0x99);
  std::vector<double> nv(4 * 9);
  for (auto& v : nv) v = rng.uniform(-1, 1);
  auto nodes = Tensor<double>::from({4, 3, 3}, nv);
  GsmParams<double> gp;
  gp.w_phi = Tensor<double>::zeros({4, 8});
  gp.ln_gain = Tensor<double>::full({4}, 1.0);
  gp.ln_bias = Tensor<double>::zeros({4});
  auto gout = gsm_stage(FeatureGraph<double>{nodes, {}, {}}, gp, 3);
  for (int i = 0; i < nodes.size(); ++i)
    if (gout.nodes.at(i) != nodes.at(i)) {
      ok = false;
      why = "gsm identity violated";
    }

  // channel_self_update with W_a = 0 is the identity.
  auto sub = Tensor<double>::from({3, 4}, {1, -2, 3, 0.5, 0.1, -0.7, 2.5, 0, 4, 1, -1, 9});
  auto upd = channel_self_update(sub, Tensor<double>::zeros({3, 3}));
  for (int i = 0; i < sub.size(); ++i)
    if (upd.at(i) != sub.at(i)) {
      ok = false;
      why = "channel self-update identity violated";
    }

  // entropy(0.5) = ln 2 within 1e-12.
  const double h = entropy_map(Tensor<double>::full({1, 1}, 0.5)).at(0);
  if (std::abs(h - std::log(2.0)) > 1e-12) {
    ok = false;
    why = "entropy(0.5) deviates from ln 2";
  }
  report(8, "exact identities", ok, ok ? "all four identities hold" : why);
}

void criterion9_determinism() {
  const fs::path base = fs::temp_directory_path() / "cgraph_acceptance_det";
  fs::remove_all(base);
  fs::create_directories(base);
  const fs::path cfgp = base / "run.cfg";
  std::ofstream(cfgp) << "train.iterations = 30\ntrain.seed = 77\n";

  int ec1 = 0, ec2 = 0;
  run_cli("train --config " + cfgp.string() + " --out " + (base / "r1").string(), &ec1);
  run_cli("train --config " + cfgp.string() + " --out " + (base / "r2").string(), &ec2);
  const bool ran = ec1 == 0 && ec2 == 0;
  const bool metrics_same = slurp(base / "r1" / "metrics.csv") == slurp(base / "r2" / "metrics.csv");
  const bool params_same = slurp(base / "r1" / "params.bin") == slurp(base / "r2" / "params.bin");
  const bool nonempty = fs::exists(base / "r1" / "metrics.csv") &&
                        fs::file_size(base / "r1" / "metrics.csv") > 0 &&
                        fs::file_size(base / "r1" / "params.bin") > 0;
  char detail[120];
  std::snprintf(detail, sizeof(detail), "exit codes %d/%d, metrics identical %d, params identical %d",
                ec1, ec2, metrics_same, params_same);
  report(9, "run determinism", ran && metrics_same && params_same && nonempty, detail);
}

}  // namespace

int main() {
  auto t0 = clk::now();
  criterion1_gradients();
  criterion2_oracles();
  criterion3_attention();
  criterion4_structure_invariance();
  criterion5_overfit();
  criteria67_cross_domain();
  criterion8_exact_identities();
  criterion9_determinism();
  std::printf("acceptance finished in %.1f min: %s\n", minutes_since(t0),
              g_failures == 0 ? "ALL CRITERIA PASS" : "FAILURES PRESENT");
  return g_failures == 0 ? 0 : 1;
}
