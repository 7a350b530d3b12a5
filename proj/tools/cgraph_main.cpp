// cgraph command-line tool: dataset synthesis, training, evaluation,
// gradient verification, and graph diagnostics over the config-file
// protocol. One command per process; everything is a pure function of
// (config, seed, params file).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cgraph/cgraph.hpp"

namespace fs = std::filesystem;
using namespace cgraph;

namespace {

int env_threads() {
  const char* v = std::getenv("CGRAPH_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return n > 0 ? n : 1;
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "run";
  std::string params_path;
  long seed = -1;  // -1: use config value
  bool overwrite = false;
  int shots = 0;  // 0: use config value
  bool baseline = false;
};

Config load_config(const CommonArgs& args) {
  Config cfg = args.config_path.empty() ? Config() : Config::from_file(args.config_path);
  if (args.seed >= 0) cfg.set("train.seed", std::to_string(args.seed));
  if (args.shots > 0) cfg.set("eval.shots", std::to_string(args.shots));
  return cfg;
}

template <class T>
struct Setup {
  TrainConfig<T> train;
  SynthConfig synth;
  int train_domain = 0;
  std::vector<int> train_classes;
  int eval_domain = 1;
  int eval_class = 4;
  int eval_episodes = 50;
  int eval_shots = 1;
};

template <class T>
Setup<T> make_setup(const Config& cfg) {
  Setup<T> s;
  s.train.model.image_size = static_cast<int>(cfg.get_int("model.image_size"));
  s.train.model.patch = static_cast<int>(cfg.get_int("model.patch"));
  s.train.model.channels = static_cast<int>(cfg.get_int("model.channels"));
  s.train.model.subgraph_nodes = static_cast<int>(cfg.get_int("model.subgraph_nodes"));
  s.train.model.depth = static_cast<int>(cfg.get_int("spg.depth"));
  s.train.model.k = static_cast<int>(cfg.get_int("spg.k"));
  s.train.model.gather_foreground = cfg.get_bool("model.subgraph_gather");
  s.train.cnc.delta = static_cast<T>(cfg.get_real("cnc.delta"));
  s.train.cnc.tau = static_cast<T>(cfg.get_real("cnc.tau"));
  s.train.cnc.alpha = static_cast<T>(cfg.get_real("cnc.alpha"));
  s.train.lr = static_cast<T>(cfg.get_real("train.lr"));
  s.train.lr_decay = static_cast<T>(cfg.get_real("train.lr_decay"));
  s.train.lr_decay_every = static_cast<int>(cfg.get_int("train.lr_decay_every"));
  s.train.iterations = cfg.get_int("train.iterations");
  s.train.seed = cfg.get_u64("train.seed");
  s.train.variant = cfg.raw("model.variant") == "proto" ? ModelVariant::Proto
                                                        : ModelVariant::CGraph;
  if (cfg.raw("model.variant") != "proto" && cfg.raw("model.variant") != "cgraph")
    throw ArgError("invalid value '" + cfg.raw("model.variant") +
                   "' for config key 'model.variant'; accepted: cgraph | proto");
  s.synth.canvas = s.train.model.image_size;
  s.synth.class_count = static_cast<int>(cfg.get_int("data.class_count"));
  s.train_domain = cfg.domain_id("data.train_domain");
  s.train_classes = cfg.get_int_list("data.train_classes");
  s.eval_domain = cfg.domain_id("eval.domain");
  s.eval_class = static_cast<int>(cfg.get_int("eval.class"));
  s.eval_episodes = static_cast<int>(cfg.get_int("eval.episodes"));
  s.eval_shots = static_cast<int>(cfg.get_int("eval.shots"));
  return s;
}

template <class T>
std::function<Episode<T>(std::uint64_t)> make_sampler(const Setup<T>& s) {
  return [synth = s.synth, domain = s.train_domain, classes = s.train_classes](std::uint64_t sub) {
    Rng r(sub);
    const int cls = classes[static_cast<std::size_t>(r.next_u64() % classes.size())];
    return sample_episode<T>(synth, domain, cls, 1, splitmix64(sub));
  };
}

void ensure_fresh(const fs::path& dir, std::initializer_list<const char*> artifacts,
                  bool overwrite) {
  fs::create_directories(dir);
  if (overwrite) return;
  for (const char* a : artifacts) {
    if (fs::exists(dir / a))
      throw IoError("refusing to overwrite existing " + (dir / a).string() +
                    " (pass --overwrite to replace)");
  }
}

// ---------------------------------------------------------------------------

template <class T>
int run_train(const Config& cfg, const CommonArgs& args) {
  auto setup = make_setup<T>(cfg);
  const fs::path out(args.out_dir);
  ensure_fresh(out, {"config.resolved", "metrics.csv", "params.bin"}, args.overwrite);

  std::ofstream rc(out / "config.resolved");
  rc << cfg.resolved();
  rc.close();

  auto result = train_loop<T>(setup.train, make_sampler<T>(setup));
  write_metrics_csv(result.metrics, (out / "metrics.csv").string());
  save_params(result.params, (out / "params.bin").string());
  std::printf("trained %ld iterations, final total loss %.6g -> %s\n",
              setup.train.iterations,
              result.metrics.empty() ? 0.0 : result.metrics.back().total,
              out.string().c_str());
  return 0;
}

template <class T>
int run_eval(const Config& cfg, const CommonArgs& args) {
  auto setup = make_setup<T>(cfg);
  if (setup.eval_episodes < 1) throw ArgError("eval.episodes must be >= 1");
  auto params = init_params<T>(setup.train.model, setup.train.seed);
  load_params(params, args.params_path);

  const int fs_ = setup.train.model.feat_size();
  std::vector<Episode<T>> episodes;
  for (int e = 0; e < setup.eval_episodes; ++e)
    episodes.push_back(sample_valid_episode<T>(setup.synth, setup.eval_domain, setup.eval_class,
                                               setup.eval_shots,
                                               mix_seed(setup.train.seed ^ 0xE7A1u, static_cast<std::uint64_t>(e)),
                                               fs_, fs_));

  const bool model_is_proto = setup.train.variant == ModelVariant::Proto;
  auto summary = evaluate_suite(params, setup.train.model, episodes, model_is_proto, env_threads());
  const fs::path out(args.out_dir);
  fs::create_directories(out);
  write_eval_csv(summary, (out / "eval.csv").string());
  std::printf("mean DSC %.4f over %d episodes (domain %d, class %d, %d-shot)\n", summary.mean,
              setup.eval_episodes, setup.eval_domain, setup.eval_class, setup.eval_shots);
  if (args.baseline && !model_is_proto) {
    auto base = evaluate_suite(params, setup.train.model, episodes, true, env_threads());
    write_eval_csv(base, (out / "eval_baseline.csv").string());
    std::printf("baseline (prototype matching) mean DSC %.4f\n", base.mean);
  }
  return 0;
}

int run_gradcheck() {
  const auto reports = run_gradcheck_suite();
  bool all = true;
  for (const auto& r : reports) {
    std::printf("%-24s max_rel_err=%.3e %s\n", r.name.c_str(), r.max_rel_err,
                r.pass ? "PASS" : "FAIL");
    all = all && r.pass;
  }
  std::printf("%zu checks, %s\n", reports.size(), all ? "all passed" : "FAILURES PRESENT");
  return all ? 0 : 1;
}

template <class T>
int run_diagnose(const Config& cfg, const CommonArgs& args, long episode_seed) {
  auto setup = make_setup<T>(cfg);
  auto params = init_params<T>(setup.train.model, setup.train.seed);
  load_params(params, args.params_path);

  const std::uint64_t es = episode_seed >= 0 ? static_cast<std::uint64_t>(episode_seed)
                                             : setup.train.seed;
  auto ep = sample_episode<T>(setup.synth, setup.eval_domain, setup.eval_class, 1, es);
  Trace<T> trace;
  ForwardCtx<T> ctx{&trace, nullptr};
  forward_full(params, setup.train.model, ep.support[0].first, ep.support[0].second,
               ep.query_image, ctx);
  const int fs_ = setup.train.model.feat_size();
  Mask gt = resize_mask(ep.query_mask, fs_, fs_);

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  std::ofstream cs(out / "compactness.csv");
  cs << "layer,intra,inter,gap\n";
  for (std::size_t i = 0; i < trace.layer_query_nodes.size(); ++i) {
    FeatureGraph<T> g;
    g.nodes = trace.layer_query_nodes[i];
    g.edge_cache = cosine_edges(g.nodes.reshaped({setup.train.model.channels, fs_ * fs_}));
    g.adjacency = topk_adjacency(*g.edge_cache, trace.layer_k[i]);
    const std::string path = (out / ("graph_layer" + std::to_string(i + 1) + ".txt")).string();
    export_graph(g, gt, static_cast<int>(i + 1), path);
    auto stats = subgraph_stats(g, gt);
    cs << (i + 1) << ',' << cgraph::detail::fmt_g9(stats.intra) << ','
       << cgraph::detail::fmt_g9(stats.inter) << ',' << cgraph::detail::fmt_g9(stats.gap) << '\n';
  }
  std::printf("wrote %zu graph exports and compactness.csv -> %s\n",
              trace.layer_query_nodes.size(), out.string().c_str());
  return 0;
}

template <class T>
int run_synth(const Config& cfg, const CommonArgs& args, int patients) {
  auto setup = make_setup<T>(cfg);
  const fs::path out(args.out_dir);
  fs::create_directories(out);
  std::ofstream manifest(out / "manifest.csv");
  manifest << "patient_seed,domain,path_image,path_mask\n";
  for (int i = 0; i < patients; ++i) {
    const std::uint64_t ls = mix_seed(setup.train.seed, static_cast<std::uint64_t>(i));
    auto layout = generate_layout(ls, setup.synth.class_count, setup.synth.canvas);
    for (const auto* style : {&setup.synth.style_a, &setup.synth.style_b}) {
      auto img = render_domain(layout, *style);
      const std::string base = "patient" + std::to_string(i) + "_" + style->name;
      write_pgm_gray(img.gray, img.h, img.w, (out / (base + ".pgm")).string());
      write_pgm(img.labels, img.h, img.w, (out / (base + "_mask.pgm")).string());
      manifest << ls << ',' << style->name << ',' << base + ".pgm" << ',' << base + "_mask.pgm"
               << '\n';
    }
  }
  std::printf("wrote %d patients x 2 domains -> %s\n", patients, out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"C-Graph: cross-domain few-shot segmentation on synthetic multi-domain episodes"};
  app.require_subcommand(1);
  CommonArgs args;
  long episode_seed = -1;
  int patients = 4;

  auto add_common = [&](CLI::App* cmd, bool needs_params) {
    cmd->add_option("--config", args.config_path, "flat key = value config file");
    cmd->add_option("--seed", args.seed, "override train.seed");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_flag("--overwrite", args.overwrite, "replace existing run artifacts");
    if (needs_params)
      cmd->add_option("--params", args.params_path, "parameter snapshot (params.bin)")->required();
  };

  auto* c_train = app.add_subcommand("train", "train a model and write metrics + parameters");
  add_common(c_train, false);
  auto* c_eval = app.add_subcommand("eval", "evaluate a parameter snapshot on held-out episodes");
  add_common(c_eval, true);
  c_eval->add_option("--shots", args.shots, "support shots per episode");
  c_eval->add_flag("--baseline", args.baseline, "also run the prototypical baseline");
  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference verification of all gradients");
  auto* c_diag = app.add_subcommand("diagnose", "export per-layer graphs and compactness stats");
  add_common(c_diag, true);
  c_diag->add_option("--episode-seed", episode_seed, "episode seed for the diagnosed episode");
  auto* c_synth = app.add_subcommand("synth", "emit a dataset preview (PGM images + manifest)");
  add_common(c_synth, false);
  c_synth->add_option("--patients", patients, "number of patients to render per domain");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_grad->parsed()) return run_gradcheck();
    Config cfg = load_config(args);
    const bool single = cfg.raw("train.precision") == "single";
    if (!single && cfg.raw("train.precision") != "double")
      throw ArgError("invalid value '" + cfg.raw("train.precision") +
                     "' for config key 'train.precision'; accepted: double | single");
    if (c_train->parsed()) return single ? run_train<float>(cfg, args) : run_train<double>(cfg, args);
    if (c_eval->parsed()) return single ? run_eval<float>(cfg, args) : run_eval<double>(cfg, args);
    if (c_diag->parsed())
      return single ? run_diagnose<float>(cfg, args, episode_seed)
                    : run_diagnose<double>(cfg, args, episode_seed);
    if (c_synth->parsed())
      return single ? run_synth<float>(cfg, args, patients) : run_synth<double>(cfg, args, patients);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
