#pragma once

// Procedural multi-domain dataset: superellipse "anatomy" layouts shared
// across domains (structure), per-domain appearance styles (intensity,
// gamma, blur, texture, noise). Label masks are a function of geometry
// only, so the same layout rendered under any style yields bit-identical
// masks. That is the executable form of the structural-consistency contract.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cgraph/episode.hpp"
#include "cgraph/graph.hpp"
#include "cgraph/rng.hpp"
#include "cgraph/tensor.hpp"

namespace cgraph {

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One organ-like region: a rotated superellipse, optionally with an inner
// cutout (inner_scale > 0) to form a ring.
struct Region {
  int class_id = 0;
  double cx = 0, cy = 0;      // center in pixels
  double rx = 1, ry = 1;      // radii in pixels
  double exponent = 2.0;      // superellipse exponent
  double rotation = 0.0;      // radians
  double inner_scale = 0.0;   // 0 = solid, else annulus cutout factor

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(rotation), s = std::sin(rotation);
    const double u = dx * c + dy * s;
    const double v = -dx * s + dy * c;
    auto inside = [&](double sx, double sy) {
      return std::pow(std::abs(u) / sx, exponent) + std::pow(std::abs(v) / sy, exponent) <= 1.0;
    };
    if (!inside(rx, ry)) return false;
    if (inner_scale > 0.0 && inside(rx * inner_scale, ry * inner_scale)) return false;
    return true;
  }
};

struct PatientLayout {
  std::uint64_t seed = 0;
  int canvas = 64;
  std::vector<Region> regions;  // in class priority order
};

// Class label per pixel; later classes never overwrite earlier ones.
inline std::vector<std::uint8_t> rasterize_labels(const PatientLayout& layout) {
  const int n = layout.canvas;
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(n) * n, 0);
  for (const auto& r : layout.regions) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        auto& cell = labels[static_cast<std::size_t>(y) * n + x];
        if (cell == 0 && r.contains(x + 0.5, y + 0.5))
          cell = static_cast<std::uint8_t>(r.class_id);
      }
  }
  return labels;
}

// Deterministic layout from a seed: fixed per-class anchor family (the ring
// class sits at slot 4) plus per-patient jitter. Retries the jitter until
// every class occupies at least 16 pixels after overlap resolution.
inline PatientLayout generate_layout(std::uint64_t seed, int class_count, int canvas = 64) {
  if (class_count < 2 || class_count > 6)
    throw ArgError("generate_layout: class count " + std::to_string(class_count) + " outside [2, 6]");
  struct Anchor {
    double cx, cy, rx, ry, inner;
  };
  static constexpr Anchor kAnchors[6] = {
      {0.38, 0.42, 0.26, 0.20, 0.0},  // large central organ
      {0.72, 0.28, 0.13, 0.10, 0.0},
      {0.70, 0.72, 0.10, 0.12, 0.0},
      {0.30, 0.76, 0.145, 0.13, 0.55},  // ring
      {0.87, 0.52, 0.08, 0.07, 0.0},
      {0.14, 0.14, 0.09, 0.07, 0.0},
  };
  Rng rng(mix_seed(seed, 0x1a70u));
  const double cs = canvas;
  for (int attempt = 0; attempt < 64; ++attempt) {
    PatientLayout layout;
    layout.seed = seed;
    layout.canvas = canvas;
    // Whole-body placement shift plus per-organ jitter: relative anatomy is
    // preserved while absolute canvas positions vary patient to patient.
    const double gx = rng.uniform(-0.14, 0.14);
    const double gy = rng.uniform(-0.14, 0.14);
    for (int c = 1; c <= class_count; ++c) {
      const Anchor& a = kAnchors[c - 1];
      Region r;
      r.class_id = c;
      r.cx = (a.cx + gx + rng.uniform(-0.08, 0.08)) * cs;
      r.cy = (a.cy + gy + rng.uniform(-0.08, 0.08)) * cs;
      r.rx = a.rx * rng.uniform(0.7, 1.35) * cs;
      r.ry = a.ry * rng.uniform(0.7, 1.35) * cs;
      r.exponent = rng.uniform(1.6, 3.0);
      r.rotation = rng.uniform(-0.5, 0.5);
      // Ring morphology: the anchored ring class always carries its cutout;
      // other organs develop one in a minority of patients (vessel-like
      // hollow sections), so rings are part of every class's variation.
      const double hollow = rng.uniform(0.0, 1.0);
      if (a.inner > 0.0)
        r.inner_scale = a.inner * rng.uniform(0.85, 1.1);
      else if (hollow < 0.3)
        r.inner_scale = rng.uniform(0.4, 0.6);
      layout.regions.push_back(r);
    }
    auto labels = rasterize_labels(layout);
    std::vector<int> area(static_cast<std::size_t>(class_count) + 1, 0);
    for (auto l : labels) ++area[l];
    bool ok = true;
    for (int c = 1; c <= class_count; ++c) ok = ok && area[static_cast<std::size_t>(c)] >= 16;
    if (ok) return layout;
  }
  throw GenerationError("generate_layout: unplaceable regions for seed " + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Appearance styles
// ---------------------------------------------------------------------------

struct DomainStyle {
  int domain_id = 0;
  std::string name = "A";
  std::vector<double> base_intensity;  // indexed by class id, 0 = background
  double gamma = 1.0;
  int blur_radius = 0;
  double noise_amp = 0.0;
  double texture_freq = 0.0;
  double texture_amp = 0.0;
  std::uint64_t style_seed = 0;

  double tissue_jitter = 0.12;  // per-patient, per-class intensity spread

  // Bright organs on a dark background, little degradation.
  static DomainStyle builtin_a() {
    DomainStyle s;
    s.domain_id = 0;
    s.name = "A";
    s.base_intensity = {0.12, 0.80, 0.90, 0.70, 0.85, 0.65, 0.75};
    s.gamma = 1.0;
    s.blur_radius = 0;
    s.noise_amp = 0.02;
    s.texture_freq = 0.0;
    s.texture_amp = 0.0;
    s.style_seed = 0xA;
    return s;
  }

  // Inverted contrast, gamma-compressed, textured and noisier.
  static DomainStyle builtin_b() {
    DomainStyle s;
    s.domain_id = 1;
    s.name = "B";
    s.base_intensity = {0.88, 0.22, 0.12, 0.32, 0.08, 0.38, 0.18};
    s.gamma = 1.8;
    s.blur_radius = 1;
    s.noise_amp = 0.05;
    s.texture_freq = 0.17;
    s.texture_amp = 0.08;
    s.style_seed = 0xB;
    return s;
  }
};

struct LabeledImage {
  int h = 0, w = 0;
  std::vector<double> gray;           // [0, 1]
  std::vector<std::uint8_t> labels;   // class ids
};

// Fixed render order: base fill (with per-patient intensity jitter),
// texture, blur, gamma, noise, clamp. The label mask comes from geometry
// alone and is untouched by the style.
inline LabeledImage render_domain(const PatientLayout& layout, const DomainStyle& style) {
  const int n = layout.canvas;
  LabeledImage img;
  img.h = n;
  img.w = n;
  img.labels = rasterize_labels(layout);
  img.gray.resize(static_cast<std::size_t>(n) * n);

  // Per-patient, per-class offsets on the intensity table: tissue contrast
  // varies patient to patient (even the relative brightness ordering of
  // organs can swap), so class identity cannot be read off intensity alone.
  // Background stays nearly fixed. Deterministic in (style, layout).
  std::vector<double> base = style.base_intensity;
  Rng jrng(mix_seed(style.style_seed ^ 0xBA5Eu, layout.seed));
  for (std::size_t l = 0; l < base.size(); ++l) {
    const double amp = l == 0 ? 0.04 : style.tissue_jitter;
    base[l] = std::min(std::max(base[l] + jrng.uniform(-amp, amp), 0.02), 0.98);
  }

  for (std::size_t i = 0; i < img.gray.size(); ++i) {
    const std::uint8_t l = img.labels[i];
    img.gray[i] = l < base.size() ? base[l] : 0.5;
  }

  if (style.texture_amp > 0.0) {
    Rng trng(mix_seed(style.style_seed, 0x7e47u));
    const double px = trng.uniform(0.0, 6.28318530717958648);
    const double py = trng.uniform(0.0, 6.28318530717958648);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        img.gray[static_cast<std::size_t>(y) * n + x] +=
            style.texture_amp * std::sin(6.28318530717958648 * style.texture_freq * x + px) *
            std::sin(6.28318530717958648 * style.texture_freq * y + py);
  }

  if (style.blur_radius > 0) {
    const int r = style.blur_radius;
    std::vector<double> tmp(img.gray.size());
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double acc = 0;
        int cnt = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= n || xx < 0 || xx >= n) continue;
            acc += img.gray[static_cast<std::size_t>(yy) * n + xx];
            ++cnt;
          }
        tmp[static_cast<std::size_t>(y) * n + x] = acc / cnt;
      }
    img.gray.swap(tmp);
  }

  if (style.gamma != 1.0) {
    for (auto& v : img.gray) v = std::pow(std::min(std::max(v, 0.0), 1.0), style.gamma);
  }

  if (style.noise_amp > 0.0) {
    Rng nrng(mix_seed(style.style_seed, layout.seed));
    for (auto& v : img.gray) v += nrng.uniform(-style.noise_amp, style.noise_amp);
  }

  for (auto& v : img.gray) v = std::min(std::max(v, 0.0), 1.0);
  return img;
}

// Grayscale replicated over three channels.
template <class T>
Tensor<T> to_image_tensor(const LabeledImage& img) {
  std::vector<T> d(static_cast<std::size_t>(3) * img.h * img.w);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < img.gray.size(); ++i)
      d[static_cast<std::size_t>(c) * img.gray.size() + i] = static_cast<T>(img.gray[i]);
  return Tensor<T>::from({3, img.h, img.w}, std::move(d));
}

inline Mask class_mask(const LabeledImage& img, int class_id) {
  Mask m = Mask::zeros(img.h, img.w);
  for (std::size_t i = 0; i < img.labels.size(); ++i)
    m.v[i] = img.labels[i] == class_id ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Episodic sampler
// ---------------------------------------------------------------------------

struct SynthConfig {
  int canvas = 64;
  int class_count = 4;
  DomainStyle style_a = DomainStyle::builtin_a();
  DomainStyle style_b = DomainStyle::builtin_b();

  const DomainStyle& style(int domain_id) const {
    if (domain_id == style_a.domain_id) return style_a;
    if (domain_id == style_b.domain_id) return style_b;
    throw ArgError("unknown domain id " + std::to_string(domain_id));
  }
};

// K support patients plus one query patient, all distinct layouts, same
// domain and class; masks binarized to the episode class. Retries layouts
// whose class region vanished (cannot happen with the built-in family, but
// the budget guards user styles/layouts).
template <class T>
Episode<T> sample_episode(const SynthConfig& cfg, int domain_id, int class_id, int shots,
                          std::uint64_t seed) {
  if (class_id < 1 || class_id > cfg.class_count)
    throw ArgError("sample_episode: class " + std::to_string(class_id) +
                   " not in generator class set [1, " + std::to_string(cfg.class_count) + "]");
  if (shots < 1) throw ArgError("sample_episode: shots must be >= 1");
  const DomainStyle& style = cfg.style(domain_id);

  Episode<T> ep;
  ep.class_id = class_id;
  ep.domain_id = domain_id;
  ep.seed = seed;

  std::vector<std::uint64_t> used;
  std::uint64_t counter = 0;
  int budget = 64 + 8 * shots;
  auto draw_patient = [&]() {
    while (budget-- > 0) {
      const std::uint64_t ls = mix_seed(seed, counter++);
      bool dup = false;
      for (auto u : used) dup = dup || (u == ls);
      if (dup) continue;
      auto layout = generate_layout(ls, cfg.class_count, cfg.canvas);
      auto img = render_domain(layout, style);
      Mask m = class_mask(img, class_id);
      if (m.count() == 0) continue;
      used.push_back(ls);
      return std::pair<Tensor<T>, Mask>{to_image_tensor<T>(img), std::move(m)};
    }
    throw SamplingError("sample_episode: retry budget exhausted for seed " + std::to_string(seed));
  };

  for (int s = 0; s < shots; ++s) ep.support.push_back(draw_patient());
  auto q = draw_patient();
  ep.query_image = std::move(q.first);
  ep.query_mask = std::move(q.second);
  return ep;
}

}  // namespace cgraph
