#include <catch2/catch_amalgamated.hpp>

#include "cgraph/gradcheck.hpp"
#include "cgraph/graph.hpp"
#include "cgraph/model.hpp"
#include "cgraph/verify.hpp"

using namespace cgraph;
using Td = Tensor<double>;

TEST_CASE("encoder shape contract and zero-image case") {
  ModelConfig cfg;
  cfg.image_size = 64;
  cfg.patch = 4;
  cfg.channels = 64;
  auto params = init_params<double>(cfg, 3);
  auto feat = encode_image(Td::zeros({3, 64, 64}), params.enc);
  CHECK(feat.shape() == Shape{64, 16, 16});

  // Zero image, zero bias: the patch embedding itself is zero (checked on
  // the projection output before the residual blocks).
  auto zpatch = matmul(params.enc.patch_proj, Td::zeros({3 * 4 * 4, 16 * 16}));
  for (int i = 0; i < zpatch.size(); ++i) CHECK(zpatch.at(i) == 0.0);

  CHECK_THROWS_AS(encode_image(Td::zeros({3, 63, 64}), params.enc), ArgError);
}

TEST_CASE("encoder gradcheck on an 8x8 input") {
  CHECK(encoder_gradcheck(11) < 1e-4);
}

TEST_CASE("add_positional is additive and index map follows the convention") {
  auto f = Td::from({1, 2, 2}, {1, 2, 3, 4});
  auto e = Td::from({1, 2, 2}, {10, 20, 30, 40});
  auto v = add_positional(f, e);
  CHECK(v.at(3) == 44.0);
  CHECK_THROWS_AS(add_positional(f, Td::zeros({1, 2, 3})), DimError);

  auto z = add_positional(f, Td::zeros({1, 2, 2}));
  for (int i = 0; i < 4; ++i) CHECK(z.at(i) == f.at(i));

  CHECK(node_index_1based(1, 1, 16) == 1);
  CHECK(node_index_1based(2, 1, 16) == 17);

  // Additivity of gradients: dL/dE == dL/dF for L = sum((F+E)^2).
  Tape<double> tape;
  auto fw = tape.watch(f);
  auto ew = tape.watch(e);
  auto y = add_positional(fw, ew);
  tape.backward(reduce_sum(mul(y, y)));
  for (int i = 0; i < 4; ++i) CHECK(tape.grad(fw).at(i) == tape.grad(ew).at(i));
}

TEST_CASE("cosine edges closed forms") {
  auto nodes = Td::from({2, 3}, {1, 0, 1,
                                 0, 1, 1});
  auto e = cosine_edges(nodes);
  CHECK(e.shape() == Shape{3, 3});
  CHECK(e.at(0) == Catch::Approx(1.0).margin(1e-6));       // identical vector
  CHECK(e.at(1) == Catch::Approx(0.0).margin(1e-9));       // orthogonal
  CHECK(e.at(2) == Catch::Approx(0.70711).margin(1e-5));   // (1,0) vs (1,1)
  // Symmetry and unit diagonal.
  for (int i = 0; i < 3; ++i) {
    CHECK(e.at(i * 3 + i) == Catch::Approx(1.0).margin(1e-6));
    for (int j = 0; j < 3; ++j) CHECK(e.at(i * 3 + j) == Catch::Approx(e.at(j * 3 + i)).margin(1e-6));
  }
}

TEST_CASE("cosine edges are invariant to positive per-node scaling") {
  Rng rng(5);
  std::vector<double> v(4 * 7);
  for (auto& x : v) x = rng.uniform(-1, 1);
  auto base = Td::from({4, 7}, v);
  std::vector<double> scaled = v;
  for (int j = 0; j < 7; ++j) {
    const double s = rng.uniform(0.1, 9.0);
    for (int i = 0; i < 4; ++i) scaled[static_cast<std::size_t>(i * 7 + j)] *= s;
  }
  auto e1 = cosine_edges(base);
  auto e2 = cosine_edges(Td::from({4, 7}, scaled));
  for (int i = 0; i < e1.size(); ++i) CHECK(e1.at(i) == Catch::Approx(e2.at(i)).margin(1e-9));
}

TEST_CASE("topk adjacency: saturation, hand case, range checks") {
  auto e3 = Td::from({3, 3}, {1.0, 0.9, 0.1,
                              0.9, 1.0, 0.5,
                              0.1, 0.5, 1.0});
  auto adj = topk_adjacency(e3, 1);
  CHECK(adj.at(0, 1) == 1);
  CHECK(adj.at(0, 2) == 0);
  CHECK(adj.at(0, 0) == 0);

  auto full = topk_adjacency(e3, 2);
  for (int i = 0; i < 3; ++i) {
    CHECK(full.at(i, i) == 0);
    int ones = 0;
    for (int j = 0; j < 3; ++j) ones += full.at(i, j);
    CHECK(ones == 2);
  }
  CHECK_THROWS_AS(topk_adjacency(e3, 0), ArgError);
  CHECK_THROWS_AS(topk_adjacency(e3, 3), ArgError);
}

TEST_CASE("topk adjacency matches an exhaustive sort oracle on 1000 instances") {
  Rng rng(123);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 32;
    const int k = rng.uniform_int(1, n - 1);
    std::vector<double> ev(static_cast<std::size_t>(n) * n);
    for (auto& x : ev) x = rng.uniform(-1, 1);
    // Coarse quantization provokes ties.
    if (trial % 3 == 0)
      for (auto& x : ev) x = std::round(x * 4.0) / 4.0;
    auto edges = Td::from({n, n}, ev);
    auto adj = topk_adjacency(edges, k);
    for (int i = 0; i < n; ++i) {
      std::vector<int> order;
      for (int j = 0; j < n; ++j)
        if (j != i) order.push_back(j);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (ev[static_cast<std::size_t>(i * n + a)] != ev[static_cast<std::size_t>(i * n + b)])
          return ev[static_cast<std::size_t>(i * n + a)] > ev[static_cast<std::size_t>(i * n + b)];
        return a < b;
      });
      int ones = 0;
      for (int j = 0; j < n; ++j) ones += adj.at(i, j);
      REQUIRE(ones == k);
      REQUIRE(adj.at(i, i) == 0);
      for (int s = 0; s < k; ++s) REQUIRE(adj.at(i, order[static_cast<std::size_t>(s)]) == 1);
    }
  }
}

TEST_CASE("topk adjacency is invariant under strictly monotone transforms") {
  Rng rng(9);
  const int n = 16;
  std::vector<double> ev(static_cast<std::size_t>(n) * n);
  for (auto& x : ev) x = rng.uniform(-1, 1);
  std::vector<double> tv = ev;
  for (auto& x : tv) x = std::atan(3.0 * x) + 0.1 * x;  // strictly increasing
  auto a1 = topk_adjacency(Td::from({n, n}, ev), 5);
  auto a2 = topk_adjacency(Td::from({n, n}, tv), 5);
  CHECK(a1.a == a2.a);
}

TEST_CASE("mask resize: all-foreground stays all-foreground; ties go foreground") {
  for (int h : {4, 5, 7}) {
    Mask m = Mask::zeros(20, 20);
    for (auto& v : m.v) v = 1;
    auto rm = resize_mask(m, h, h);
    CHECK(rm.count() == h * h);
  }
  // A half block averages to exactly 0.5 -> foreground.
  Mask half = Mask::zeros(2, 2);
  half.at(0, 0) = 1;
  half.at(0, 1) = 1;
  auto rm = resize_mask(half, 1, 1);
  CHECK(rm.at(0, 0) == 1);
}

TEST_CASE("extract_support_subgraph identity and constant cases") {
  Mask all = Mask::zeros(8, 8);
  for (auto& v : all.v) v = 1;

  Rng rng(2);
  std::vector<double> nv(3 * 16);
  for (auto& v : nv) v = rng.uniform(-1, 1);
  auto nodes = Td::from({3, 4, 4}, nv);

  auto full = extract_support_subgraph(nodes, all, 16);
  for (int i = 0; i < nodes.size(); ++i) CHECK(full.at(i) == Catch::Approx(nodes.at(i)));

  auto con = extract_support_subgraph(Td::full({3, 4, 4}, 2.5), all, 7);
  for (int i = 0; i < con.size(); ++i) CHECK(con.at(i) == Catch::Approx(2.5));

  Mask empty = Mask::zeros(8, 8);
  CHECK_THROWS_AS(extract_support_subgraph(nodes, empty, 4), EpisodeSkip);
}

TEST_CASE("extract_support_subgraph matches a mask-then-pool oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 4, w = 4, c = 3;
    std::vector<double> nv(static_cast<std::size_t>(c) * h * w);
    for (auto& v : nv) v = rng.uniform(-1, 1);
    Mask m = Mask::zeros(8, 8);
    for (auto& v : m.v) v = rng.uniform() < 0.5 ? 1 : 0;
    Mask rm = resize_mask(m, h, w);
    if (rm.count() == 0) continue;
    const int n = rng.uniform_int(1, h * w);
    auto got = extract_support_subgraph(Td::from({c, h, w}, nv), m, n);
    // Oracle: multiply mask, then bin-average.
    for (int ch = 0; ch < c; ++ch) {
      for (int b = 0; b < n; ++b) {
        const int lo = (b * h * w) / n, hi = ((b + 1) * h * w + n - 1) / n;
        double acc = 0;
        for (int i = lo; i < hi; ++i)
          acc += nv[static_cast<std::size_t>(ch * h * w + i)] * rm.v[static_cast<std::size_t>(i)];
        REQUIRE(got.at(ch * n + b) == Catch::Approx(acc / (hi - lo)).margin(1e-12));
      }
    }
  }
}

TEST_CASE("gather-foreground variant pools only the masked columns") {
  Mask m = Mask::zeros(4, 4);
  m.at(0, 0) = 1;
  m.at(0, 1) = 1;
  std::vector<double> nv(16);
  for (int i = 0; i < 16; ++i) nv[static_cast<std::size_t>(i)] = i;
  auto nodes = Td::from({1, 4, 4}, nv);
  auto sub = extract_support_subgraph(nodes, m, 2, true);
  CHECK(sub.at(0) == 0.0);
  CHECK(sub.at(1) == 1.0);
}
