#include <catch2/catch_amalgamated.hpp>

#include "cgraph/cnc.hpp"
#include "cgraph/verify.hpp"

using namespace cgraph;
using Td = Tensor<double>;

namespace {

Td rand_t(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(numel(s)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Td::from(std::move(s), std::move(v));
}

}  // namespace

TEST_CASE("entropy map closed forms") {
  auto h = entropy_map(Td::from({1, 3}, {0.5, 1.0, 0.9}));
  CHECK(h.at(0) == Catch::Approx(std::log(2.0)).margin(1e-12));
  CHECK(h.at(1) == Catch::Approx(0.0).margin(1e-5));  // certainty limit (clamped log)
  CHECK(h.at(2) == Catch::Approx(0.32508).margin(1e-5));
}

TEST_CASE("entropy is symmetric under fg -> 1-fg") {
  Rng rng(3);
  std::vector<double> v(16);
  for (auto& x : v) x = rng.uniform(0.01, 0.99);
  std::vector<double> w(16);
  for (std::size_t i = 0; i < 16; ++i) w[i] = 1.0 - v[i];
  auto h1 = entropy_map(Td::from({4, 4}, v));
  auto h2 = entropy_map(Td::from({4, 4}, w));
  for (int i = 0; i < 16; ++i) CHECK(h1.at(i) == Catch::Approx(h2.at(i)).margin(1e-12));
}

TEST_CASE("select_confused: saturation, full selection, disjoint partition") {
  const int h = 4, w = 4, c = 3;
  auto nodes = rand_t({c, h, w}, 5);
  Mask gt = Mask::zeros(h, w);
  for (int i = 0; i < 8; ++i) gt.v[static_cast<std::size_t>(i)] = 1;

  // delta >= ln 2: nothing selected.
  auto ent = entropy_map(Td::full({h, w}, 0.5));
  auto none = select_confused(ent, gt, nodes, std::log(2.0) + 1e-9);
  CHECK(none.p_count() == 0);
  CHECK(none.n_count() == 0);

  // fg = 0.5 everywhere with delta below ln 2: everything selected.
  auto all = select_confused(ent, gt, nodes, 0.2);
  CHECK(all.p_count() + all.n_count() == h * w);
  CHECK(all.p_count() == 8);

  // Partition is disjoint.
  for (int i : all.p_idx)
    for (int j : all.n_idx) CHECK(i != j);
}

TEST_CASE("select_confused matches a brute-force scan oracle") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 5, w = 5;
    std::vector<double> fg(25);
    for (auto& v : fg) v = rng.uniform(0.01, 0.99);
    Mask gt = Mask::zeros(h, w);
    for (auto& v : gt.v) v = rng.uniform() < 0.4 ? 1 : 0;
    const double delta = rng.uniform(0.05, 0.69);
    auto ent = entropy_map(Td::from({h, w}, fg));
    auto nodes = rand_t({2, h, w}, 100 + static_cast<std::uint64_t>(trial));
    auto sel = select_confused(ent, gt, nodes, delta);
    int p = 0, n = 0;
    for (int i = 0; i < 25; ++i) {
      const double e = -(fg[static_cast<std::size_t>(i)] * std::log(fg[static_cast<std::size_t>(i)]) +
                         (1 - fg[static_cast<std::size_t>(i)]) * std::log(1 - fg[static_cast<std::size_t>(i)]));
      if (e > delta) (gt.v[static_cast<std::size_t>(i)] ? p : n) += 1;
    }
    REQUIRE(sel.p_count() == p);
    REQUIRE(sel.n_count() == n);
  }
}

TEST_CASE("semantic center: constant, hand case, permutation invariance") {
  Mask gt = Mask::zeros(2, 2);
  gt.v = {1, 1, 0, 0};

  auto ones = Td::full({3, 2, 2}, 4.2);
  auto c1 = semantic_center(ones, gt);
  for (int i = 0; i < 3; ++i) CHECK(c1.at(i) == Catch::Approx(4.2));

  // Two foreground nodes (1,0) and (0,1) -> center (0.5, 0.5).
  auto nodes = Td::from({2, 2, 2}, {1, 0, 9, 9,
                                    0, 1, 9, 9});
  auto c2 = semantic_center(nodes, gt);
  CHECK(c2.at(0) == Catch::Approx(0.5));
  CHECK(c2.at(1) == Catch::Approx(0.5));

  Mask empty = Mask::zeros(2, 2);
  CHECK_THROWS_AS(semantic_center(nodes, empty), EpisodeSkip);

  // Permutation invariance over foreground positions: swapping which
  // foreground position holds which vector leaves the mean unchanged.
  auto swapped = Td::from({2, 2, 2}, {0, 1, 9, 9,
                                      1, 0, 9, 9});
  auto c3 = semantic_center(swapped, gt);
  CHECK(c3.at(0) == Catch::Approx(c2.at(0)).margin(1e-15));
  CHECK(c3.at(1) == Catch::Approx(c2.at(1)).margin(1e-15));
}

TEST_CASE("cnc loss closed form and empty cases") {
  const int c = 3;
  ConfusionSelection<double> sel;
  sel.p_idx = {0};
  sel.n_idx = {1};
  // cos(q, p) = 1, cos(q, n) = -1 at tau = 1 -> log(1 + e^-2).
  auto q = Td::from({c, 1}, {1, 0, 0});
  sel.positives = Td::from({c, 1}, {2, 0, 0});   // same direction as q
  sel.negatives = Td::from({c, 1}, {-3, 0, 0});  // opposite
  auto loss = cnc_loss(sel, q, 1.0);
  CHECK(loss.item() == Catch::Approx(std::log(1.0 + std::exp(-2.0))).margin(1e-6));

  ConfusionSelection<double> none;
  none.positives = Td::zeros({c, 0});
  none.negatives = Td::zeros({c, 0});
  CHECK(cnc_loss(none, q, 0.1).item() == 0.0);
  CHECK_THROWS_AS(cnc_loss(sel, q, 0.0), ArgError);
}

TEST_CASE("cnc loss decreases when a negative moves away from the anchor") {
  const int c = 2;
  auto q = Td::from({c, 1}, {1, 0});
  auto make = [&](double nx, double ny) {
    ConfusionSelection<double> sel;
    sel.p_idx = {0};
    sel.n_idx = {1};
    sel.positives = Td::from({c, 1}, {1, 0.2});
    sel.negatives = Td::from({c, 1}, {nx, ny});
    return cnc_loss(sel, q, 0.5).item();
  };
  // Negative rotated further from q (cosine decreases) lowers the loss.
  CHECK(make(0.9, 0.4) > make(0.2, 0.9));
  CHECK(make(0.2, 0.9) > make(-0.9, 0.1));
}

TEST_CASE("cnc loss is invariant to positive rescaling of node vectors") {
  const int c = 3;
  auto q = Td::from({c, 1}, {0.3, -0.4, 0.8});
  ConfusionSelection<double> a;
  a.p_idx = {0, 1};
  a.n_idx = {2, 3, 4};
  a.positives = rand_t({c, 2}, 7);
  a.negatives = rand_t({c, 3}, 8);
  ConfusionSelection<double> b = a;
  {
    auto scale_cols = [](const Td& t, std::uint64_t seed) {
      Rng rng(seed);
      std::vector<double> v = t.to_vector();
      for (int j = 0; j < t.dim(1); ++j) {
        const double s = rng.uniform(0.2, 7.0);
        for (int i = 0; i < t.dim(0); ++i) v[static_cast<std::size_t>(i * t.dim(1) + j)] *= s;
      }
      return Td::from(t.shape(), std::move(v));
    };
    b.positives = scale_cols(a.positives, 9);
    b.negatives = scale_cols(a.negatives, 10);
  }
  auto la = cnc_loss(a, q, 0.1).item();
  auto lb = cnc_loss(b, scale(q, 3.7), 0.1).item();
  CHECK(la == Catch::Approx(lb).margin(1e-9));
  CHECK(la > 0.0);  // strictly positive with both sides nonempty
}

TEST_CASE("cnc loss is strictly positive whenever both partitions are nonempty") {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const int c = 4, np = rng.uniform_int(1, 6), nn = rng.uniform_int(1, 6);
    ConfusionSelection<double> sel;
    for (int i = 0; i < np; ++i) sel.p_idx.push_back(i);
    for (int i = 0; i < nn; ++i) sel.n_idx.push_back(np + i);
    sel.positives = rand_t({c, np}, 200 + static_cast<std::uint64_t>(trial));
    sel.negatives = rand_t({c, nn}, 300 + static_cast<std::uint64_t>(trial));
    auto q = rand_t({c, 1}, 400 + static_cast<std::uint64_t>(trial));
    CHECK(cnc_loss(sel, q, 0.1).item() > 0.0);
  }
}
