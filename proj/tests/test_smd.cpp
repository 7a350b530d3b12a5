#include <catch2/catch_amalgamated.hpp>

#include "cgraph/model.hpp"
#include "cgraph/smd.hpp"
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

SMDParams<double> toy_smd(std::uint64_t seed) {
  return init_params<double>(toy_model_config(), seed).smd;
}

}  // namespace

TEST_CASE("project_shared: identity projections pass inputs through") {
  const int c = 8, n = 8;
  auto p = toy_smd(1);
  p.w_s = eye<double>(c);
  p.w_q = eye<double>(c);
  auto sub = rand_t({c, n}, 2);
  auto qn = rand_t({c, 4, 4}, 3);
  auto [vs, vq] = project_shared(sub, qn, p);
  CHECK(vs.shape() == Shape{c, n});
  CHECK(vq.shape() == Shape{16, c});
  for (int i = 0; i < sub.size(); ++i) CHECK(vs.at(i) == Catch::Approx(sub.at(i)));
  // vq is the transposed flattened query map.
  auto flat = qn.reshaped({c, 16});
  for (int i = 0; i < 16; ++i)
    for (int ch = 0; ch < c; ++ch) CHECK(vq.at(i * c + ch) == Catch::Approx(flat.at(ch * 16 + i)));
}

TEST_CASE("channel_self_update closed forms and bound") {
  // W_a = 0 is the identity.
  auto sub = rand_t({4, 5}, 7);
  auto out = channel_self_update(sub, Td::zeros({4, 4}));
  for (int i = 0; i < sub.size(); ++i) CHECK(out.at(i) == sub.at(i));

  // C=1: (1 + tanh(0.5 * 2)) * 2 = 3.52319.
  auto y = channel_self_update(Td::from({1, 1}, {2.0}), Td::from({1, 1}, {0.5}));
  CHECK(y.at(0) == Catch::Approx(3.52319).margin(1e-5));

  // |out| <= 2|in| elementwise.
  auto big = rand_t({6, 9}, 8, -3, 3);
  auto wa = rand_t({6, 6}, 9);
  auto bounded = channel_self_update(big, wa);
  for (int i = 0; i < big.size(); ++i)
    CHECK(std::abs(bounded.at(i)) <= 2.0 * std::abs(big.at(i)) + 1e-12);
}

TEST_CASE("connectivity map: zero query projection gives 0.5 everywhere") {
  auto phi = connectivity_map(Td::zeros({16, 8}), rand_t({8, 6}, 10), 4, 4);
  CHECK(phi.shape() == Shape{6, 4, 4});
  for (int i = 0; i < phi.size(); ++i) CHECK(phi.at(i) == 0.5);

  auto phi2 = connectivity_map(rand_t({16, 8}, 11), rand_t({8, 6}, 12), 4, 4);
  for (int i = 0; i < phi2.size(); ++i) {
    CHECK(phi2.at(i) > 0.0);
    CHECK(phi2.at(i) < 1.0);
  }
}

TEST_CASE("psi reshape round-trips the product matrix") {
  const int hw = 12, n = 5;
  auto prod = rand_t({hw, n}, 13);
  auto psi = transpose(prod).reshaped({n, 3, 4});
  // Inverse: flatten N x HW then transpose back.
  auto back = transpose(psi.reshaped({n, hw}));
  for (int i = 0; i < prod.size(); ++i) CHECK(back.at(i) == prod.at(i));
}

TEST_CASE("decode_prediction: zero head yields 0.5 maps; fg+bg == 1 exactly") {
  auto cfg = toy_model_config();
  auto p = toy_smd(14);
  p.head_w = Td::zeros({1, cfg.channels});
  p.head_b = Td::zeros({1});
  auto phi = rand_t({cfg.subgraph_nodes, 4, 4}, 15, 0.1, 0.9);
  auto qn = rand_t({cfg.channels, 4, 4}, 16);
  auto pred = decode_prediction(phi, qn, p, 16, 16);
  for (int i = 0; i < pred.fg.size(); ++i) {
    CHECK(pred.fg.at(i) == 0.5);
    CHECK(pred.bg.at(i) == 0.5);
  }

  auto p2 = toy_smd(17);
  auto pred2 = decode_prediction(phi, qn, p2, 16, 16);
  for (int i = 0; i < pred2.fg.size(); ++i) {
    REQUIRE(pred2.fg.at(i) + pred2.bg.at(i) == 1.0);  // exact identity
    CHECK(pred2.fg.at(i) > 0.0);
    CHECK(pred2.fg.at(i) < 1.0);
  }
  CHECK(pred2.binary.h == 16);
  CHECK(pred2.binary.w == 16);
}

TEST_CASE("aggregate_kshot: identity, idempotence, linearity, permutation invariance") {
  auto a = rand_t({3, 4}, 18);
  auto one = aggregate_kshot<double>({a});
  for (int i = 0; i < a.size(); ++i) CHECK(one.at(i) == a.at(i));

  auto twin = aggregate_kshot<double>({a, a});
  for (int i = 0; i < a.size(); ++i) CHECK(twin.at(i) == Catch::Approx(a.at(i)).margin(1e-15));

  auto z = Td::zeros({3, 4});
  auto halved = aggregate_kshot<double>({z, a});
  for (int i = 0; i < a.size(); ++i) CHECK(halved.at(i) == Catch::Approx(a.at(i) / 2).margin(1e-15));

  auto b = rand_t({3, 4}, 19);
  auto c = rand_t({3, 4}, 20);
  auto fwd = aggregate_kshot<double>({a, b, c});
  auto rev = aggregate_kshot<double>({c, a, b});
  for (int i = 0; i < a.size(); ++i) CHECK(fwd.at(i) == Catch::Approx(rev.at(i)).margin(1e-15));

  CHECK_THROWS_AS(aggregate_kshot<double>({}), ArgError);
}

TEST_CASE("prototypical baseline closed forms") {
  const int c = 4, h = 2, w = 2;
  // Support: constant nodes inside the mask -> prototype equals that constant.
  auto support = Td::full({c, h, w}, 0.75);
  Mask m = Mask::zeros(4, 4);
  for (auto& v : m.v) v = 1;

  // Query node equal to the prototype: cos = 1 -> fg = sigmoid(10).
  auto query = Td::full({c, h, w}, 0.75);
  auto pred = prototypical_baseline(support, m, query, 4, 4);
  for (int i = 0; i < pred.fg.size(); ++i)
    CHECK(pred.fg.at(i) == Catch::Approx(1.0 / (1.0 + std::exp(-10.0))).margin(1e-9));

  // Orthogonal query node: cos = 0... build explicit orthogonal vectors.
  std::vector<double> sv(c * h * w, 0.0), qv(c * h * w, 0.0);
  for (int i = 0; i < h * w; ++i) {
    sv[static_cast<std::size_t>(0 * h * w + i)] = 1.0;  // prototype along channel 0
    qv[static_cast<std::size_t>(1 * h * w + i)] = 1.0;  // query along channel 1
  }
  auto pred2 = prototypical_baseline(Td::from({c, h, w}, sv), m, Td::from({c, h, w}, qv), 4, 4);
  for (int i = 0; i < pred2.fg.size(); ++i)
    CHECK(pred2.fg.at(i) == Catch::Approx(1.0 / (1.0 + std::exp(10.0))).margin(1e-9));

  Mask empty = Mask::zeros(4, 4);
  CHECK_THROWS_AS(prototypical_baseline(support, empty, query, 4, 4), EpisodeSkip);
}

TEST_CASE("smd pipeline gradcheck") {
  CHECK(smd_gradcheck(99) < 1e-4);
}
