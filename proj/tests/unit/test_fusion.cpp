#include "doctest.h"

#include <random>

#include "oracles.hpp"
#include "psla/errors.hpp"
#include "psla/fusion.hpp"

using namespace psla;

namespace {

TwoStreamFusionNet small_net(std::mt19937_64& rng, std::size_t C = 3) {
  auto net = TwoStreamFusionNet::make(C, rng, 8, 4);
  // randomise the head too, otherwise everything is 0.5
  net.head = ConvParams::uniform_init(4, 2, 3, rng);
  for (auto& b : net.head.bias.data()) b = std::uniform_real_distribution<float>(-1, 1)(rng);
  return net;
}

}  // namespace

TEST_CASE("zeroed head gives an even split") {
  std::mt19937_64 rng(1);
  const auto net = TwoStreamFusionNet::make(3, rng, 8, 4);
  const Tensor a = random_normal({3, 5, 5}, 1.0f, rng);
  const Tensor b = random_normal({3, 5, 5}, 1.0f, rng);
  const auto w = update_net_forward(a, b, net);
  for (float v : w.w_hat.data()) CHECK(v == 0.5f);
  for (float v : w.w.data()) CHECK(v == 0.5f);
}

TEST_CASE("head bias +10/-10 saturates toward the aligned stream") {
  std::mt19937_64 rng(2);
  auto net = TwoStreamFusionNet::make(3, rng, 8, 4);
  net.head.bias[0] = 10.0f;
  net.head.bias[1] = -10.0f;
  const auto w = update_net_forward(random_normal({3, 4, 4}, 1.0f, rng), random_normal({3, 4, 4}, 1.0f, rng), net);
  for (float v : w.w_hat.data()) CHECK(v > 0.9999f);
}

TEST_CASE("fusion weights form a two-way simplex") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto net = small_net(rng);
    const auto w = update_net_forward(random_normal({3, 6, 5}, 2.0f, rng), random_normal({3, 6, 5}, 2.0f, rng), net);
    REQUIRE(w.w_hat.shape() == Shape{1, 6, 5});
    for (std::size_t i = 0; i < w.w_hat.size(); ++i) {
      CHECK(std::abs(w.w_hat[i] + w.w[i] - 1.0f) <= 1e-6f);
      CHECK(w.w_hat[i] >= 0.0f);
      CHECK(w.w_hat[i] <= 1.0f);
    }
  }
}

TEST_CASE("fuse examples and elementwise oracle") {
  std::mt19937_64 rng(4);
  const Tensor a = random_normal({3, 4, 4}, 1.0f, rng);
  const Tensor b = random_normal({3, 4, 4}, 1.0f, rng);
  const FusionWeights ones{Tensor({1, 4, 4}, 1.0f), Tensor({1, 4, 4}, 0.0f)};
  CHECK(fuse(ones, a, b) == a);
  const FusionWeights half{Tensor({1, 4, 4}, 0.5f), Tensor({1, 4, 4}, 0.5f)};
  const Tensor mean = fuse(half, a, b);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(mean[i] == doctest::Approx(0.5f * (a[i] + b[i])));

  const auto net = small_net(rng);
  const Tensor fused = fuse(update_net_forward(a, b, net), a, b);
  CHECK(max_abs_diff(fused, oracle::two_stream_fuse(a, b, net)) < 1e-6f);
}

TEST_CASE("swapping streams and head channels mirrors the weights") {
  std::mt19937_64 rng(5);
  auto net = small_net(rng);
  const Tensor a = random_normal({3, 5, 5}, 1.0f, rng);
  const Tensor b = random_normal({3, 5, 5}, 1.0f, rng);
  auto mirrored = net;
  for (std::size_t o = 0; o < mirrored.reduce.out_channels; ++o)
    for (std::size_t c = 0; c < 3; ++c) {
      mirrored.reduce.weight(o, c, 0, 0) = net.reduce.weight(o, c + 3, 0, 0);
      mirrored.reduce.weight(o, c + 3, 0, 0) = net.reduce.weight(o, c, 0, 0);
    }
  for (std::size_t i = 0; i < net.hidden.out_channels; ++i)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        mirrored.head.weight(0, i, ky, kx) = net.head.weight(1, i, ky, kx);
        mirrored.head.weight(1, i, ky, kx) = net.head.weight(0, i, ky, kx);
      }
  std::swap(mirrored.head.bias[0], mirrored.head.bias[1]);
  const auto w1 = update_net_forward(a, b, net);
  const auto w2 = update_net_forward(b, a, mirrored);
  CHECK(max_abs_diff(w1.w_hat, w2.w) < 1e-6f);
}

TEST_CASE("transform net: zero in, zero biases, zero out") {
  std::mt19937_64 rng(6);
  const auto net = TransformNet::make(4, 6, rng, 5, 7);
  const Tensor out = transform_net_forward(Tensor::feature_map(4, 5, 5), net);
  CHECK(out.shape() == Shape{6, 5, 5});
  for (float v : out.data()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(transform_net_forward(Tensor::feature_map(3, 5, 5), net), ConfigError);
}

TEST_CASE("quality net examples") {
  std::mt19937_64 rng(7);
  const Tensor p = random_normal({3, 5, 5}, 1.0f, rng);
  const Tensor e = random_normal({3, 5, 5}, 1.0f, rng);
  auto net = TwoStreamFusionNet::make(3, rng, 8, 4);
  const Tensor mean = quality_net_forward(p, e, net);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(mean[i] == doctest::Approx(0.5f * (p[i] + e[i])));
  net.head.bias[0] = 100.0f;
  net.head.bias[1] = -100.0f;
  CHECK(max_abs_diff(quality_net_forward(p, e, net), p) == 0.0f);

  const auto rnet = small_net(rng);
  const Tensor q = quality_net_forward(p, e, rnet);
  CHECK(max_abs_diff(q, fuse(update_net_forward(p, e, rnet), p, e)) == 0.0f);
  CHECK_THROWS_AS(quality_net_forward(p, random_normal({3, 4, 5}, 1.0f, rng), rnet), ConfigError);
  CHECK_THROWS_AS(update_net_forward(p, random_normal({2, 5, 5}, 1.0f, rng), rnet), ConfigError);
}

TEST_CASE("closed-form parameter counts") {
  std::mt19937_64 rng(8);
  CHECK(param_count(EmbeddingPair::make(1024, 256, rng)) == 524800);
  CHECK(param_count(TwoStreamFusionNet::make(1024, rng)) == 561714);
  CHECK(param_count(EmbeddingPair::identity()) == 0);
  CHECK(param_count(std::span<const ConvParams>{}) == 0);
  const auto t = TransformNet::make(1024, 1024, rng);
  CHECK(param_count(t) == (1024 * 256 + 256) + (256 * 256 * 9 + 256) + (256 * 1024 * 9 + 1024));
}
