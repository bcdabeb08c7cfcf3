#include "doctest.h"

#include <cmath>
#include <map>

#include "psla/errors.hpp"
#include "psla/training.hpp"

using namespace psla;

TEST_CASE("sample_triplet windows") {
  std::mt19937_64 rng(1);
  for (int n = 0; n < 500; ++n) {
    const auto t = sample_triplet(20, 10, 100, rng);
    CHECK(t.i == 20);
    CHECK(t.k1 >= 10);
    CHECK(t.k1 <= 15);
    CHECK(t.k2 >= 15);
    CHECK(t.k2 <= 25);
  }
  for (int n = 0; n < 100; ++n) {
    const auto t = sample_triplet(0, 10, 100, rng);
    CHECK(t.k1 == 0);
    CHECK(t.k2 <= 5);
  }
  const auto end = sample_triplet(99, 10, 100, rng);
  CHECK(end.k2 <= 99);
  CHECK_THROWS_AS(sample_triplet(100, 10, 100, rng), InvalidInputError);
  CHECK_THROWS_AS(sample_triplet(5, 0, 100, rng), InvalidInputError);
}

TEST_CASE("sample_triplet is uniform over each window") {
  std::mt19937_64 rng(2);
  const int n = 10000;
  std::map<std::size_t, int> k1, k2;
  for (int s = 0; s < n; ++s) {
    const auto t = sample_triplet(20, 10, 100, rng);
    ++k1[t.k1];
    ++k2[t.k2];
  }
  auto chi2 = [&](const std::map<std::size_t, int>& counts, std::size_t lo, std::size_t hi) {
    const double expected = double(n) / double(hi - lo + 1);
    double stat = 0.0;
    for (std::size_t v = lo; v <= hi; ++v) {
      const double o = counts.count(v) ? counts.at(v) : 0;
      stat += (o - expected) * (o - expected) / expected;
    }
    return stat;
  };
  // 3 sigma above the mean of chi-square with k-1 degrees of freedom
  const double df1 = 5, df2 = 10;
  CHECK(k1.size() == 6);
  CHECK(k2.size() == 11);
  CHECK(chi2(k1, 10, 15) < df1 + 3 * std::sqrt(2 * df1));
  CHECK(chi2(k2, 15, 25) < df2 + 3 * std::sqrt(2 * df2));
}

namespace {

ToyTaskConfig quick(std::size_t steps) {
  ToyTaskConfig c;
  c.steps = steps;
  c.train_videos = 3;
  c.heldout_videos = 2;
  c.monitor_triplets = 4;
  c.heldout_triplets = 4;
  return c;
}

}  // namespace

TEST_CASE("learning rate zero keeps the loss curve flat") {
  auto c = quick(6);
  c.learning_rate = 0.0f;
  const auto r = train_toy(c);
  REQUIRE(r.loss_curve.size() == 7);
  for (double v : r.loss_curve) CHECK(v == r.loss_curve.front());
}

TEST_CASE("tape forward equals the pure forward in every mode") {
  for (const auto mode : {Mode::Full, Mode::Propagate, Mode::LowOnly}) {
    auto c = quick(1);
    c.pipeline.mode = mode;
    std::mt19937_64 rng(3);
    const auto model = ToyModel::make(c.pipeline, rng);
    const auto data = make_toy_dataset(c, 1, 3, 4);
    for (const auto& [v, t] : data.triplets) {
      GradTape tape;
      const auto vars = bind(tape, model);
      const auto g = toy_forward(tape, vars, model, data.videos[v], t);
      CHECK(max_abs_diff(tape.value(g.prediction), toy_predict(model, data.videos[v], t)) < 1e-5f);
    }
  }
}

TEST_CASE("stop-gradient on the transform input") {
  auto c = quick(1);
  std::mt19937_64 rng(5);
  const auto data = make_toy_dataset(c, 1, 1, 6);
  const auto& [v, t] = data.triplets.front();
  auto grad_norm = [&](bool stop) {
    auto cfg = c.pipeline;
    cfg.stop_transform_gradient = stop;
    std::mt19937_64 r(7);
    const auto model = ToyModel::make(cfg, r);
    GradTape tape;
    const auto vars = bind(tape, model);
    const auto g = toy_forward(tape, vars, model, data.videos[v], t, true);
    tape.backward(g.prediction, Tensor(tape.value(g.prediction).shape(), 1.0f));
    double sum = 0.0;
    if (tape.has_grad(g.low_input))
      for (float x : tape.grad(g.low_input).data()) sum += std::abs(x);
    return sum;
  };
  CHECK(grad_norm(true) == 0.0);
  CHECK(grad_norm(false) > 0.0);
}

TEST_CASE("non-finite loss raises a training error with the step") {
  auto c = quick(3);
  c.video.blob_amplitude = NAN;
  try {
    train_toy(c);
    FAIL("expected a training error");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 0);
  }
}

TEST_CASE("training is deterministic") {
  const auto a = train_toy(quick(5));
  const auto b = train_toy(quick(5));
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(a.heldout_loss == b.heldout_loss);
}

TEST_CASE("500 default steps at least halve the loss, and full beats low-only") {
  ToyTaskConfig c;
  const auto full = train_toy(c);
  MESSAGE("initial " << full.loss_curve.front() << " final " << full.loss_curve.back() << " heldout "
                     << full.heldout_loss);
  CHECK(full.loss_curve.back() < 0.5 * full.loss_curve.front());
  c.pipeline.mode = Mode::LowOnly;
  const auto low = train_toy(c);
  MESSAGE("low-only heldout " << low.heldout_loss);
  CHECK(full.heldout_loss < low.heldout_loss);
}
