#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "crae/methods.hpp"
#include "crae/runner.hpp"

using namespace crae;

namespace {

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.input_dim = 64;  // 8x8 images
  mc.backbone_widths = {12, 8};
  mc.num_classes = 3;
  mc.proj_dim = 4;
  mc.head_hidden = 5;
  return mc;
}

struct TinyBench {
  Split split;
  ModelConfig model;
  TrainConfig train;
};

TinyBench tiny_bench(std::uint64_t seed = 0) {
  TinyBench b;
  b.model = tiny_model();
  const auto templates = make_templates(3, 8, 8, seed);
  const auto examples = generate_dataset(templates, 12, 0.02, 1, seed);
  b.split = split_dataset(examples, 6, 9, seed);
  b.train.batch_size = 3;
  b.train.epochs = 2;
  b.train.seed = seed;
  return b;
}

std::vector<Example> take(const std::vector<Example>& v, std::size_t n) {
  return std::vector<Example>(v.begin(), v.begin() + n);
}

Tensor rows(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  return Tensor({r, c}, std::move(v), grad);
}

double grad_norm(const Tensor& t) {
  double acc = 0.0;
  for (double g : t.grad()) acc += g * g;
  return std::sqrt(acc);
}

// Model with all-zero weights and biases: every distribution it produces is
// uniform, which pins the cross-entropies to exact logs.
ModelParameters uniform_model(const ModelConfig& mc) {
  ModelParameters p = init_params(mc, 0);
  for (const auto& [name, tensor] : p.named_parameters()) {
    Tensor t = tensor;
    std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
  }
  return p;
}

std::vector<Tensor> random_heads(std::size_t b, std::size_t c, std::size_t k, Rng& rng) {
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < c; ++h) {
    std::vector<double> v;
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<double> row(k);
      double sum = 0.0;
      for (double& x : row) {
        x = 0.05 + rng.uniform();
        sum += x;
      }
      for (double x : row) v.push_back(x / sum);
    }
    heads.push_back(rows(b, k, std::move(v)));
  }
  return heads;
}

}  // namespace

TEST_CASE("marginalize selects exactly with one-hot weights") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 3, c = 4, k = 4;
    auto heads = random_heads(b, c, k, rng);
    const std::size_t pick = rng.uniform_int(static_cast<int>(c));
    std::vector<double> w(b * c, 0.0);
    for (std::size_t i = 0; i < b; ++i) w[i * c + pick] = 1.0;
    const Tensor out = marginalize(heads, rows(b, c, std::move(w)));
    CHECK(out.values() == heads[pick].values());  // bitwise
  }
}

TEST_CASE("marginalize hand value, normalization property, and input validation") {
  std::vector<Tensor> heads = {rows(1, 4, {0.7, 0.1, 0.1, 0.1}),
                               rows(1, 4, {0.1, 0.7, 0.1, 0.1})};
  const Tensor out = marginalize(heads, rows(1, 2, {0.5, 0.5}));
  const std::vector<double> expected = {0.4, 0.4, 0.1, 0.1};
  for (int j = 0; j < 4; ++j)
    CHECK(out.values()[j] == doctest::Approx(expected[j]).epsilon(1e-14));

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 2, c = 3, k = 4;
    auto hs = random_heads(b, c, k, rng);
    std::vector<double> w;
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<double> row(c);
      double sum = 0.0;
      for (double& x : row) {
        x = rng.uniform() + 0.01;
        sum += x;
      }
      for (double x : row) w.push_back(x / sum);
    }
    const Tensor out2 = marginalize(hs, rows(b, c, std::move(w)));
    for (std::size_t i = 0; i < b; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) sum += out2.values()[i * k + j];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }

  CHECK_THROWS_AS(marginalize(heads, rows(1, 2, {0.9, 0.2})), std::invalid_argument);
  CHECK_THROWS_AS(marginalize({rows(1, 4, {2.0, -1.0, 0.0, 0.0})}, rows(1, 1, {1.0})),
                  std::invalid_argument);
}

TEST_CASE("marginalize routes gradient into both heads and weights") {
  std::vector<Tensor> heads = {rows(1, 2, {0.8, 0.2}, true), rows(1, 2, {0.3, 0.7}, true)};
  Tensor weights = rows(1, 2, {0.6, 0.4}, true);
  Tape tape;
  tape.backward(reduce_sum(mul(marginalize(heads, weights), rows(1, 2, {1.0, 2.0}))));
  CHECK(heads[0].grad()[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(heads[0].grad()[1] == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(heads[1].grad()[0] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(heads[1].grad()[1] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(weights.grad()[0] == doctest::Approx(0.8 + 2 * 0.2).epsilon(1e-12));
  CHECK(weights.grad()[1] == doctest::Approx(0.3 + 2 * 0.7).epsilon(1e-12));
}

TEST_CASE("sharpen examples and properties") {
  const std::vector<double> p = {0.3, 0.5, 0.2};
  const auto same = sharpen(p, 1.0);
  for (int i = 0; i < 3; ++i) CHECK(same[i] == doctest::Approx(p[i]).epsilon(1e-14));

  const std::vector<double> onehot = {0.0, 1.0, 0.0};
  CHECK(sharpen(onehot, 0.25) == onehot);

  const auto sharp = sharpen({0.6, 0.4}, 0.5);
  CHECK(sharp[0] == doctest::Approx(9.0 / 13.0).epsilon(1e-13));
  CHECK(sharp[1] == doctest::Approx(4.0 / 13.0).epsilon(1e-13));

  CHECK_THROWS_AS(sharpen(p, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(sharpen(p, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(sharpen({0.5, 0.6}, 0.5), std::invalid_argument);

  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + trial % 4;
    std::vector<double> dist(k);
    double sum = 0.0;
    for (double& v : dist) {
      v = rng.uniform() + 1e-3;
      sum += v;
    }
    for (double& v : dist) v /= sum;
    const auto out = sharpen(dist, 0.5);
    const auto arg = [](const std::vector<double>& v) {
      return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
    };
    CHECK(*std::max_element(out.begin(), out.end()) >=
          *std::max_element(dist.begin(), dist.end()) - 1e-12);
    CHECK(arg(out) == arg(dist));
    const double total = std::accumulate(out.begin(), out.end(), 0.0);
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("sharpen_target averages the four rotated predictions") {
  const std::vector<std::vector<double>> quad = {
      {0.7, 0.3}, {0.5, 0.5}, {0.6, 0.4}, {0.6, 0.4}};
  const auto target = sharpen_target(quad, 1.0);
  CHECK(target[0] == doctest::Approx(0.6).epsilon(1e-13));
  CHECK(target[1] == doctest::Approx(0.4).epsilon(1e-13));
  CHECK_THROWS_AS(sharpen_target({{0.5, 0.5}}, 1.0), std::invalid_argument);
}

TEST_CASE("baseline_weights per method") {
  Rng rng(21);
  Tensor p_y = rows(4, 3, {0.5, 0.3, 0.2, 0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.25, 0.5, 0.25});

  auto crae_w = baseline_weights(Method::kCrae, p_y, rng);
  REQUIRE(crae_w.has_value());
  CHECK(crae_w->values() == p_y.values());

  auto detach_w = baseline_weights(Method::kCraeDetach, p_y, rng);
  REQUIRE(detach_w.has_value());
  CHECK(detach_w->values() == p_y.values());
  CHECK_FALSE(detach_w->requires_grad());

  auto random_w = baseline_weights(Method::kEnsembleRandom, p_y, rng);
  REQUIRE(random_w.has_value());
  for (std::size_t i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      const double v = random_w->values()[i * 3 + j];
      CHECK((v == 0.0 || v == 1.0));
      sum += v;
    }
    CHECK(sum == 1.0);
  }

  CHECK_FALSE(baseline_weights(Method::kEnsembleIndependent, p_y, rng).has_value());
  CHECK_THROWS_AS(baseline_weights(Method::kLabeledOnly, p_y, rng), std::invalid_argument);
}

TEST_CASE("crae losses on the uniform model hit the exact log values") {
  TinyBench bench = tiny_bench(1);
  const ModelParameters params = uniform_model(bench.model);
  const auto labeled = take(bench.split.labeled, 3);
  const auto unlabeled = take(bench.split.unlabeled, 3);

  const BatchLoss loss = crae_batch_losses(params, labeled, unlabeled, bench.train);
  CHECK(loss.parts.supervised_ce == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(loss.parts.rotation_ce == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(loss.parts.aux_ce == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(loss.parts.sharpen_ce == 0.0);
  CHECK(loss.parts.total ==
        doctest::Approx(2 * std::log(3.0) + std::log(4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(crae_batch_losses(params, {}, unlabeled, bench.train), std::invalid_argument);
}

TEST_CASE("crae_plus on the uniform model: sharpening a uniform stays uniform") {
  TinyBench bench = tiny_bench(2);
  const ModelParameters params = uniform_model(bench.model);
  Rng rng(0);
  const BatchLoss loss = craeplus_batch_losses(params, take(bench.split.labeled, 3),
                                               take(bench.split.unlabeled, 3), bench.train, rng,
                                               1.0);
  CHECK(loss.parts.sharpen_ce == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(loss.parts.rotation_ce == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("eta 0 reduces crae to the labeled and auxiliary terms") {
  TinyBench bench = tiny_bench(3);
  bench.train.eta = 0.0;
  const ModelParameters params = init_params(bench.model, 17);
  const BatchLoss loss = crae_batch_losses(params, take(bench.split.labeled, 3),
                                           take(bench.split.unlabeled, 3), bench.train);
  CHECK(loss.parts.total ==
        doctest::Approx(loss.parts.supervised_ce + loss.parts.aux_ce).epsilon(1e-12));
}

TEST_CASE("every method's total recomposes from its parts") {
  TinyBench bench = tiny_bench(4);
  const ModelParameters params = init_params(bench.model, 23);
  const auto labeled = take(bench.split.labeled, 3);
  const auto unlabeled = take(bench.split.unlabeled, 3);
  const double ramp = 0.625;

  for (Method m : kAllMethods) {
    Rng rng(77);
    const BatchLoss loss =
        method_batch_losses(m, params, labeled, unlabeled, bench.train, rng, ramp);
    double expected = 0.0;
    switch (m) {
      case Method::kLabeledOnly:
      case Method::kRotAugSupervised:
        expected = loss.parts.supervised_ce;
        break;
      case Method::kSharpenOnly:
        expected = loss.parts.supervised_ce + ramp * bench.train.eta2 * loss.parts.sharpen_ce +
                   loss.parts.aux_ce;
        break;
      case Method::kFineTune:
        expected = loss.parts.supervised_ce;  // non-pretext stage
        break;
      case Method::kS4L:
      case Method::kCrae:
      case Method::kEnsembleRandom:
      case Method::kEnsembleIndependent:
      case Method::kCraeDetach:
        expected = loss.parts.supervised_ce + bench.train.eta * loss.parts.rotation_ce +
                   loss.parts.aux_ce;
        break;
      case Method::kCraePlus:
        expected = loss.parts.supervised_ce + bench.train.eta1 * loss.parts.rotation_ce +
                   ramp * bench.train.eta2 * loss.parts.sharpen_ce + loss.parts.aux_ce;
        break;
    }
    CHECK(loss.parts.total == doctest::Approx(expected).epsilon(1e-12));
  }

  // fine_tune's pretext stage is a pure rotation loss.
  Rng rng(77);
  const BatchLoss pretext = method_batch_losses(Method::kFineTune, params, labeled, unlabeled,
                                                bench.train, rng, ramp, /*pretext_stage=*/true);
  CHECK(pretext.parts.total == doctest::Approx(pretext.parts.rotation_ce).epsilon(1e-12));
  CHECK(pretext.parts.supervised_ce == 0.0);
}

TEST_CASE("crae_plus with alpha pinned to 1 and T 1 matches crae's rotation term") {
  TinyBench bench = tiny_bench(5);
  bench.train.alpha_min = 1.0;
  bench.train.alpha_max = 1.0;
  bench.train.temperature = 1.0;
  const auto labeled = take(bench.split.labeled, 3);
  const auto unlabeled = take(bench.split.unlabeled, 3);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ModelParameters params = init_params(bench.model, 100 + s);
    Rng rng(s);
    const BatchLoss plus =
        craeplus_batch_losses(params, labeled, unlabeled, bench.train, rng, 1.0);
    const BatchLoss base = crae_batch_losses(params, labeled, unlabeled, bench.train);
    CHECK(plus.parts.rotation_ce == doctest::Approx(base.parts.rotation_ce).epsilon(1e-12));
  }
}

TEST_CASE("ensemble_independent trains every head on every sample") {
  TinyBench bench = tiny_bench(6);
  const ModelParameters params = init_params(bench.model, 31);
  const auto unlabeled = take(bench.split.unlabeled, 4);
  Rng rng(1);
  const Tensor loss =
      unlabeled_rotation_loss(Method::kEnsembleIndependent, params, unlabeled, bench.train, rng);

  // Oracle: mean over heads of the cross-entropy, recomputed from raw values.
  std::vector<Image> images;
  std::vector<int> angles;
  for (const Example& e : unlabeled)
    for (const RotatedExample& r : rotation_quadruple(e)) {
      images.push_back(r.image);
      angles.push_back(r.angle_index);
    }
  const ForwardOutput fwd = forward(params, images_to_tensor(images));
  const int C = bench.model.num_classes;
  double expected = 0.0;
  for (int k = 0; k < C; ++k) {
    double ce = 0.0;
    for (std::size_t r = 0; r < images.size(); ++r)
      ce -= std::log(std::max(fwd.head_dists[k].values()[r * 4 + angles[r]], 1e-12));
    expected += ce / static_cast<double>(images.size());
  }
  expected /= static_cast<double>(C);
  CHECK(loss.scalar() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("crae with an empty unlabeled batch reduces to exact head selection") {
  TinyBench bench = tiny_bench(7);
  const ModelParameters params = init_params(bench.model, 37);
  const auto labeled = take(bench.split.labeled, 4);
  const BatchLoss loss = crae_batch_losses(params, labeled, {}, bench.train);

  // Oracle: pick the ground-truth head per rotated copy and average the CE.
  std::vector<Image> images;
  std::vector<int> angles, labels;
  for (const Example& e : labeled)
    for (const RotatedExample& r : rotation_quadruple(e)) {
      images.push_back(r.image);
      angles.push_back(r.angle_index);
      labels.push_back(e.label);
    }
  const ForwardOutput fwd = forward(params, images_to_tensor(images));
  double expected = 0.0;
  for (std::size_t r = 0; r < images.size(); ++r)
    expected -= std::log(std::max(fwd.head_dists[labels[r]].values()[r * 4 + angles[r]], 1e-12));
  expected /= static_cast<double>(images.size());
  CHECK(loss.parts.rotation_ce == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("gradient flow: unlabeled rotation loss and the semantic head") {
  TinyBench bench = tiny_bench(8);
  const auto unlabeled = take(bench.split.unlabeled, 4);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const ModelParameters params = init_params(bench.model, 200 + s);
    auto semantic_grad_norm = [&](Method m) {
      Rng rng(s);
      Tape tape;
      Tensor loss = unlabeled_rotation_loss(m, params, unlabeled, bench.train, rng);
      tape.backward(loss);
      const double norm =
          std::hypot(grad_norm(params.semantic_head.weight), grad_norm(params.semantic_head.bias));
      zero_grads(params.all_parameters());
      return norm;
    };
    CHECK(semantic_grad_norm(Method::kS4L) == 0.0);
    CHECK(semantic_grad_norm(Method::kCraeDetach) == 0.0);
    CHECK(semantic_grad_norm(Method::kCrae) > 1e-8);
  }
}

TEST_CASE("sharpened targets are constants: gradient matches the frozen-target derivative") {
  // d(sharpen_ce)/d(semantic head) must equal the finite difference taken
  // with the target distribution frozen at the base point, not recomputed.
  TinyBench bench = tiny_bench(9);
  const ModelParameters params = init_params(bench.model, 41);
  const auto unlabeled = take(bench.split.unlabeled, 2);

  std::vector<Image> images;
  for (const Example& e : unlabeled)
    for (const RotatedExample& r : rotation_quadruple(e)) images.push_back(r.image);
  const Tensor batch = images_to_tensor(images);
  const int C = bench.model.num_classes;

  auto sharpen_ce_as_implemented = [&](const ModelParameters& p) {
    // Reassembles the crae_plus sharpen term: targets recomputed from the
    // current parameters, gradient-stopped by construction.
    const ForwardOutput fwd = forward(p, batch);
    std::vector<double> target_rows;
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
      std::vector<std::vector<double>> quad(4, std::vector<double>(C));
      for (int z = 0; z < 4; ++z)
        for (int j = 0; j < C; ++j)
          quad[z][j] = fwd.p_y.values()[(i * 4 + z) * C + j];
      const auto t = sharpen_target(quad, bench.train.temperature);
      for (int z = 0; z < 4; ++z) target_rows.insert(target_rows.end(), t.begin(), t.end());
    }
    return cross_entropy(fwd.p_y, Tensor({images.size(), static_cast<std::size_t>(C)},
                                         std::move(target_rows)));
  };

  // Autodiff gradient of one semantic-head weight.
  double analytic = 0.0;
  {
    Tape tape;
    tape.backward(sharpen_ce_as_implemented(params));
    analytic = params.semantic_head.weight.grad()[0];
    zero_grads(params.all_parameters());
  }

  // Frozen-target finite difference on the same coordinate.
  const ForwardOutput base = forward(params, batch);
  std::vector<double> frozen_rows;
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    std::vector<std::vector<double>> quad(4, std::vector<double>(C));
    for (int z = 0; z < 4; ++z)
      for (int j = 0; j < C; ++j) quad[z][j] = base.p_y.values()[(i * 4 + z) * C + j];
    const auto t = sharpen_target(quad, bench.train.temperature);
    for (int z = 0; z < 4; ++z) frozen_rows.insert(frozen_rows.end(), t.begin(), t.end());
  }
  const Tensor frozen_target({images.size(), static_cast<std::size_t>(C)},
                             std::move(frozen_rows));

  auto frozen_eval = [&](double delta) {
    ModelParameters probe = params;
    Tensor w(probe.semantic_head.weight.shape(), probe.semantic_head.weight.values());
    w.mutable_values()[0] += delta;
    probe.semantic_head = AffineLayer{w, probe.semantic_head.bias};
    return cross_entropy(forward(probe, batch).p_y, frozen_target).scalar();
  };
  const double h = 1e-6;
  const double numeric = (frozen_eval(h) - frozen_eval(-h)) / (2 * h);
  CHECK(analytic == doctest::Approx(numeric).epsilon(1e-5));
}

TEST_CASE("train returns the initial parameters when epochs is zero") {
  TinyBench bench = tiny_bench(10);
  bench.train.epochs = 0;
  const TrainResult result = train(Method::kCrae, bench.split, bench.model, bench.train);
  CHECK(result.metrics.empty());
  const ModelParameters fresh = init_params(bench.model, mix_seed(bench.train.seed, 0x6d6431u));
  CHECK(result.params.backbone[0].weight.values() == fresh.backbone[0].weight.values());
}

TEST_CASE("train is deterministic in the full config") {
  TinyBench bench = tiny_bench(11);
  bench.train.epochs = 2;
  for (Method m : {Method::kCrae, Method::kCraePlus, Method::kS4L, Method::kFineTune}) {
    const TrainResult a = train(m, bench.split, bench.model, bench.train);
    const TrainResult b = train(m, bench.split, bench.model, bench.train);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
      CHECK(a.metrics[i].total == b.metrics[i].total);
      CHECK(a.metrics[i].test_error == b.metrics[i].test_error);
      CHECK(a.metrics[i].diagonality == b.metrics[i].diagonality);
    }
    const auto pa = a.params.named_parameters();
    const auto pb = b.params.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
      CHECK(pa[i].second.values() == pb[i].second.values());
  }
}

TEST_CASE("method names round trip and reject unknowns") {
  for (Method m : kAllMethods) CHECK(method_from_name(method_name(m)) == m);
  CHECK_THROWS_AS(method_from_name("mixmatch"), std::invalid_argument);
}

TEST_CASE("independent runs in parallel match sequential runs") {
  TinyBench bench = tiny_bench(12);
  bench.train.epochs = 1;
  TrainConfig tc_a = bench.train;
  tc_a.seed = 100;
  TrainConfig tc_b = bench.train;
  tc_b.seed = 200;

  const TrainResult seq_a = train(Method::kCrae, bench.split, bench.model, tc_a);
  const TrainResult seq_b = train(Method::kS4L, bench.split, bench.model, tc_b);

  TrainResult par_a, par_b;
  std::thread ta([&] { par_a = train(Method::kCrae, bench.split, bench.model, tc_a); });
  std::thread tb([&] { par_b = train(Method::kS4L, bench.split, bench.model, tc_b); });
  ta.join();
  tb.join();

  CHECK(par_a.metrics.back().total == seq_a.metrics.back().total);
  CHECK(par_b.metrics.back().total == seq_b.metrics.back().total);
  CHECK(par_a.params.semantic_head.weight.values() ==
        seq_a.params.semantic_head.weight.values());
  CHECK(par_b.params.semantic_head.weight.values() ==
        seq_b.params.semantic_head.weight.values());
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.temperature = 0.0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.alpha_min = 0.3;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.momentum = 1.0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  CHECK_NOTHROW(tc.validate());
}
