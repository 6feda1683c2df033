// SPDX-License-Identifier: Apache-2.0
#include "rar/eval.hpp"

#include <cmath>
#include <sstream>

#include "doctest.h"
#include "rar/permute.hpp"
#include "rar/sample.hpp"

using namespace rar;

namespace {

ModelParams<float> noisy_model(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  ModelParams<float> p = init_params<float>(cfg, rng);
  for (auto& ref : tensor_refs(p))
    for (float& v : ref.mat->data) v += static_cast<float>(rng.next_trunc_normal(0.05));
  return p;
}

double lse_row(const Mat<float>& logits, int row) {
  double m = logits.at(row, 0);
  for (int j = 1; j < logits.cols; ++j) m = std::max(m, static_cast<double>(logits.at(row, j)));
  double s = 0;
  for (int j = 0; j < logits.cols; ++j) s += std::exp(static_cast<double>(logits.at(row, j)) - m);
  return m + std::log(s);
}

GridSpec small_spec(int h, int w, int v, int c, uint64_t seed = 5) {
  return make_grid_spec(h, w, v, c, seed, 0.6, 0.8);
}

}  // namespace

TEST_CASE("model NLL matches a direct log-sum-exp of the logits") {
  ModelConfig cfg = preset_config("micro", 4, 6, 2);
  ModelParams<float> p = noisy_model(cfg, 3);
  Rng rng(10);
  std::vector<uint16_t> tokens(6);
  for (auto& t : tokens) t = static_cast<uint16_t>(rng.next_below(4));
  Permutation order = random_permutation(rng, 6);

  NllResult res = nll_under_order(p, tokens, 1, order);
  REQUIRE(res.per_step.size() == 6);

  auto permuted = apply_permutation(std::span<const uint16_t>(tokens), order);
  Mat<float> logits = forward(p, permuted, order, 1);
  double total = 0;
  for (int t = 0; t < 6; ++t) {
    double want = lse_row(logits, t) - static_cast<double>(logits.at(t, permuted[t]));
    CHECK(res.per_step[t] == doctest::Approx(want).epsilon(1e-12));
    total += want;
  }
  CHECK(res.total == doctest::Approx(total).epsilon(1e-12));
  CHECK(res.mean == doctest::Approx(total / 6).epsilon(1e-12));

  // The training loss is the same quantity averaged in float.
  ModelParams<float> grads = shaped_params<float>(cfg);
  float loss = loss_and_grad(p, std::span<const uint16_t>(tokens), order, 1, grads);
  CHECK(static_cast<double>(loss) == doctest::Approx(res.mean).epsilon(1e-5));

  std::vector<uint16_t> bad(5);
  CHECK_THROWS(nll_under_order(p, bad, 1, order));
}

TEST_CASE("oracle NLL telescopes to the joint likelihood") {
  GridSpec spec = small_spec(3, 3, 2, 2);
  PottsModel model(spec);
  REQUIRE(model.enumeration_available());

  Rng rng(77);
  for (int trial = 0; trial < 3; ++trial) {
    TokenGrid grid = model.sample(trial % 2, rng);
    for (const Permutation& order :
         {identity_perm(9), random_permutation(rng, 9), canonical_scan(ScanKind::spiral_in, 3, 3)}) {
      NllResult res = oracle_nll_under_order(model, grid, order);
      REQUIRE(res.per_step.size() == 9);
      double joint = model.log_prob(grid.label, grid.tokens);
      CHECK(res.total == doctest::Approx(-joint).epsilon(1e-9));
      CHECK(res.mean == doctest::Approx(-joint / 9).epsilon(1e-9));
      for (double s : res.per_step) CHECK(s >= -1e-12);
    }
  }
}

TEST_CASE("a fresh model scores exactly log V against the oracle") {
  GridSpec spec = small_spec(2, 3, 3, 2);
  PottsModel model(spec);
  DatasetShard shard = generate_shard(model, 6, 9, "data.eval");

  ModelConfig cfg = preset_config("micro", 3, 6, 2);
  Rng rng(4);
  ModelParams<float> p = init_params<float>(cfg, rng);  // zero head: uniform predictions
  GapReport rep = oracle_gap(p, model, shard.grids, identity_perm(6));
  CHECK(rep.grids == 6);
  CHECK(rep.model_nll == doctest::Approx(std::log(3.0)).epsilon(1e-6));
  CHECK(rep.gap == doctest::Approx(rep.model_nll - rep.oracle_nll).epsilon(1e-12));
  CHECK(rep.oracle_nll > 0);
  CHECK(rep.oracle_nll < std::log(3.0) + 1e-9);  // oracle is never beaten by uniform
}

TEST_CASE("the enumerated model distribution is a normalized likelihood table") {
  ModelConfig cfg = preset_config("micro", 2, 4, 1);
  ModelParams<float> p = noisy_model(cfg, 21);
  Permutation order = identity_perm(4);
  std::vector<double> dist = model_grid_distribution(p, 0, order);
  REQUIRE(dist.size() == 16);

  double sum = 0;
  for (double v : dist) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));

  // Flat index: raster cells as big-endian base-V digits.
  for (int idx : {0, 5, 15}) {
    std::vector<uint16_t> tokens(4);
    int rem = idx;
    for (int cell = 3; cell >= 0; --cell) {
      tokens[cell] = static_cast<uint16_t>(rem % 2);
      rem /= 2;
    }
    NllResult res = nll_under_order(p, tokens, 0, order);
    CHECK(dist[idx] == doctest::Approx(std::exp(-res.total)).epsilon(1e-9));
  }
}

TEST_CASE("total variation distance") {
  std::vector<double> a{1.0, 0.0};
  std::vector<double> b{0.0, 1.0};
  CHECK(total_variation(a, b) == doctest::Approx(1.0));
  CHECK(total_variation(a, a) == doctest::Approx(0.0));
  std::vector<double> c{0.5, 0.5};
  std::vector<double> d{0.25, 0.75};
  CHECK(total_variation(c, d) == doctest::Approx(0.25));
  std::vector<double> e{1.0};
  CHECK_THROWS(total_variation(a, e));
}

TEST_CASE("target embeddings resolve the ambiguous successor") {
  ProbeConfig cfg;
  cfg.steps = 600;
  ProbeReport rep = disambiguation_probe(cfg);
  // Without the target table both continuations look identical, so log 2 is
  // a floor no amount of training can beat.
  CHECK(rep.ambiguous_nll_without_targets > std::log(2.0) - 0.02);
  CHECK(rep.ambiguous_nll_with_targets < 0.45);
  CHECK(rep.ambiguous_nll_with_targets < rep.ambiguous_nll_without_targets);
}

TEST_CASE("the annealing sweep is deterministic") {
  GridSpec spec = small_spec(2, 2, 2, 1, 11);
  ModelConfig mc = preset_config("micro", 2, 4, 1);
  TrainConfig base;
  base.batch_size = 8;
  base.total_epochs = 2;
  base.warmup_epochs = 1;
  base.seed = 1;

  std::vector<std::pair<int, int>> schedules{{0, 2}};
  std::vector<uint64_t> seeds{4};
  std::ostringstream progress;
  auto run = [&]() {
    return sweep_annealing(spec, mc, base, schedules, seeds, 32, 8, 1, &progress);
  };
  std::vector<SweepPoint> a = run();
  std::vector<SweepPoint> b = run();
  REQUIRE(a.size() == 1);
  CHECK(a[0].start_epoch == 0);
  CHECK(a[0].end_epoch == 2);
  CHECK(a[0].seed == 4);
  CHECK(std::isfinite(a[0].mean_nll));
  CHECK(a[0].gap == doctest::Approx(a[0].mean_nll - a[0].oracle_nll).epsilon(1e-12));
  CHECK(b[0].mean_nll == a[0].mean_nll);
  CHECK(b[0].oracle_nll == a[0].oracle_nll);
  CHECK(!progress.str().empty());
}
