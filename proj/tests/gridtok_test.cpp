// SPDX-License-Identifier: Apache-2.0
#include "rar/gridtok.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"

using namespace rar;

namespace {

// Line grid with hand-set tables; every quantity below is computable by
// hand: energy(x0, x1) = f[x0] + f[x1] + cpl[x0 * 2 + x1].
GridSpec hand_spec() {
  GridSpec spec;
  spec.height = 1;
  spec.width = 2;
  spec.vocab_size = 2;
  spec.num_classes = 1;
  spec.seed = 0;
  spec.field = {{0.3, -0.2}};
  spec.coupling = {{0.5, -0.1, -0.1, 0.4}};
  return spec;
}

double hand_energy(int x0, int x1) {
  const double f[2] = {0.3, -0.2};
  const double cpl[4] = {0.5, -0.1, -0.1, 0.4};
  return f[x0] + f[x1] + cpl[x0 * 2 + x1];
}

}  // namespace

TEST_CASE("grid spec validation") {
  GridSpec spec = hand_spec();
  CHECK_NOTHROW(spec.validate());
  GridSpec bad = spec;
  bad.vocab_size = 1;
  CHECK_THROWS(bad.validate());
  bad = spec;
  bad.field[0].push_back(0.0);
  CHECK_THROWS(bad.validate());
  bad = spec;
  bad.coupling[0].resize(3);
  CHECK_THROWS(bad.validate());
  bad = spec;
  bad.field[0][0] = std::nan("");
  CHECK_THROWS(bad.validate());
  bad = spec;
  bad.num_classes = 2;  // tables no longer match
  CHECK_THROWS(bad.validate());
}

TEST_CASE("make_grid_spec is deterministic and symmetric") {
  GridSpec a = make_grid_spec(3, 4, 5, 2, 42);
  GridSpec b = make_grid_spec(3, 4, 5, 2, 42);
  CHECK(a.canonical_json() == b.canonical_json());
  CHECK(a.fingerprint() == b.fingerprint());
  GridSpec c = make_grid_spec(3, 4, 5, 2, 43);
  CHECK(a.fingerprint() != c.fingerprint());

  for (int cls = 0; cls < 2; ++cls)
    for (int x = 0; x < 5; ++x)
      for (int y = 0; y < 5; ++y)
        CHECK(a.coupling[cls][x * 5 + y] == a.coupling[cls][y * 5 + x]);
}

TEST_CASE("grid spec JSON and file round-trip") {
  GridSpec a = make_grid_spec(2, 3, 3, 2, 7);
  GridSpec b = GridSpec::from_json_text(a.canonical_json());
  CHECK(a.canonical_json() == b.canonical_json());
  CHECK(a.fingerprint() == b.fingerprint());

  std::string dir = testutil::temp_dir("gridspec");
  std::string path = dir + "/spec.json";
  a.save(path);
  GridSpec c = GridSpec::load(path);
  CHECK(a.canonical_json() == c.canonical_json());

  CHECK_THROWS(GridSpec::from_json_text("not json"));
  CHECK_THROWS(GridSpec::from_json_text("{\"height\": 2}"));
  CHECK_THROWS(GridSpec::load(dir + "/missing.json"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("hand-computed partition function") {
  PottsModel model(hand_spec());
  REQUIRE(model.enumeration_available());
  REQUIRE(model.dp_available());

  double z = 0.0;
  for (int x0 = 0; x0 < 2; ++x0)
    for (int x1 = 0; x1 < 2; ++x1) z += std::exp(hand_energy(x0, x1));
  double log_z = std::log(z);

  CHECK(model.log_z_enumeration(0) == doctest::Approx(log_z).epsilon(1e-12));
  CHECK(model.log_z_dp(0) == doctest::Approx(log_z).epsilon(1e-12));

  std::vector<uint16_t> cfg{0, 1};
  CHECK(model.energy(0, cfg) == doctest::Approx(hand_energy(0, 1)).epsilon(1e-12));
  CHECK(model.log_prob(0, cfg) == doctest::Approx(hand_energy(0, 1) - log_z).epsilon(1e-12));

  // Probabilities over all configurations sum to one.
  double total = 0.0;
  for (int x0 = 0; x0 < 2; ++x0)
    for (int x1 = 0; x1 < 2; ++x1) {
      std::vector<uint16_t> x{uint16_t(x0), uint16_t(x1)};
      total += std::exp(model.log_prob(0, x));
    }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("hand-computed conditional") {
  PottsModel model(hand_spec());
  // p(x1 | x0 = 0) from the local factors directly.
  double w0 = std::exp(hand_energy(0, 0)), w1 = std::exp(hand_energy(0, 1));
  std::vector<int> cells{0};
  std::vector<uint16_t> values{0};
  auto cond = model.exact_conditional(0, cells, values, 1);
  REQUIRE(cond.size() == 2);
  CHECK(cond[0] == doctest::Approx(w0 / (w0 + w1)).epsilon(1e-12));
  CHECK(cond[1] == doctest::Approx(w1 / (w0 + w1)).epsilon(1e-12));

  std::vector<uint16_t> prefix{0};
  auto raster = model.raster_conditional(0, prefix);
  CHECK(raster[0] == doctest::Approx(cond[0]).epsilon(1e-12));
  CHECK(raster[1] == doctest::Approx(cond[1]).epsilon(1e-12));

  CHECK_THROWS(model.exact_conditional(0, cells, values, 0));  // target observed
  std::vector<int> twice{0, 0};
  std::vector<uint16_t> twice_v{0, 1};
  CHECK_THROWS(model.exact_conditional(0, twice, twice_v, 1));
}

TEST_CASE("enumeration and boundary DP agree") {
  // Random tables, both routes in range (2x3: 6 bits; 5x4: 20 bits, the
  // enumeration limit itself).
  for (auto [h, w, v, c, seed] : std::vector<std::array<int, 5>>{
           {2, 3, 2, 2, 1}, {2, 2, 4, 1, 2}, {3, 3, 2, 3, 3}, {5, 4, 2, 1, 4}}) {
    GridSpec spec = make_grid_spec(h, w, v, c, seed);
    PottsModel model(spec);
    REQUIRE(model.enumeration_available());
    REQUIRE(model.dp_available());
    for (int cls = 0; cls < c; ++cls)
      CHECK(model.log_z_enumeration(cls) ==
            doctest::Approx(model.log_z_dp(cls)).epsilon(1e-11));
  }
}

TEST_CASE("raster conditionals match exact conditionals") {
  GridSpec spec = make_grid_spec(2, 3, 2, 2, 11);
  PottsModel model(spec);
  Rng rng(5);
  for (int label = 0; label < 2; ++label) {
    std::vector<uint16_t> prefix;
    std::vector<int> cells;
    for (int t = 0; t < spec.cells(); ++t) {
      auto raster = model.raster_conditional(label, prefix);
      auto exact = model.exact_conditional(label, cells, prefix, t);
      REQUIRE(raster.size() == exact.size());
      double sum = 0.0;
      for (size_t i = 0; i < raster.size(); ++i) {
        CHECK(raster[i] == doctest::Approx(exact[i]).epsilon(1e-10));
        sum += exact[i];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      cells.push_back(t);
      prefix.push_back(static_cast<uint16_t>(rng.next_below(2)));
    }
  }
}

TEST_CASE("route guards follow the size limits") {
  // 3x7 at V=2 is 21 bits: enumeration off, DP on.
  PottsModel narrow(make_grid_spec(3, 7, 2, 1, 1));
  CHECK(!narrow.enumeration_available());
  CHECK(narrow.dp_available());
  CHECK(narrow.exact_sampling_available());
  CHECK(std::isfinite(narrow.log_z(0)));
  CHECK_THROWS(narrow.log_z_enumeration(0));
  CHECK_THROWS(narrow.entropy_per_cell(0));

  // 8x8 at V=4 exceeds both limits: only the Gibbs fallback remains.
  PottsModel big(make_grid_spec(8, 8, 4, 1, 1));
  CHECK(!big.enumeration_available());
  CHECK(!big.dp_available());
  CHECK_THROWS(big.log_z(0));
  Rng rng(3);
  bool approx = false;
  TokenGrid g = big.sample(0, rng, &approx);
  CHECK(approx);
  CHECK(g.tokens.size() == 64);

  // 6x6 at V=4 (the sweep task) keeps the DP route.
  PottsModel sweep_grid(make_grid_spec(6, 6, 4, 2, 1));
  CHECK(sweep_grid.dp_available());
  CHECK(!sweep_grid.enumeration_available());
}

TEST_CASE("uniform tables give log V entropy") {
  GridSpec spec;
  spec.height = 2;
  spec.width = 3;
  spec.vocab_size = 3;
  spec.num_classes = 1;
  spec.seed = 0;
  spec.field = {std::vector<double>(3, 0.0)};
  spec.coupling = {std::vector<double>(9, 0.0)};
  PottsModel model(spec);
  CHECK(model.log_z(0) == doctest::Approx(6 * std::log(3.0)).epsilon(1e-12));
  CHECK(model.entropy_per_cell(0) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("exact sampler tracks the enumerated distribution") {
  PottsModel model(hand_spec());
  double z = 0.0;
  double p[2][2];
  for (int x0 = 0; x0 < 2; ++x0)
    for (int x1 = 0; x1 < 2; ++x1) z += std::exp(hand_energy(x0, x1));
  for (int x0 = 0; x0 < 2; ++x0)
    for (int x1 = 0; x1 < 2; ++x1) p[x0][x1] = std::exp(hand_energy(x0, x1)) / z;

  Rng rng(17);
  const int n = 40000;
  int counts[2][2] = {{0, 0}, {0, 0}};
  bool approx = true;
  for (int i = 0; i < n; ++i) {
    TokenGrid g = model.sample(0, rng, &approx);
    CHECK(!approx);
    counts[g.tokens[0]][g.tokens[1]]++;
  }
  double tv = 0.0;
  for (int x0 = 0; x0 < 2; ++x0)
    for (int x1 = 0; x1 < 2; ++x1) tv += std::abs(double(counts[x0][x1]) / n - p[x0][x1]);
  CHECK(tv / 2 < 0.02);
}

TEST_CASE("generate_shard is deterministic and balanced") {
  GridSpec spec = make_grid_spec(2, 2, 3, 3, 9);
  PottsModel model(spec);
  DatasetShard a = generate_shard(model, 30, 123, "test.shard");
  DatasetShard b = generate_shard(model, 30, 123, "test.shard");
  REQUIRE(a.grids.size() == 30);
  CHECK(a.fingerprint == spec.fingerprint());
  CHECK(!a.approximate);
  for (int i = 0; i < 30; ++i) {
    CHECK(a.grids[i].label == i % 3);
    CHECK(a.grids[i].tokens == b.grids[i].tokens);
  }
  // Per-grid streams: a shorter shard is a prefix of a longer one.
  DatasetShard c = generate_shard(model, 10, 123, "test.shard");
  for (int i = 0; i < 10; ++i) CHECK(c.grids[i].tokens == a.grids[i].tokens);
  DatasetShard d = generate_shard(model, 10, 124, "test.shard");
  bool differs = false;
  for (int i = 0; i < 10; ++i) differs |= (d.grids[i].tokens != a.grids[i].tokens);
  CHECK(differs);
}

TEST_CASE("shard files round-trip and reject corruption") {
  GridSpec spec = make_grid_spec(2, 2, 3, 2, 4);
  PottsModel model(spec);
  DatasetShard shard = generate_shard(model, 8, 5, "test.io");
  std::string dir = testutil::temp_dir("shard");
  std::string path = dir + "/data.shard";
  save_shard(path, shard);

  DatasetShard loaded = load_shard(path);
  CHECK(loaded.height == shard.height);
  CHECK(loaded.width == shard.width);
  CHECK(loaded.vocab_size == shard.vocab_size);
  CHECK(loaded.num_classes == shard.num_classes);
  CHECK(loaded.fingerprint == shard.fingerprint);
  REQUIRE(loaded.grids.size() == shard.grids.size());
  for (size_t i = 0; i < shard.grids.size(); ++i) {
    CHECK(loaded.grids[i].label == shard.grids[i].label);
    CHECK(loaded.grids[i].tokens == shard.grids[i].tokens);
  }

  std::string bytes = testutil::read_file(path);

  auto write_variant = [&](const std::string& name, const std::string& content) {
    std::string p = dir + "/" + name;
    std::ofstream os(p, std::ios::binary);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    return p;
  };

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS(load_shard(write_variant("magic.shard", bad_magic)));

  std::string bad_version = bytes;
  bad_version[8] = 9;
  CHECK_THROWS(load_shard(write_variant("version.shard", bad_version)));

  CHECK_THROWS(load_shard(write_variant("trunc.shard", bytes.substr(0, bytes.size() - 3))));
  CHECK_THROWS(load_shard(write_variant("trailing.shard", bytes + "x")));

  std::string bad_label = bytes;
  bad_label[44] = 0x7f;  // first grid's label
  CHECK_THROWS(load_shard(write_variant("label.shard", bad_label)));

  std::string bad_token = bytes;
  bad_token[48] = 0x7f;  // first grid's first token
  CHECK_THROWS(load_shard(write_variant("token.shard", bad_token)));

  CHECK_THROWS(load_shard(dir + "/missing.shard"));

  // Labels and tokens are validated on the way out as well.
  DatasetShard bad = shard;
  bad.grids[0].label = 5;
  CHECK_THROWS(save_shard(dir + "/unwritable.shard", bad));
  bad = shard;
  bad.grids[0].tokens[0] = 9;
  CHECK_THROWS(save_shard(dir + "/unwritable.shard", bad));
  std::filesystem::remove_all(dir);
}

TEST_CASE("draw_categorical walks the CDF") {
  Rng rng(1);
  std::vector<double> sure{0.0, 1.0, 0.0};
  for (int i = 0; i < 20; ++i) CHECK(draw_categorical(rng, sure) == 1);
  std::vector<double> first{1.0, 0.0};
  for (int i = 0; i < 20; ++i) CHECK(draw_categorical(rng, first) == 0);
  CHECK_THROWS(draw_categorical(rng, std::vector<double>{}));
  CHECK_THROWS(draw_categorical(rng, std::vector<double>{0.5, -0.5}));
  CHECK_THROWS(draw_categorical(rng, std::vector<double>{0.0, 0.0}));

  std::vector<double> biased{0.25, 0.75};
  int ones = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) ones += draw_categorical(rng, biased);
  CHECK(std::abs(double(ones) / n - 0.75) < 0.02);
}
