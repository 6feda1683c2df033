// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rar/rng.hpp"

namespace rar {

// Pairwise lattice distribution over token grids, one parameter table per
// class label: p(x | c) proportional to exp(sum_i field[c][x_i] +
// sum_adjacent coupling[c][x_a * V + x_b]), where (a, b) runs over horizontal
// pairs left-to-right and vertical pairs top-to-bottom.
struct GridSpec {
  int height = 0;
  int width = 0;
  int vocab_size = 0;
  int num_classes = 0;
  uint64_t seed = 0;
  std::vector<std::vector<double>> field;     // num_classes x vocab_size
  std::vector<std::vector<double>> coupling;  // num_classes x vocab_size^2

  int cells() const { return height * width; }
  void validate() const;

  // Canonical form: compact JSON with lexicographically sorted keys.
  std::string canonical_json() const;
  static GridSpec from_json_text(const std::string& text);
  uint64_t fingerprint() const;  // FNV-1a over canonical_json bytes

  void save(const std::string& path) const;
  static GridSpec load(const std::string& path);
};

// Random tables drawn from the spec seed; same parameters give same tables.
GridSpec make_grid_spec(int height, int width, int vocab_size, int num_classes,
                        uint64_t seed, double field_scale = 0.3, double coupling_scale = 0.6);

struct TokenGrid {
  int height = 0;
  int width = 0;
  int label = 0;
  std::vector<uint16_t> tokens;  // row-major, height * width
};

struct DatasetShard {
  int height = 0;
  int width = 0;
  int vocab_size = 0;
  int num_classes = 0;
  uint64_t fingerprint = 0;
  std::vector<TokenGrid> grids;
  // True when any grid came from the approximate sampler. Not serialized.
  bool approximate = false;
};

void save_shard(const std::string& path, const DatasetShard& shard);
DatasetShard load_shard(const std::string& path);

int draw_categorical(Rng& rng, std::span<const double> probs);

// Exact inference engine for one GridSpec. Two independent routes:
//  - full enumeration over all V^(H*W) assignments, feasible while
//    H*W*log2(V) stays within kMaxEnumerationBits;
//  - a raster-prefix dynamic program over boundary states (the last W cells),
//    feasible while (H*W+1)*V^W stays within kMaxDpEntries.
// Routes overlap on small grids, where they must agree to ~1e-9.
class PottsModel {
 public:
  static constexpr double kMaxEnumerationBits = 20.0;
  static constexpr int64_t kMaxDpEntries = int64_t(1) << 22;  // per class

  explicit PottsModel(GridSpec spec);
  ~PottsModel();  // DpTables is private to the implementation file
  PottsModel(PottsModel&&) noexcept;
  PottsModel& operator=(PottsModel&&) noexcept;

  const GridSpec& spec() const { return spec_; }
  static double enumeration_bits(const GridSpec& spec);
  bool enumeration_available() const { return enum_ok_; }
  bool dp_available() const { return dp_ok_; }
  bool exact_sampling_available() const { return dp_ok_; }

  // Unnormalized log weight exp-argument of a full assignment.
  double energy(int label, std::span<const uint16_t> tokens) const;

  double log_z(int label) const;         // DP route when available, else enumeration
  double log_z_enumeration(int label) const;
  double log_z_dp(int label) const;
  double log_prob(int label, std::span<const uint16_t> tokens) const;
  double entropy_per_cell(int label) const;  // enumeration route only

  // p(x_target = v | observed cells), marginalizing all other cells exactly.
  std::vector<double> exact_conditional(int label, std::span<const int> observed_cells,
                                        std::span<const uint16_t> observed_values,
                                        int target_cell) const;

  // p(x_t = v | x_0 .. x_{t-1}) for raster position t = prefix.size().
  std::vector<double> raster_conditional(int label, std::span<const uint16_t> prefix) const;

  // Exact ancestral sample in raster order when the DP route is available,
  // otherwise a single-sweep Gibbs pass flagged approximate.
  TokenGrid sample(int label, Rng& rng, bool* approximate = nullptr) const;

 private:
  struct DpTables;  // per-class suffix tables

  const DpTables& dp(int label) const;
  void require_label(int label) const;

  GridSpec spec_;
  bool enum_ok_ = false;
  bool dp_ok_ = false;
  int64_t dp_states_ = 0;                      // V^W
  std::vector<std::unique_ptr<DpTables>> dp_;  // per class, built in the constructor
  std::vector<double> log_z_enum_;             // per class, built in the constructor
};

// Balanced dataset: grid i has label i % num_classes and its own derived
// stream, so the shard contents do not depend on generation order.
DatasetShard generate_shard(const PottsModel& model, int count, uint64_t seed,
                            const std::string& stream_name);

}  // namespace rar
