// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rar/rng.hpp"

namespace rar {

// A visiting order over T sequence positions: order[t] is the flat grid cell
// consumed at generation step t.
struct Permutation {
  std::vector<int> order;

  int size() const { return static_cast<int>(order.size()); }
  bool is_identity() const;
  // Throws unless order is a bijection on [0, size).
  void validate() const;
};

Permutation identity_perm(int n);
Permutation invert(const Permutation& p);

// seq[order[t]] for each t.
template <typename T>
std::vector<T> apply_permutation(std::span<const T> seq, const Permutation& p) {
  if (static_cast<int>(seq.size()) != p.size())
    throw std::invalid_argument("apply_permutation: length mismatch");
  std::vector<T> out(seq.size());
  for (int t = 0; t < p.size(); ++t) out[t] = seq[p.order[t]];
  return out;
}

// Fisher-Yates shuffle of the identity, uniform over all n! orders.
Permutation random_permutation(Rng& rng, int n);

enum class ScanKind { row_major, spiral_in, spiral_out, z_curve, subsample, alternate };

ScanKind scan_kind_from_string(const std::string& name);
std::string to_string(ScanKind kind);
const std::vector<ScanKind>& all_scan_kinds();

// Deterministic full-grid visiting order for a given scan family.
// z_curve and subsample require a square power-of-two grid.
Permutation canonical_scan(ScanKind kind, int height, int width);

// Whether canonical_scan(kind, height, width) is defined for this shape.
bool scan_defined(ScanKind kind, int height, int width);

// Linear decay of the random-order probability across training epochs.
struct AnnealSchedule {
  int start_epoch = 0;
  int end_epoch = 0;

  void validate(int total_epochs) const;
};

// 1 before start_epoch, 0 from end_epoch on, linear in between.
double anneal_probability(double epoch, const AnnealSchedule& sched);

// Draws the per-sample order: with probability r a uniformly random
// permutation (from shuffle_rng), otherwise the canonical order. The branch
// draw is taken unconditionally so stream replay does not depend on r.
Permutation sample_order(Rng& branch_rng, Rng& shuffle_rng, double r,
                         const Permutation& canonical, bool* took_random = nullptr);

}  // namespace rar
