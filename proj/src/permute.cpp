// SPDX-License-Identifier: Apache-2.0
#include "rar/permute.hpp"

#include <algorithm>
#include <stdexcept>

namespace rar {

bool Permutation::is_identity() const {
  for (int t = 0; t < size(); ++t)
    if (order[t] != t) return false;
  return true;
}

void Permutation::validate() const {
  std::vector<char> seen(order.size(), 0);
  for (int v : order) {
    if (v < 0 || v >= size()) throw std::invalid_argument("Permutation: index out of range");
    if (seen[v]) throw std::invalid_argument("Permutation: duplicate index");
    seen[v] = 1;
  }
}

Permutation identity_perm(int n) {
  if (n < 0) throw std::invalid_argument("identity_perm: negative length");
  Permutation p;
  p.order.resize(n);
  for (int i = 0; i < n; ++i) p.order[i] = i;
  return p;
}

Permutation invert(const Permutation& p) {
  p.validate();
  Permutation inv;
  inv.order.resize(p.size());
  for (int t = 0; t < p.size(); ++t) inv.order[p.order[t]] = t;
  return inv;
}

Permutation random_permutation(Rng& rng, int n) {
  Permutation p = identity_perm(n);
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(i) + 1));
    std::swap(p.order[i], p.order[j]);
  }
  return p;
}

ScanKind scan_kind_from_string(const std::string& name) {
  if (name == "row_major") return ScanKind::row_major;
  if (name == "spiral_in") return ScanKind::spiral_in;
  if (name == "spiral_out") return ScanKind::spiral_out;
  if (name == "z_curve") return ScanKind::z_curve;
  if (name == "subsample") return ScanKind::subsample;
  if (name == "alternate") return ScanKind::alternate;
  throw std::invalid_argument("unknown scan order: " + name);
}

std::string to_string(ScanKind kind) {
  switch (kind) {
    case ScanKind::row_major: return "row_major";
    case ScanKind::spiral_in: return "spiral_in";
    case ScanKind::spiral_out: return "spiral_out";
    case ScanKind::z_curve: return "z_curve";
    case ScanKind::subsample: return "subsample";
    case ScanKind::alternate: return "alternate";
  }
  throw std::logic_error("to_string: bad ScanKind");
}

const std::vector<ScanKind>& all_scan_kinds() {
  static const std::vector<ScanKind> kinds = {
      ScanKind::row_major, ScanKind::spiral_in, ScanKind::spiral_out,
      ScanKind::z_curve,   ScanKind::subsample, ScanKind::alternate};
  return kinds;
}

namespace {

void require_grid(int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("canonical_scan: empty grid");
}

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

void require_square_pow2(ScanKind kind, int height, int width) {
  if (height != width || !is_pow2(height))
    throw std::invalid_argument("canonical_scan: " + to_string(kind) +
                                " requires a square power-of-two grid");
}

Permutation scan_row_major(int height, int width) { return identity_perm(height * width); }

Permutation scan_alternate(int height, int width) {
  Permutation p;
  p.order.reserve(static_cast<size_t>(height) * width);
  for (int r = 0; r < height; ++r) {
    if (r % 2 == 0)
      for (int c = 0; c < width; ++c) p.order.push_back(r * width + c);
    else
      for (int c = width - 1; c >= 0; --c) p.order.push_back(r * width + c);
  }
  return p;
}

// Clockwise from the top-left corner, peeling one ring at a time.
Permutation scan_spiral_in(int height, int width) {
  Permutation p;
  p.order.reserve(static_cast<size_t>(height) * width);
  int top = 0, bottom = height - 1, left = 0, right = width - 1;
  while (top <= bottom && left <= right) {
    for (int c = left; c <= right; ++c) p.order.push_back(top * width + c);
    for (int r = top + 1; r <= bottom; ++r) p.order.push_back(r * width + right);
    if (top < bottom)
      for (int c = right - 1; c >= left; --c) p.order.push_back(bottom * width + c);
    if (left < right)
      for (int r = bottom - 1; r > top; --r) p.order.push_back(r * width + left);
    ++top, --bottom, ++left, --right;
  }
  return p;
}

// Z-order curve: column index bits occupy the even (low) interleaved bits.
Permutation scan_z_curve(int side) {
  auto morton = [](int r, int c) {
    uint64_t code = 0;
    for (int b = 0; b < 16; ++b) {
      code |= (uint64_t(c >> b) & 1) << (2 * b);
      code |= (uint64_t(r >> b) & 1) << (2 * b + 1);
    }
    return code;
  };
  std::vector<std::pair<uint64_t, int>> cells;
  cells.reserve(static_cast<size_t>(side) * side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) cells.emplace_back(morton(r, c), r * side + c);
  std::sort(cells.begin(), cells.end());
  Permutation p;
  p.order.reserve(cells.size());
  for (auto& [code, cell] : cells) p.order.push_back(cell);
  return p;
}

// Coarse-to-fine sublattice refinement: visit the even/even sublattice first,
// then even/odd, odd/even, odd/odd, recursing within each sublattice.
void subsample_rec(int side, int row0, int col0, int stride, int full_width,
                   std::vector<int>& out) {
  if (side == 1) {
    out.push_back(row0 * full_width + col0);
    return;
  }
  int half = side / 2;
  subsample_rec(half, row0, col0, stride * 2, full_width, out);
  subsample_rec(half, row0, col0 + stride, stride * 2, full_width, out);
  subsample_rec(half, row0 + stride, col0, stride * 2, full_width, out);
  subsample_rec(half, row0 + stride, col0 + stride, stride * 2, full_width, out);
}

Permutation scan_subsample(int side) {
  Permutation p;
  p.order.reserve(static_cast<size_t>(side) * side);
  subsample_rec(side, 0, 0, 1, side, p.order);
  return p;
}

}  // namespace

bool scan_defined(ScanKind kind, int height, int width) {
  if (height < 1 || width < 1) return false;
  if (kind == ScanKind::z_curve || kind == ScanKind::subsample)
    return height == width && is_pow2(height);
  return true;
}

Permutation canonical_scan(ScanKind kind, int height, int width) {
  require_grid(height, width);
  Permutation p;
  switch (kind) {
    case ScanKind::row_major: p = scan_row_major(height, width); break;
    case ScanKind::alternate: p = scan_alternate(height, width); break;
    case ScanKind::spiral_in: p = scan_spiral_in(height, width); break;
    case ScanKind::spiral_out: {
      p = scan_spiral_in(height, width);
      std::reverse(p.order.begin(), p.order.end());
      break;
    }
    case ScanKind::z_curve:
      require_square_pow2(kind, height, width);
      p = scan_z_curve(width);
      break;
    case ScanKind::subsample:
      require_square_pow2(kind, height, width);
      p = scan_subsample(width);
      break;
  }
  p.validate();
  return p;
}

void AnnealSchedule::validate(int total_epochs) const {
  if (start_epoch < 0 || end_epoch < start_epoch || end_epoch > total_epochs)
    throw std::invalid_argument("AnnealSchedule: need 0 <= start <= end <= total_epochs");
}

double anneal_probability(double epoch, const AnnealSchedule& sched) {
  if (epoch < 0.0) throw std::invalid_argument("anneal_probability: negative epoch");
  if (epoch < sched.start_epoch) return 1.0;
  if (epoch >= sched.end_epoch) return 0.0;
  return 1.0 - (epoch - sched.start_epoch) /
                   static_cast<double>(sched.end_epoch - sched.start_epoch);
}

Permutation sample_order(Rng& branch_rng, Rng& shuffle_rng, double r,
                         const Permutation& canonical, bool* took_random) {
  if (r < 0.0 || r > 1.0) throw std::invalid_argument("sample_order: r outside [0, 1]");
  bool random = branch_rng.next_double() < r;
  if (took_random) *took_random = random;
  if (random) return random_permutation(shuffle_rng, canonical.size());
  return canonical;
}

}  // namespace rar
