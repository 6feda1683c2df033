// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace rar {

// Dense row-major matrix. Rank-1 tensors are stored with rows == 1.
template <typename S>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<S> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, S(0)) {
    if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative shape");
  }

  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  S* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
  const S* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }

  S& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
  const S& at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

  void zero() { std::fill(data.begin(), data.end(), S(0)); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// c[0..n) += a[0..k) * B, with B of shape k x n. Accumulation order is fixed
// (l ascending, j ascending) so single-row and batched callers agree bitwise.
template <typename S>
inline void matvec_acc(const S* a, const Mat<S>& B, S* c) {
  const int k = B.rows, n = B.cols;
  for (int l = 0; l < k; ++l) {
    const S al = a[l];
    const S* brow = B.row(l);
    for (int j = 0; j < n; ++j) c[j] += al * brow[j];
  }
}

// C(m x n) += A(m x k) * B(k x n). Each output row goes through matvec_acc.
template <typename S>
inline void matmul_acc(const Mat<S>& A, const Mat<S>& B, Mat<S>& C) {
  if (A.cols != B.rows || C.rows != A.rows || C.cols != B.cols)
    throw std::invalid_argument("matmul_acc: shape mismatch");
  for (int i = 0; i < A.rows; ++i) matvec_acc(A.row(i), B, C.row(i));
}

// C(k x n) += A^T * B where A is m x k, B is m x n.
template <typename S>
inline void matmul_at_acc(const Mat<S>& A, const Mat<S>& B, Mat<S>& C) {
  if (A.rows != B.rows || C.rows != A.cols || C.cols != B.cols)
    throw std::invalid_argument("matmul_at_acc: shape mismatch");
  for (int i = 0; i < A.rows; ++i) {
    const S* arow = A.row(i);
    const S* brow = B.row(i);
    for (int l = 0; l < A.cols; ++l) {
      const S al = arow[l];
      S* crow = C.row(l);
      for (int j = 0; j < B.cols; ++j) crow[j] += al * brow[j];
    }
  }
}

// C(m x k) += A(m x n) * B^T where B is k x n.
template <typename S>
inline void matmul_bt_acc(const Mat<S>& A, const Mat<S>& B, Mat<S>& C) {
  if (A.cols != B.cols || C.rows != A.rows || C.cols != B.rows)
    throw std::invalid_argument("matmul_bt_acc: shape mismatch");
  for (int i = 0; i < A.rows; ++i) {
    const S* arow = A.row(i);
    S* crow = C.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const S* brow = B.row(j);
      S acc = S(0);
      for (int l = 0; l < A.cols; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

template <typename S>
inline S dot(const S* a, const S* b, int n) {
  S acc = S(0);
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// Little-endian scalar IO used by every on-disk format.
inline void write_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }
inline void write_u16(std::ostream& os, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}
inline void write_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}
inline void write_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}
inline void write_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}
inline void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

inline uint8_t read_u8(std::istream& is) {
  int c = is.get();
  if (c == EOF) throw std::runtime_error("unexpected end of file");
  return static_cast<uint8_t>(c);
}
inline uint16_t read_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw std::runtime_error("unexpected end of file");
  return static_cast<uint16_t>(b[0] | (uint16_t(b[1]) << 8));
}
inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("unexpected end of file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
  return v;
}
inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("unexpected end of file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}
inline float read_f32(std::istream& is) {
  uint32_t bits = read_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}
inline double read_f64(std::istream& is) {
  uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}
inline uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
}

// Worker count: explicit argument wins, then RAR_THREADS, then the hardware.
inline int resolve_threads(int requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("RAR_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Runs fn(begin, end) over contiguous chunks of [0, n). With one worker this
// degenerates to a plain call, keeping single-thread runs trivially ordered.
template <typename F>
inline void parallel_for(int n, int threads, F&& fn) {
  if (n <= 0) return;
  threads = std::min(threads < 1 ? 1 : threads, n);
  if (threads == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    int b = t * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace rar
