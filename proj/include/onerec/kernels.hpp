#pragma once

// Dense kernels shared by the sequence model and the tokenizer.
//
// Every kernel exists twice: `kernels::ref` is the plain serial loop nest and
// `kernels` is the OpenMP version. Each output element is produced by exactly
// one thread using the same accumulation order as the reference, so the two
// agree bitwise and results do not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>

namespace onerec::kernels {

/// Minimum multiply-adds before a kernel opens a parallel region.
inline constexpr std::int64_t kParallelWork = 1 << 15;

/// Dot product with eight fixed partial sums (vectorizable, order-deterministic).
template <typename T>
inline T dot(const T* a, const T* b, int n) {
  T acc[8] = {};
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

namespace ref {

/// y[r, o] = b[o] + sum_k x[r, k] * w[o, k]; `b` may be null.
template <typename T>
void linear(const T* x, int rows, int in, const T* w, const T* b, int out, T* y) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::size_t>(r) * in;
    T* yr = y + static_cast<std::size_t>(r) * out;
    for (int o = 0; o < out; ++o) {
      yr[o] = dot(xr, w + static_cast<std::size_t>(o) * in, in) + (b ? b[o] : T{0});
    }
  }
}

/// dx[r, k] += sum_o dy[r, o] * w[o, k]
template <typename T>
void linear_backward_input(const T* dy, int rows, int out, const T* w, int in, T* dx) {
  for (int r = 0; r < rows; ++r) {
    const T* dyr = dy + static_cast<std::size_t>(r) * out;
    T* dxr = dx + static_cast<std::size_t>(r) * in;
    for (int o = 0; o < out; ++o) {
      if (dyr[o] != T{0}) axpy(dyr[o], w + static_cast<std::size_t>(o) * in, dxr, in);
    }
  }
}

/// dw[o, k] += sum_r dy[r, o] * x[r, k];  db[o] += sum_r dy[r, o] (db may be null)
template <typename T>
void linear_backward_weight(const T* dy, const T* x, int rows, int in, int out, T* dw, T* db) {
  for (int o = 0; o < out; ++o) {
    T* dwo = dw + static_cast<std::size_t>(o) * in;
    T bias = 0;
    for (int r = 0; r < rows; ++r) {
      const T g = dy[static_cast<std::size_t>(r) * out + o];
      if (g != T{0}) axpy(g, x + static_cast<std::size_t>(r) * in, dwo, in);
      bias += g;
    }
    if (db) db[o] += bias;
  }
}

/// Squared euclidean distance accumulated in double.
inline double squared_distance(const float* a, const float* b, int d) {
  double s = 0.0;
  for (int j = 0; j < d; ++j) {
    const double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
    s += diff * diff;
  }
  return s;
}

/// For each of n points, index of the nearest of k centroids (lowest index on ties)
/// and the squared distance to it.
inline void nearest_centroid(const float* points, int n, const float* centroids, int k, int d,
                             int* assign, double* dist2) {
  for (int i = 0; i < n; ++i) {
    const float* p = points + static_cast<std::size_t>(i) * d;
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int c = 0; c < k; ++c) {
      const double s = squared_distance(p, centroids + static_cast<std::size_t>(c) * d, d);
      if (s < best) {
        best = s;
        arg = c;
      }
    }
    assign[i] = arg;
    dist2[i] = best;
  }
}

}  // namespace ref

template <typename T>
void linear(const T* x, int rows, int in, const T* w, const T* b, int out, T* y) {
  const std::int64_t work = static_cast<std::int64_t>(rows) * in * out;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int r = 0; r < rows; ++r) {
    ref::linear(x + static_cast<std::size_t>(r) * in, 1, in, w, b, out, y + static_cast<std::size_t>(r) * out);
  }
}

template <typename T>
void linear_backward_input(const T* dy, int rows, int out, const T* w, int in, T* dx) {
  const std::int64_t work = static_cast<std::int64_t>(rows) * in * out;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int r = 0; r < rows; ++r) {
    ref::linear_backward_input(dy + static_cast<std::size_t>(r) * out, 1, out, w, in,
                               dx + static_cast<std::size_t>(r) * in);
  }
}

template <typename T>
void linear_backward_weight(const T* dy, const T* x, int rows, int in, int out, T* dw, T* db) {
  const std::int64_t work = static_cast<std::int64_t>(rows) * in * out;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int o = 0; o < out; ++o) {
    T* dwo = dw + static_cast<std::size_t>(o) * in;
    T bias = 0;
    for (int r = 0; r < rows; ++r) {
      const T g = dy[static_cast<std::size_t>(r) * out + o];
      if (g != T{0}) axpy(g, x + static_cast<std::size_t>(r) * in, dwo, in);
      bias += g;
    }
    if (db) db[o] += bias;
  }
}

inline void nearest_centroid(const float* points, int n, const float* centroids, int k, int d, int* assign,
                             double* dist2) {
  const std::int64_t work = static_cast<std::int64_t>(n) * k * d;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int i = 0; i < n; ++i) {
    ref::nearest_centroid(points + static_cast<std::size_t>(i) * d, 1, centroids, k, d, assign + i, dist2 + i);
  }
}

}  // namespace onerec::kernels
