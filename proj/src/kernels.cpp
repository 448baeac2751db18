#include "lectrack/kernels.hpp"

#include <omp.h>

#include <atomic>

namespace lectrack::kernels {
namespace {

std::atomic<Backend> g_backend{Backend::kOpenMP};

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1u << 14;

bool go_parallel(std::size_t work) {
  return work >= kParallelWork && !omp_in_parallel() && omp_get_max_threads() > 1;
}

}  // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

namespace serial {

void gemv(std::span<const double> w, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

void gemv_transpose_accumulate(std::span<const double> w, std::size_t rows,
                               std::size_t cols, std::span<const double> dy,
                               std::span<double> dx) {
  for (std::size_t c = 0; c < cols; ++c) {
    double acc = dx[c];
    for (std::size_t r = 0; r < rows; ++r) acc += w[r * cols + c] * dy[r];
    dx[c] = acc;
  }
}

void outer_accumulate(std::span<double> dw, std::size_t rows, std::size_t cols,
                      std::span<const double> dy, std::span<const double> x) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    double* row = dw.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += g * x[c];
  }
}

}  // namespace serial

namespace omp {

void gemv(std::span<const double> w, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<double> y) {
  const auto n = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (go_parallel(rows * cols))
  for (long r = 0; r < n; ++r) {
    const double* row = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

void gemv_transpose_accumulate(std::span<const double> w, std::size_t rows,
                               std::size_t cols, std::span<const double> dy,
                               std::span<double> dx) {
  const auto n = static_cast<long>(cols);
#pragma omp parallel for schedule(static) if (go_parallel(rows * cols))
  for (long c = 0; c < n; ++c) {
    double acc = dx[c];
    for (std::size_t r = 0; r < rows; ++r) acc += w[r * cols + c] * dy[r];
    dx[c] = acc;
  }
}

void outer_accumulate(std::span<double> dw, std::size_t rows, std::size_t cols,
                      std::span<const double> dy, std::span<const double> x) {
  const auto n = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (go_parallel(rows * cols))
  for (long r = 0; r < n; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    double* row = dw.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += g * x[c];
  }
}

}  // namespace omp

void gemv(std::span<const double> w, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<double> y) {
  if (backend() == Backend::kOpenMP) {
    omp::gemv(w, rows, cols, x, y);
  } else {
    serial::gemv(w, rows, cols, x, y);
  }
}

void gemv_transpose_accumulate(std::span<const double> w, std::size_t rows,
                               std::size_t cols, std::span<const double> dy,
                               std::span<double> dx) {
  if (backend() == Backend::kOpenMP) {
    omp::gemv_transpose_accumulate(w, rows, cols, dy, dx);
  } else {
    serial::gemv_transpose_accumulate(w, rows, cols, dy, dx);
  }
}

void outer_accumulate(std::span<double> dw, std::size_t rows, std::size_t cols,
                      std::span<const double> dy, std::span<const double> x) {
  if (backend() == Backend::kOpenMP) {
    omp::outer_accumulate(dw, rows, cols, dy, x);
  } else {
    serial::outer_accumulate(dw, rows, cols, dy, x);
  }
}

}  // namespace lectrack::kernels
