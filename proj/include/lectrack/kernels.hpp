#pragma once

// Dense row-major kernels used by the tape and the incremental tracker.
//
// Every kernel has a serial reference in `serial::` and an OpenMP version in
// `omp::`. Both compute each output element with the same summation order,
// so the two backends are bit-identical; the OpenMP version only splits
// independent output elements across threads.

#include <cstddef>
#include <span>

namespace lectrack::kernels {

enum class Backend { kSerial, kOpenMP };

void set_backend(Backend backend);
Backend backend();

namespace serial {

// y = W x, W is rows x cols.
void gemv(std::span<const double> w, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<double> y);
// dx += W^T dy
void gemv_transpose_accumulate(std::span<const double> w, std::size_t rows,
                               std::size_t cols, std::span<const double> dy,
                               std::span<double> dx);
// dW += dy x^T
void outer_accumulate(std::span<double> dw, std::size_t rows, std::size_t cols,
                      std::span<const double> dy, std::span<const double> x);

}  // namespace serial

namespace omp {

void gemv(std::span<const double> w, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<double> y);
void gemv_transpose_accumulate(std::span<const double> w, std::size_t rows,
                               std::size_t cols, std::span<const double> dy,
                               std::span<double> dx);
void outer_accumulate(std::span<double> dw, std::size_t rows, std::size_t cols,
                      std::span<const double> dy, std::span<const double> x);

}  // namespace omp

// Dispatch on the active backend.
void gemv(std::span<const double> w, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<double> y);
void gemv_transpose_accumulate(std::span<const double> w, std::size_t rows,
                               std::size_t cols, std::span<const double> dy,
                               std::span<double> dx);
void outer_accumulate(std::span<double> dw, std::size_t rows, std::size_t cols,
                      std::span<const double> dy, std::span<const double> x);

}  // namespace lectrack::kernels
