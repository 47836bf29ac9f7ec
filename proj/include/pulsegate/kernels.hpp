#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pulsegate/matrix.hpp"

namespace pulsegate::kernels {

/// Each data-parallel kernel has a serial reference and an OpenMP variant.
/// Both visit every output element with the same floating-point operation
/// order, so their results are bitwise identical.
enum class Backend { serial, parallel, automatic };

/// Thread budget: PULSEGATE_THREADS if set (>= 1), else the OpenMP default.
int thread_budget();

enum class Trans { no, yes };

/// c += op(a) * op(b)
template <typename T>
void gemm_serial(MatrixView<const T> a, Trans ta, MatrixView<const T> b, Trans tb, MatrixView<T> c);
template <typename T>
void gemm_parallel(MatrixView<const T> a, Trans ta, MatrixView<const T> b, Trans tb, MatrixView<T> c);
/// Picks the parallel variant only for large products outside parallel regions.
template <typename T>
void gemm(MatrixView<const T> a, Trans ta, MatrixView<const T> b, Trans tb, MatrixView<T> c,
          Backend backend = Backend::automatic);

/// Per-bin gradient statistics of histogram-based tree growth.
struct HistogramBin {
  double grad = 0.0;
  double hess = 0.0;
  std::uint32_t count = 0;
};

/// Row-major bin indices, one row per sample and one column per feature;
/// feature f owns histogram slots [offsets[f], offsets[f+1]).
struct BinnedFeatures {
  std::size_t rows = 0;
  std::size_t features = 0;
  std::vector<std::uint16_t> bins;
  std::vector<std::size_t> offsets;

  std::uint16_t at(std::size_t row, std::size_t feature) const { return bins[row * features + feature]; }
  std::size_t total_bins() const { return offsets.empty() ? 0 : offsets.back(); }
};

/// Accumulates the listed rows, in list order, into `out` (zeroed first).
void build_histograms_serial(const BinnedFeatures& binned, std::span<const std::uint32_t> rows,
                             std::span<const double> grad, std::span<const double> hess,
                             std::span<HistogramBin> out);
/// Same accumulation, one feature per task.
void build_histograms_parallel(const BinnedFeatures& binned, std::span<const std::uint32_t> rows,
                               std::span<const double> grad, std::span<const double> hess,
                               std::span<HistogramBin> out);
void build_histograms(const BinnedFeatures& binned, std::span<const std::uint32_t> rows,
                      std::span<const double> grad, std::span<const double> hess, std::span<HistogramBin> out,
                      Backend backend = Backend::automatic);

/// out[i] = fn(i) for i in [0, n). fn must be safe to call concurrently.
template <typename Fn>
void map_indices(std::size_t n, Fn&& fn, std::span<double> out, Backend backend = Backend::automatic);

}  // namespace pulsegate::kernels

#include "pulsegate/kernels_inl.hpp"
