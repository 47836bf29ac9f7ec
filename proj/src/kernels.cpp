#include "pulsegate/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

#include <omp.h>

namespace pulsegate::kernels {
namespace {

constexpr std::size_t kParallelWorkThreshold = std::size_t{1} << 16;

template <typename T>
void check_gemm_shapes(MatrixView<const T> a, Trans ta, MatrixView<const T> b, Trans tb, MatrixView<T> c) {
  const std::size_t m = ta == Trans::no ? a.rows : a.cols;
  const std::size_t k = ta == Trans::no ? a.cols : a.rows;
  const std::size_t kb = tb == Trans::no ? b.rows : b.cols;
  const std::size_t n = tb == Trans::no ? b.cols : b.rows;
  require_shape(k == kb && c.rows == m && c.cols == n, "gemm operand shapes");
}

// One output row; shared by both variants so the operation order matches.
template <typename T>
void gemm_row(std::size_t i, MatrixView<const T> a, Trans ta, MatrixView<const T> b, Trans tb, MatrixView<T> c) {
  const std::size_t k = ta == Trans::no ? a.cols : a.rows;
  T* out = c.data + i * c.stride;
  if (tb == Trans::no) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ta == Trans::no ? a(i, p) : a(p, i);
      if (av == T{0}) continue;
      const T* brow = b.data + p * b.stride;
      for (std::size_t j = 0; j < c.cols; ++j) out[j] += av * brow[j];
    }
  } else {
    for (std::size_t j = 0; j < c.cols; ++j) {
      const T* brow = b.data + j * b.stride;
      T sum{0};
      if (ta == Trans::no) {
        const T* arow = a.data + i * a.stride;
        for (std::size_t p = 0; p < k; ++p) sum += arow[p] * brow[p];
      } else {
        for (std::size_t p = 0; p < k; ++p) sum += a(p, i) * brow[p];
      }
      out[j] += sum;
    }
  }
}

void histogram_feature(const BinnedFeatures& binned, std::size_t f, std::span<const std::uint32_t> rows,
                       std::span<const double> grad, std::span<const double> hess, std::span<HistogramBin> out) {
  HistogramBin* hist = out.data() + binned.offsets[f];
  std::fill(hist, out.data() + binned.offsets[f + 1], HistogramBin{});
  for (std::uint32_t r : rows) {
    HistogramBin& bin = hist[binned.at(r, f)];
    bin.grad += grad[r];
    bin.hess += hess[r];
    ++bin.count;
  }
}

}  // namespace

int thread_budget() {
  if (const char* env = std::getenv("PULSEGATE_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (...) {
    }
  }
  return omp_get_max_threads();
}

bool use_parallel(Backend backend, std::size_t work) {
  switch (backend) {
    case Backend::serial: return false;
    case Backend::parallel: return true;
    case Backend::automatic: break;
  }
  return work >= kParallelWorkThreshold && !omp_in_parallel() && thread_budget() > 1;
}

template <typename T>
void gemm_serial(MatrixView<const T> a, Trans ta, MatrixView<const T> b, Trans tb, MatrixView<T> c) {
  check_gemm_shapes(a, ta, b, tb, c);
  for (std::size_t i = 0; i < c.rows; ++i) gemm_row(i, a, ta, b, tb, c);
}

template <typename T>
void gemm_parallel(MatrixView<const T> a, Trans ta, MatrixView<const T> b, Trans tb, MatrixView<T> c) {
  check_gemm_shapes(a, ta, b, tb, c);
  const auto rows = static_cast<std::ptrdiff_t>(c.rows);
#pragma omp parallel for schedule(static) num_threads(thread_budget())
  for (std::ptrdiff_t i = 0; i < rows; ++i) gemm_row(static_cast<std::size_t>(i), a, ta, b, tb, c);
}

template <typename T>
void gemm(MatrixView<const T> a, Trans ta, MatrixView<const T> b, Trans tb, MatrixView<T> c, Backend backend) {
  const std::size_t k = ta == Trans::no ? a.cols : a.rows;
  if (use_parallel(backend, c.rows * c.cols * k) && c.rows > 1) {
    gemm_parallel(a, ta, b, tb, c);
  } else {
    gemm_serial(a, ta, b, tb, c);
  }
}

template void gemm_serial<float>(MatrixView<const float>, Trans, MatrixView<const float>, Trans, MatrixView<float>);
template void gemm_serial<double>(MatrixView<const double>, Trans, MatrixView<const double>, Trans, MatrixView<double>);
template void gemm_parallel<float>(MatrixView<const float>, Trans, MatrixView<const float>, Trans, MatrixView<float>);
template void gemm_parallel<double>(MatrixView<const double>, Trans, MatrixView<const double>, Trans,
                                    MatrixView<double>);
template void gemm<float>(MatrixView<const float>, Trans, MatrixView<const float>, Trans, MatrixView<float>, Backend);
template void gemm<double>(MatrixView<const double>, Trans, MatrixView<const double>, Trans, MatrixView<double>,
                           Backend);

void build_histograms_serial(const BinnedFeatures& binned, std::span<const std::uint32_t> rows,
                             std::span<const double> grad, std::span<const double> hess,
                             std::span<HistogramBin> out) {
  require_shape(out.size() == binned.total_bins(), "histogram size");
  for (std::size_t f = 0; f < binned.features; ++f) histogram_feature(binned, f, rows, grad, hess, out);
}

void build_histograms_parallel(const BinnedFeatures& binned, std::span<const std::uint32_t> rows,
                               std::span<const double> grad, std::span<const double> hess,
                               std::span<HistogramBin> out) {
  require_shape(out.size() == binned.total_bins(), "histogram size");
  const auto features = static_cast<std::ptrdiff_t>(binned.features);
#pragma omp parallel for schedule(static) num_threads(thread_budget())
  for (std::ptrdiff_t f = 0; f < features; ++f) {
    histogram_feature(binned, static_cast<std::size_t>(f), rows, grad, hess, out);
  }
}

void build_histograms(const BinnedFeatures& binned, std::span<const std::uint32_t> rows,
                      std::span<const double> grad, std::span<const double> hess, std::span<HistogramBin> out,
                      Backend backend) {
  if (use_parallel(backend, rows.size() * binned.features)) {
    build_histograms_parallel(binned, rows, grad, hess, out);
  } else {
    build_histograms_serial(binned, rows, grad, hess, out);
  }
}

}  // namespace pulsegate::kernels
