#include <random>

#include <benchmark/benchmark.h>

#include "pulsegate/kernels.hpp"
#include "pulsegate/models.hpp"

using namespace pulsegate;
using kernels::Backend;

namespace {

Matrix<float> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Matrix<float> m(r, c);
  for (auto& v : m.values()) v = u(rng);
  return m;
}

void BM_gemm(benchmark::State& state, Backend backend) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  Matrix<float> c(n, n);
  for (auto _ : state) {
    c.fill(0.0f);
    if (backend == Backend::serial)
      kernels::gemm_serial<float>(a.view(), kernels::Trans::no, b.view(), kernels::Trans::no, c.view());
    else
      kernels::gemm_parallel<float>(a.view(), kernels::Trans::no, b.view(), kernels::Trans::no, c.view());
    benchmark::DoNotOptimize(c.values().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_histograms(benchmark::State& state, Backend backend) {
  std::mt19937_64 rng(3);
  kernels::BinnedFeatures binned;
  binned.rows = static_cast<std::size_t>(state.range(0));
  binned.features = 12;
  binned.offsets = {0};
  for (std::size_t f = 0; f < binned.features; ++f) binned.offsets.push_back(binned.offsets.back() + 255);
  for (std::size_t i = 0; i < binned.rows * binned.features; ++i) binned.bins.push_back(rng() % 255);
  std::vector<double> grad(binned.rows, 0.25), hess(binned.rows, 0.1875);
  std::vector<std::uint32_t> rows(binned.rows);
  for (std::uint32_t r = 0; r < rows.size(); ++r) rows[r] = r;
  std::vector<kernels::HistogramBin> out(binned.total_bins());
  for (auto _ : state) {
    if (backend == Backend::serial)
      kernels::build_histograms_serial(binned, rows, grad, hess, out);
    else
      kernels::build_histograms_parallel(binned, rows, grad, hess, out);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_predict_batch(benchmark::State& state, models::Family family, Backend backend) {
  const auto model = models::build(models::reference_spec(family), 1);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> hr(80.0, 10.0);
  Matrix<double> windows(static_cast<std::size_t>(state.range(0)), windowing::kWindowHours);
  for (auto& v : windows.values()) v = hr(rng);
  for (auto _ : state) benchmark::DoNotOptimize(models::predict_batch(model, windows, backend));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK_CAPTURE(BM_gemm, serial, Backend::serial)->Arg(64)->Arg(256);
BENCHMARK_CAPTURE(BM_gemm, parallel, Backend::parallel)->Arg(64)->Arg(256);
BENCHMARK_CAPTURE(BM_histograms, serial, Backend::serial)->Arg(20000);
BENCHMARK_CAPTURE(BM_histograms, parallel, Backend::parallel)->Arg(20000);
BENCHMARK_CAPTURE(BM_predict_batch, mlp_serial, models::Family::mlp, Backend::serial)->Arg(2048);
BENCHMARK_CAPTURE(BM_predict_batch, mlp_parallel, models::Family::mlp, Backend::parallel)->Arg(2048);
BENCHMARK_CAPTURE(BM_predict_batch, lstm_serial, models::Family::lstm, Backend::serial)->Arg(512);
BENCHMARK_CAPTURE(BM_predict_batch, lstm_parallel, models::Family::lstm, Backend::parallel)->Arg(512);

BENCHMARK_MAIN();
