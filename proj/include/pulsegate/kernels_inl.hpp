#pragma once

#include <exception>

namespace pulsegate::kernels {

bool use_parallel(Backend backend, std::size_t work);

template <typename Fn>
void map_indices(std::size_t n, Fn&& fn, std::span<double> out, Backend backend) {
  require_shape(out.size() == n, "map_indices output size");
  if (!use_parallel(backend, n * 4096)) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return;
  }
  std::exception_ptr failure;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) num_threads(thread_budget())
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      out[static_cast<std::size_t>(i)] = fn(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(pulsegate_map_indices)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace pulsegate::kernels
