#pragma once

#include <cstddef>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#else
inline int omp_get_max_threads() { return 1; }
inline int omp_get_thread_num() { return 0; }
#endif

namespace mtad {

// Execution policy for the data-parallel kernels. Every kernel has a plain
// serial loop (the reference) and an OpenMP path. Both produce bit-identical
// results: parallel items write to disjoint slots and reductions always run
// in item order, so the policy never changes the output, only the wall time.
enum class Exec { serial, parallel };

namespace par {

inline int max_threads() { return omp_get_max_threads(); }

template <class F>
void for_each(Exec exec, std::size_t n, F&& body) {
  if (exec == Exec::parallel) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long long i = 0; i < static_cast<long long>(n); ++i)
      body(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < n; ++i) body(i);
  }
}

// Accumulates n per-item gradient contributions of width `dim` into `acc`.
// Items are evaluated into slot buffers (parallel), then folded into acc in
// ascending item order; chunking bounds the slot memory. The fold order is
// fixed, so serial and parallel runs agree bitwise.
template <class Body>
void accumulate(Exec exec, std::size_t n, std::size_t dim,
                std::vector<double>& acc, Body&& per_item,
                std::size_t chunk = 64) {
  if (exec == Exec::serial) {
    std::vector<double> slot(dim);
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(slot.begin(), slot.end(), 0.0);
      per_item(i, slot.data());
      for (std::size_t p = 0; p < dim; ++p) acc[p] += slot[p];
    }
    return;
  }
  std::vector<double> slots;
  for (std::size_t base = 0; base < n; base += chunk) {
    const std::size_t c = std::min(chunk, n - base);
    slots.assign(c * dim, 0.0);
    for_each(Exec::parallel, c,
             [&](std::size_t j) { per_item(base + j, slots.data() + j * dim); });
    for_each(Exec::parallel, dim, [&](std::size_t p) {
      double s = acc[p];
      for (std::size_t j = 0; j < c; ++j) s += slots[j * dim + p];
      acc[p] = s;
    });
  }
}

// Ordered sum of per-item scalars (items evaluated in parallel, summed in
// index order).
template <class F>
double sum(Exec exec, std::size_t n, F&& value_of) {
  std::vector<double> v(n);
  for_each(exec, n, [&](std::size_t i) { v[i] = value_of(i); });
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return s;
}

}  // namespace par
}  // namespace mtad
