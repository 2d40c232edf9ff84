#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace pnrcam {

inline unsigned resolve_threads(unsigned requested) {
  if (requested != 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Splits [0, n) into at most `threads` contiguous chunks and runs
/// fn(chunk_index, begin, end) on each. Chunk boundaries depend only on n and
/// the chunk count, never on scheduling.
template <class Fn>
void parallel_chunks(std::size_t n, unsigned threads, std::size_t n_chunks, Fn&& fn) {
  if (n == 0 || n_chunks == 0) return;
  n_chunks = std::min(n_chunks, n);
  auto chunk_begin = [&](std::size_t c) { return n * c / n_chunks; };
  threads = std::min<unsigned>(resolve_threads(threads), static_cast<unsigned>(n_chunks));
  if (threads <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) fn(c, chunk_begin(c), chunk_begin(c + 1));
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (unsigned w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t c = w; c < n_chunks; c += threads) {
        try {
          fn(c, chunk_begin(c), chunk_begin(c + 1));
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  workers.clear();
  if (first_error) std::rethrow_exception(first_error);
}

/// Runs fn(i) for every i in [0, n); results must be written by index.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  const std::size_t chunks = std::max<std::size_t>(1, resolve_threads(threads)) * 4;
  parallel_chunks(n, threads, chunks, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace pnrcam
