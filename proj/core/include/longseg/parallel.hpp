#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace longseg {

/// Splits [0, n) into `threads` contiguous chunks and runs `body(chunk, begin, end)`
/// on each. Chunk boundaries depend only on (n, threads), so any reduction that
/// combines per-chunk partials in chunk order is deterministic for a fixed
/// thread count.
inline void parallel_chunks(std::size_t n, int threads,
                            const std::function<void(int, std::size_t, std::size_t)>& body) {
  if (threads <= 1 || n == 0) {
    body(0, 0, n);
    return;
  }
  const auto nt = static_cast<std::size_t>(threads);
  std::vector<std::thread> pool;
  pool.reserve(nt);
  const std::size_t chunk = (n + nt - 1) / nt;
  for (std::size_t c = 0; c < nt; ++c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back(body, static_cast<int>(c), begin, end);
  }
  for (auto& t : pool) t.join();
}

/// Reductions below always decompose [0, n) into blocks of this fixed size and
/// combine per-block partials in block order, so their results are bitwise
/// identical for every thread count (threads only decide who computes which
/// block).
inline constexpr std::size_t kReductionBlock = 4096;

/// Deterministic parallel sum: fixed-size block partials combined in block order.
inline double parallel_sum(std::size_t n, int threads,
                           const std::function<double(std::size_t, std::size_t)>& partial) {
  const std::size_t nb = (n + kReductionBlock - 1) / kReductionBlock;
  if (nb <= 1) return partial(0, n);
  std::vector<double> blocks(nb, 0.0);
  parallel_chunks(nb, threads, [&](int, std::size_t b, std::size_t e) {
    for (std::size_t blk = b; blk < e; ++blk) {
      const std::size_t lo = blk * kReductionBlock;
      blocks[blk] = partial(lo, std::min(n, lo + kReductionBlock));
    }
  });
  double total = 0.0;
  for (double p : blocks) total += p;
  return total;
}

/// Blocked reduction into an arbitrary accumulator type: each fixed-size block
/// folds its elements into a copy of `init`, and the block partials are
/// combined in block order by `merge(total, partial)`.
template <typename Acc, typename Fold, typename Merge>
Acc parallel_reduce(std::size_t n, int threads, const Acc& init, const Fold& fold,
                    const Merge& merge) {
  const std::size_t nb = (n + kReductionBlock - 1) / kReductionBlock;
  if (nb <= 1) {
    Acc acc = init;
    for (std::size_t i = 0; i < n; ++i) fold(acc, i);
    return acc;
  }
  std::vector<Acc> blocks(nb, init);
  parallel_chunks(nb, threads, [&](int, std::size_t b, std::size_t e) {
    for (std::size_t blk = b; blk < e; ++blk) {
      Acc& acc = blocks[blk];
      const std::size_t lo = blk * kReductionBlock;
      const std::size_t hi = std::min(n, lo + kReductionBlock);
      for (std::size_t i = lo; i < hi; ++i) fold(acc, i);
    }
  });
  Acc total = init;
  for (const Acc& p : blocks) merge(total, p);
  return total;
}

}  // namespace longseg
