#include "cascade/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace cascade {
namespace {

std::size_t g_workers = 1;

// Lazily started pool of g_workers-1 helper threads; the caller executes the
// first chunk itself. Threads persist across calls to avoid spawn overhead in
// the inner training loops.
class Pool {
public:
  static Pool& instance() {
    static Pool pool;
    return pool;
  }

  void run(std::size_t nchunks,
           const std::function<void(std::size_t)>& chunk_fn) {
    ensure_threads(nchunks - 1);
    {
      std::unique_lock<std::mutex> lock(mu_);
      chunk_fn_ = &chunk_fn;
      nchunks_ = nchunks;
      pending_ = nchunks - 1;
      ++epoch_;
    }
    cv_.notify_all();
    chunk_fn(0);
    std::unique_lock<std::mutex> lock(mu_);
    done_cv_.wait(lock, [&] { return pending_ == 0; });
    chunk_fn_ = nullptr;
  }

private:
  Pool() = default;

  ~Pool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stopping_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void ensure_threads(std::size_t n) {
    while (threads_.size() < n) {
      const std::size_t id = threads_.size() + 1;
      threads_.emplace_back([this, id] { worker_loop(id); });
    }
  }

  void worker_loop(std::size_t id) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t)>* fn = nullptr;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return epoch_ != seen || stopping_; });
        if (stopping_) return;
        seen = epoch_;
        if (id >= nchunks_) continue;  // fewer chunks than threads this round
        fn = chunk_fn_;
      }
      (*fn)(id);
      std::unique_lock<std::mutex> lock(mu_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(std::size_t)>* chunk_fn_ = nullptr;
  std::size_t nchunks_ = 0;
  std::size_t pending_ = 0;
  std::uint64_t epoch_ = 0;
  bool stopping_ = false;
};

}  // namespace

void set_workers(std::size_t n) { g_workers = n == 0 ? 1 : n; }

std::size_t workers() { return g_workers; }

void parallel_for_ranges(std::size_t count,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
  if (count == 0) return;
  const std::size_t nw = g_workers < count ? g_workers : count;
  if (nw <= 1) {
    fn(0, count);
    return;
  }
  const std::size_t base = count / nw;
  const std::size_t extra = count % nw;
  // Chunk c covers [c*base + min(c,extra), ...) — a function of (count, nw)
  // only, so the index->thread mapping is stable for a given worker count.
  auto chunk = [&](std::size_t c) {
    const std::size_t lo = c * base + (c < extra ? c : extra);
    const std::size_t hi = lo + base + (c < extra ? 1 : 0);
    fn(lo, hi);
  };
  Pool::instance().run(nw, chunk);
}

void parallel_for(std::size_t count,
                  const std::function<void(std::size_t)>& fn) {
  parallel_for_ranges(count, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace cascade
