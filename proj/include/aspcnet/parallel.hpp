#ifndef ASPCNET_PARALLEL_HPP
#define ASPCNET_PARALLEL_HPP

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace aspcnet {

/// Shared worker pool. Work is expressed as an indexed set of chunks; the
/// chunk partition is fixed by the caller, so which worker runs a chunk never
/// changes what is computed, only when. Chunk bodies must write disjoint
/// outputs (or per-chunk buffers merged by the caller in chunk order).
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void set_threads(int n) {
    std::lock_guard<std::mutex> api_lock(api_mutex_);
    if (n < 1) n = 1;
    if (n == threads_) return;
    stop_workers();
    threads_ = n;
    start_workers();
  }

  int threads() const { return threads_; }

  void run_chunks(int n_chunks, const std::function<void(int)>& fn) {
    if (n_chunks <= 0) return;
    if (threads_ == 1 || n_chunks == 1) {
      for (int i = 0; i < n_chunks; ++i) fn(i);
      return;
    }
    std::lock_guard<std::mutex> api_lock(api_mutex_);
    {
      std::lock_guard<std::mutex> lock(mutex_);
      fn_ = &fn;
      next_chunk_.store(0, std::memory_order_relaxed);
      total_chunks_ = n_chunks;
      pending_ = n_chunks;
      ++generation_;
    }
    wake_.notify_all();
    // The calling thread works alongside the pool.
    for (;;) {
      const int chunk = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (chunk >= total_chunks_) break;
      fn(chunk);
      std::lock_guard<std::mutex> lock(mutex_);
      if (--pending_ == 0) done_.notify_all();
    }
    // Wait until every chunk ran AND every worker left the work loop, so no
    // worker can still hold a pointer to `fn` when it goes out of scope.
    std::unique_lock<std::mutex> lock(mutex_);
    done_.wait(lock, [&] { return pending_ == 0 && active_workers_ == 0; });
    fn_ = nullptr;
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() { start_workers(); }

  void start_workers() {
    stopping_ = false;
    for (int i = 1; i < threads_; ++i)
      workers_.emplace_back([this] { worker_loop(); });
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stopping_ = true;
      ++generation_;
    }
    wake_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(int)>* fn = nullptr;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        wake_.wait(lock, [&] { return stopping_ || generation_ != seen; });
        seen = generation_;
        if (stopping_) return;
        fn = fn_;
        if (fn) ++active_workers_;
      }
      if (!fn) continue;
      for (;;) {
        const int chunk = next_chunk_.fetch_add(1, std::memory_order_relaxed);
        if (chunk >= total_chunks_) break;
        (*fn)(chunk);
        std::lock_guard<std::mutex> lock(mutex_);
        if (--pending_ == 0) done_.notify_all();
      }
      {
        std::lock_guard<std::mutex> lock(mutex_);
        if (--active_workers_ == 0 && pending_ == 0) done_.notify_all();
      }
    }
  }

  std::mutex api_mutex_;
  std::mutex mutex_;
  std::condition_variable wake_, done_;
  std::vector<std::thread> workers_;
  const std::function<void(int)>* fn_ = nullptr;
  std::atomic<int> next_chunk_{0};
  int total_chunks_ = 0;
  int pending_ = 0;
  int active_workers_ = 0;
  std::uint64_t generation_ = 0;
  bool stopping_ = false;
  int threads_ = 1;
};

/// Runs fn(i) for i in [0, n); parallel when the pool has workers.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  ThreadPool::instance().run_chunks(n, fn);
}

}  // namespace aspcnet

#endif  // ASPCNET_PARALLEL_HPP
