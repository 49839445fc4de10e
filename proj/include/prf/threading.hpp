#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace prf {

// Work-stealing-free chunked parallel-for. Chunk boundaries are a function of
// the problem size and the caller's grain only, so any per-chunk partial
// results can be combined in chunk order and the numerics never depend on how
// many threads happened to run.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  // n == 0 picks hardware concurrency. Safe to call between parallel sections.
  void configure(unsigned n) {
    if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
    if (n == workers_.size() + 1) return;
    shutdown();
    spawn(n);
  }

  unsigned threadCount() const { return static_cast<unsigned>(workers_.size()) + 1; }

  // fn(chunkBegin, chunkEnd, chunkIndex); chunks are [k*grain, min(n,(k+1)*grain)).
  void parallelFor(size_t n, size_t grain,
                   const std::function<void(size_t, size_t, size_t)>& fn) {
    if (n == 0) return;
    if (grain == 0) grain = 1;
    size_t chunks = (n + grain - 1) / grain;
    if (workers_.empty() || chunks == 1) {
      for (size_t k = 0; k < chunks; ++k)
        fn(k * grain, std::min(n, (k + 1) * grain), k);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(m_);
      jobN_ = n;
      jobGrain_ = grain;
      jobChunks_ = chunks;
      jobNext_.store(0, std::memory_order_relaxed);
      jobDone_.store(0, std::memory_order_relaxed);
      jobFn_ = &fn;
      ++epoch_;
    }
    cv_.notify_all();
    workLoop();
    // Main thread ran out of chunks; wait for stragglers.
    std::unique_lock<std::mutex> lk(m_);
    cvDone_.wait(lk, [&] { return jobDone_.load(std::memory_order_acquire) == jobChunks_; });
    jobFn_ = nullptr;
  }

  ~ThreadPool() { shutdown(); }

 private:
  ThreadPool() { spawn(std::max(1u, std::thread::hardware_concurrency())); }

  void spawn(unsigned n) {
    stop_ = false;
    for (unsigned i = 1; i < n; ++i)
      workers_.emplace_back([this] { workerMain(); });
  }

  void shutdown() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void workerMain() {
    uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
        if (!jobFn_) continue;
      }
      workLoop();
    }
  }

  void workLoop() {
    const auto* fn = jobFn_;
    if (!fn) return;
    for (;;) {
      size_t k = jobNext_.fetch_add(1, std::memory_order_relaxed);
      if (k >= jobChunks_) break;
      (*fn)(k * jobGrain_, std::min(jobN_, (k + 1) * jobGrain_), k);
      if (jobDone_.fetch_add(1, std::memory_order_acq_rel) + 1 == jobChunks_) {
        std::lock_guard<std::mutex> lk(m_);
        cvDone_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex m_;
  std::condition_variable cv_, cvDone_;
  bool stop_ = false;
  uint64_t epoch_ = 0;
  size_t jobN_ = 0, jobGrain_ = 0, jobChunks_ = 0;
  std::atomic<size_t> jobNext_{0}, jobDone_{0};
  const std::function<void(size_t, size_t, size_t)>* jobFn_ = nullptr;
};

inline void parallelFor(size_t n, size_t grain,
                        const std::function<void(size_t, size_t, size_t)>& fn) {
  ThreadPool::instance().parallelFor(n, grain, fn);
}

}  // namespace prf
