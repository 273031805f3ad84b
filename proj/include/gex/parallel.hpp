#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace gex {

// Minimal persistent worker pool. Work is handed out as chunk indices, and
// results must be keyed by chunk index (never by worker id), so outputs are
// bit-identical for any worker count. GEX_THREADS overrides the default.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int size() const { return static_cast<int>(workers_.size()) + 1; }

    // Forces inline execution; outputs must be bit-identical either way.
    void set_serial(bool v) { serial_ = v; }
    bool serial() const { return serial_; }

    // Runs fn(chunk) for chunk in [0, nchunks). The calling thread
    // participates. Serial when the pool has one slot or nchunks <= 1.
    void run_chunks(std::int64_t nchunks, const std::function<void(std::int64_t)>& fn) {
        if (nchunks <= 0) return;
        if (workers_.empty() || nchunks == 1 || serial_) {
            for (std::int64_t i = 0; i < nchunks; ++i) fn(i);
            return;
        }
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_ = &fn;
            next_.store(0, std::memory_order_relaxed);
            total_ = nchunks;
            pending_ = static_cast<int>(workers_.size());
            ++generation_;
        }
        cv_.notify_all();
        work_loop(fn, nchunks);  // main thread joins in
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        job_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

private:
    ThreadPool() {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (const char* env = std::getenv("GEX_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) n = v;
        }
        if (n < 1) n = 1;
        for (int i = 1; i < n; ++i) {
            workers_.emplace_back([this] { worker_main(); });
        }
    }

    void work_loop(const std::function<void(std::int64_t)>& fn, std::int64_t total) {
        for (;;) {
            std::int64_t c = next_.fetch_add(1, std::memory_order_relaxed);
            if (c >= total) break;
            fn(c);
        }
    }

    void worker_main() {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::int64_t)>* job = nullptr;
            std::int64_t total = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                seen = generation_;
                if (stop_) return;
                job = job_;
                total = total_;
            }
            if (job) work_loop(*job, total);
            {
                std::lock_guard<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(std::int64_t)>* job_ = nullptr;
    std::atomic<std::int64_t> next_{0};
    std::int64_t total_ = 0;
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
    bool serial_ = false;
};

// Splits [0, total) into fixed-size chunks (grain) and runs them on the pool.
// The chunk decomposition depends only on (total, grain), so any per-chunk
// partial results reduced in chunk order are independent of the worker count.
template <typename Fn>
void parallel_for(std::int64_t total, std::int64_t grain, Fn&& fn) {
    if (total <= 0) return;
    if (grain < 1) grain = 1;
    const std::int64_t nchunks = (total + grain - 1) / grain;
    if (nchunks == 1) {
        fn(std::int64_t{0}, total);
        return;
    }
    ThreadPool::instance().run_chunks(nchunks, [&](std::int64_t c) {
        const std::int64_t lo = c * grain;
        const std::int64_t hi = std::min(total, lo + grain);
        fn(lo, hi);
    });
}

}  // namespace gex
