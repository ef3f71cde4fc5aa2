#include "pgmfuse/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace pgmfuse::threading {
namespace {

int g_threads = static_cast<int>(std::thread::hardware_concurrency());

// One parallel region. Chunks are claimed through an atomic counter, so each
// chunk runs exactly once; the chunk -> range mapping is fixed by the caller,
// which keeps results independent of worker count and scheduling.
struct Job {
    std::function<void(std::size_t)> fn;
    std::size_t n_chunks = 0;
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    std::mutex mu;
    std::condition_variable cv;

    void drain() {
        while (true) {
            const std::size_t k = next.fetch_add(1);
            if (k >= n_chunks) break;
            fn(k);
            if (done.fetch_add(1) + 1 == n_chunks) {
                std::lock_guard lk(mu);
                cv.notify_all();
            }
        }
    }

    void wait() {
        std::unique_lock lk(mu);
        cv.wait(lk, [this] { return done.load() == n_chunks; });
    }
};

class Pool {
  public:
    explicit Pool(int workers) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run(std::shared_ptr<Job> job) {
        {
            std::lock_guard lk(mu_);
            current_ = job;
            ++generation_;
        }
        cv_.notify_all();
        job->drain();  // submitting thread works too
        job->wait();
        {
            std::lock_guard lk(mu_);
            if (current_ == job) current_.reset();
        }
    }

  private:
    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            std::shared_ptr<Job> job;
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                job = current_;
            }
            if (job) job->drain();
        }
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::thread> threads_;
    std::shared_ptr<Job> current_;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

Pool* pool() {
    static Pool* p = nullptr;
    static int built_for = -1;
    if (g_threads <= 1) return nullptr;
    if (!p || built_for != g_threads) {
        delete p;
        p = new Pool(g_threads - 1);
        built_for = g_threads;
    }
    return p;
}

}  // namespace

void set_thread_count(int n) { g_threads = n < 1 ? 1 : n; }

int thread_count() { return g_threads < 1 ? 1 : g_threads; }

void parallel_chunks(std::size_t total, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t)>& fn) {
    if (total == 0) return;
    if (chunk_size == 0) chunk_size = 1;
    const std::size_t n_chunks = (total + chunk_size - 1) / chunk_size;
    auto run_chunk = [&fn, total, chunk_size](std::size_t k) {
        const std::size_t b = k * chunk_size;
        const std::size_t e = b + chunk_size < total ? b + chunk_size : total;
        fn(b, e);
    };
    Pool* p = pool();
    if (!p || n_chunks == 1) {
        for (std::size_t k = 0; k < n_chunks; ++k) run_chunk(k);
        return;
    }
    auto job = std::make_shared<Job>();
    job->fn = run_chunk;
    job->n_chunks = n_chunks;
    p->run(std::move(job));
}

void parallel_items(std::size_t total,
                    const std::function<void(std::size_t)>& fn) {
    parallel_chunks(total, 1, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) fn(i);
    });
}

}  // namespace pgmfuse::threading
