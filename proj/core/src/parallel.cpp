#include "spkvec/parallel.hpp"

#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace spkvec {
namespace {

// Persistent pool: ops issue many small parallel_for calls per training step,
// so thread spawn cost per call would dominate.
class Pool {
public:
    explicit Pool(std::size_t workers) {
        for (std::size_t i = 0; i < workers; ++i) {
            threads_.emplace_back([this, i] { worker_loop(i + 1); });
        }
    }

    ~Pool() {
        {
            std::unique_lock lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    std::size_t lanes() const { return threads_.size() + 1; }

    // Nested or concurrent calls degrade to inline execution; only one
    // top-level dispatch may own the workers at a time.
    void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
        if (inside_job) {
            fn(0, n);
            return;
        }
        std::unique_lock serial(run_mu_, std::try_to_lock);
        if (!serial.owns_lock()) {
            fn(0, n);
            return;
        }
        const std::size_t lane_count = lanes();
        {
            std::unique_lock lk(mu_);
            job_ = &fn;
            job_n_ = n;
            pending_ = threads_.size();
            ++generation_;
        }
        cv_.notify_all();
        run_chunk(0, n, lane_count, fn);
        std::unique_lock lk(mu_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

    static thread_local bool inside_job;

private:
    static void run_chunk(std::size_t lane, std::size_t n, std::size_t lanes,
                          const std::function<void(std::size_t, std::size_t)>& fn) {
        const std::size_t begin = n * lane / lanes;
        const std::size_t end = n * (lane + 1) / lanes;
        if (begin < end) fn(begin, end);
    }

    void worker_loop(std::size_t lane) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::size_t, std::size_t)>* job = nullptr;
            std::size_t n = 0;
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                job = job_;
                n = job_n_;
            }
            if (job) {
                inside_job = true;
                run_chunk(lane, n, lanes(), *job);
                inside_job = false;
            }
            {
                std::unique_lock lk(mu_);
                if (--pending_ == 0) done_cv_.notify_one();
            }
        }
    }

    std::mutex run_mu_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::vector<std::thread> threads_;
    const std::function<void(std::size_t, std::size_t)>* job_ = nullptr;
    std::size_t job_n_ = 0;
    std::size_t pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

thread_local bool Pool::inside_job = false;

std::size_t configured_threads() {
    if (const char* env = std::getenv("SPKVEC_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

Pool* pool() {
    static const std::size_t n = configured_threads();
    if (n <= 1) return nullptr;
    static Pool p(n - 1);
    return &p;
}

}  // namespace

std::size_t thread_count() {
    Pool* p = pool();
    return p ? p->lanes() : 1;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    Pool* p = pool();
    if (p == nullptr || n < 2) {
        fn(0, n);
        return;
    }
    p->run(n, fn);
}

}  // namespace spkvec
