#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>

namespace rgtn {

// Two-lane executor: one persistent helper thread, the caller runs lane 0.
// Work splits the same way regardless of core count, so results never depend
// on the machine. The helper spins briefly before sleeping; virtualized
// schedulers add milliseconds of wake latency to a plain condition variable,
// which would dwarf the per-batch work it synchronizes.
class DuoPool {
public:
    DuoPool() : worker_([this] { loop(); }) {}
    DuoPool(const DuoPool&) = delete;
    DuoPool& operator=(const DuoPool&) = delete;

    ~DuoPool() {
        stop_.store(true);
        {
            std::lock_guard<std::mutex> lk(mu_);
        }
        cv_.notify_all();
        worker_.join();
    }

    void run_pair(const std::function<void()>& mine, std::function<void()> theirs) {
        task_ = std::move(theirs);
        done_.store(false, std::memory_order_relaxed);
        has_task_.store(true);  // seq_cst pairs with the sleep predicate
        if (asleep_.load()) {
            // the lock serializes with the worker's block, so the notify
            // cannot slip into the window between its predicate and wait
            std::lock_guard<std::mutex> lk(mu_);
            cv_.notify_all();
        }
        mine();
        while (!done_.load(std::memory_order_acquire)) cpu_relax();
    }

    static DuoPool& shared() {
        static DuoPool pool;
        return pool;
    }

private:
    static void cpu_relax() {
#if defined(__x86_64__) || defined(__i386__)
        __builtin_ia32_pause();
#else
        std::this_thread::yield();
#endif
    }

    void loop() {
        constexpr int kSpinRounds = 40000;  // ~tens of microseconds
        while (!stop_.load(std::memory_order_acquire)) {
            bool got = false;
            for (int spin = 0; spin < kSpinRounds; ++spin) {
                if (has_task_.load(std::memory_order_acquire)) {
                    got = true;
                    break;
                }
                cpu_relax();
            }
            if (!got) {
                std::unique_lock<std::mutex> lk(mu_);
                asleep_.store(true);
                cv_.wait(lk, [this] { return stop_.load() || has_task_.load(); });
                asleep_.store(false);
                if (stop_.load()) return;
            }
            if (has_task_.load(std::memory_order_acquire)) {
                task_();
                has_task_.store(false, std::memory_order_relaxed);
                done_.store(true, std::memory_order_release);
            }
        }
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::function<void()> task_;
    std::atomic<bool> has_task_{false};
    std::atomic<bool> done_{true};
    std::atomic<bool> asleep_{false};
    std::atomic<bool> stop_{false};
    std::thread worker_;
};

}  // namespace rgtn
