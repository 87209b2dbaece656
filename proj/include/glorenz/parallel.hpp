#ifndef GLORENZ_PARALLEL_HPP
#define GLORENZ_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace glorenz {

// Work is cut into blocks whose size never depends on the thread count, and
// every block writes only its own output slot. Merging slots in block order
// therefore gives the same bytes for 1 or 64 threads.
struct Parallel {
    unsigned threads = 1;

    template <class Fn>  // fn(block, begin, end)
    void blocks(std::size_t n, std::size_t block_size, Fn&& fn) const
    {
        if (n == 0)
            return;
        block_size = std::max<std::size_t>(block_size, 1);
        const std::size_t nb = (n + block_size - 1) / block_size;
        auto run = [&](std::size_t b) {
            const std::size_t lo = b * block_size;
            fn(b, lo, std::min(n, lo + block_size));
        };
        const unsigned nt = static_cast<unsigned>(std::min<std::size_t>(std::max(threads, 1u), nb));
        if (nt <= 1) {
            for (std::size_t b = 0; b < nb; ++b)
                run(b);
            return;
        }
        std::atomic<std::size_t> next{0};
        std::exception_ptr err;
        std::mutex err_mu;
        auto worker = [&] {
            for (;;) {
                const std::size_t b = next.fetch_add(1);
                if (b >= nb)
                    return;
                try {
                    run(b);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!err)
                        err = std::current_exception();
                }
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(nt - 1);
        for (unsigned t = 1; t < nt; ++t)
            pool.emplace_back(worker);
        worker();
        for (auto& th : pool)
            th.join();
        if (err)
            std::rethrow_exception(err);
    }

    template <class Fn>  // fn(i)
    void each(std::size_t n, Fn&& fn, std::size_t block_size = 256) const
    {
        blocks(n, block_size, [&](std::size_t, std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i)
                fn(i);
        });
    }
};

}  // namespace glorenz

#endif
