/*=========================================================================
 *
 *  Copyright FractField Contributors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/
#include "fractfield/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <thread>
#include <vector>

namespace fractfield {

namespace {

int g_max_threads = 0;  // 0 = unresolved

int resolve_threads() {
    if (g_max_threads > 0) return g_max_threads;
    if (const char* env = std::getenv("FRACTFIELD_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

}  // namespace

int max_threads() { return resolve_threads(); }

void set_max_threads(int n) {
    if (n < 1) throw std::invalid_argument("thread cap must be >= 1");
    g_max_threads = n;
}

void parallel_for_chunks(std::size_t begin, std::size_t end, std::size_t grain,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    if (end <= begin) return;
    if (grain == 0) grain = 1;
    const std::size_t n = end - begin;
    const std::size_t nchunks = (n + grain - 1) / grain;
    const int workers = std::min<std::size_t>(static_cast<std::size_t>(max_threads()), nchunks);

    if (workers <= 1) {
        for (std::size_t c = 0; c < nchunks; ++c) {
            const std::size_t lo = begin + c * grain;
            fn(lo, std::min(lo + grain, end));
        }
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    auto work = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= nchunks || failed.load()) return;
            const std::size_t lo = begin + c * grain;
            try {
                fn(lo, std::min(lo + grain, end));
            } catch (...) {
                if (!failed.exchange(true)) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int t = 1; t < workers; ++t) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();
    if (failed.load() && error) std::rethrow_exception(error);
}

double parallel_sum(std::size_t n, std::size_t grain,
                    const std::function<double(std::size_t)>& term) {
    if (n == 0) return 0.0;
    if (grain == 0) grain = 1;
    const std::size_t nchunks = (n + grain - 1) / grain;
    std::vector<double> partial(nchunks, 0.0);
    parallel_for_chunks(0, n, grain, [&](std::size_t lo, std::size_t hi) {
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += term(i);
        partial[lo / grain] = acc;
    });
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

}  // namespace fractfield
