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
#ifndef FRACTFIELD_PARALLEL_HPP
#define FRACTFIELD_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace fractfield {

/// Worker cap for parallel loops. Resolution order: set_max_threads(),
/// FRACTFIELD_THREADS, hardware concurrency.
int max_threads();
void set_max_threads(int n);

/// Runs fn(begin, end) over contiguous chunks of [begin, end).
/// Chunk boundaries depend only on the range and grain, never on the worker
/// count, and chunks write disjoint outputs, so results are bit-identical
/// across schedules and across --threads settings.
void parallel_for_chunks(std::size_t begin, std::size_t end, std::size_t grain,
                         const std::function<void(std::size_t, std::size_t)>& fn);

/// Deterministic sum reduction: term(i) is accumulated per chunk in index
/// order, chunk partials are then summed in chunk order.
double parallel_sum(std::size_t n, std::size_t grain,
                    const std::function<double(std::size_t)>& term);

}  // namespace fractfield

#endif
