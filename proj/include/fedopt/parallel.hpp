#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <optional>
#include <thread>
#include <type_traits>
#include <vector>

namespace fedopt {

/// Evaluates fn(0..n-1) and returns the results in index order.
///
/// With threads <= 1 everything runs on the caller's thread. Otherwise up to
/// `threads` workers pull indices from a shared counter. Output slot i only
/// ever holds fn(i), so results do not depend on scheduling. If any call
/// throws, the exception from the lowest failing index is rethrown after all
/// workers have joined.
template <typename Fn>
auto parallel_map(std::size_t n, std::size_t threads, Fn&& fn) -> std::vector<std::invoke_result_t<Fn&, std::size_t>> {
  using R = std::invoke_result_t<Fn&, std::size_t>;
  std::vector<std::optional<R>> slots(n);
  std::vector<std::exception_ptr> errors(n);

  auto run_one = [&](std::size_t i) {
    try {
      slots[i].emplace(fn(i));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    const std::size_t workers = std::min(threads, n);
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) run_one(i);
      });
    }
  }

  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<R> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

}  // namespace fedopt
