#pragma once

// Decoding throughput: output tokens per second, median over repetitions,
// after one warm-up repetition. Threads decode disjoint shards of the inputs.

#include "foldnet/eval.hpp"
#include "foldnet/unfold.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <stdexcept>
#include <thread>
#include <vector>

namespace foldnet {

struct BenchOptions {
  int repetitions = 5;
  int threads = 1;
};

struct BenchResult {
  double tokens_per_second = 0.0;  // median repetition
  double wall_seconds = 0.0;       // median repetition
  int repetitions = 0;
  int threads = 1;
  std::size_t tokens = 0;  // output tokens per repetition, EOS included
  double size_factor = 1.0;
  std::vector<double> rep_seconds;
};

inline nlohmann::json to_json(const BenchResult& b) {
  return {{"tokens_per_second", b.tokens_per_second}, {"wall_seconds", b.wall_seconds}, {"repetitions", b.repetitions},
          {"threads", b.threads},   {"tokens", b.tokens},         {"size_factor", b.size_factor},
          {"rep_seconds", b.rep_seconds}};
}

namespace detail {

inline std::size_t decode_shard(const Network& net, std::span<const std::vector<int>> inputs) {
  std::size_t tokens = 0;
  for (const auto& src : inputs) {
    if (net.arch == Arch::EncDecAttention) {
      tokens += greedy_decode(net, src, default_max_len(src)).distributions.size();
    } else if (net.arch == Arch::SeqClassifier) {
      forward(net, std::span<const int>(src));
      ++tokens;
    } else {
      forward(net, features_of(src));
      ++tokens;
    }
  }
  return tokens;
}

inline std::size_t decode_all(const Network& net, std::span<const std::vector<int>> inputs, int threads) {
  if (threads == 1) return decode_shard(net, inputs);
  std::atomic<std::size_t> total{0};
  std::vector<std::thread> pool;
  const std::size_t n = inputs.size();
  const auto t = static_cast<std::size_t>(threads);
  for (std::size_t k = 0; k < t; ++k) {
    const std::size_t lo = n * k / t, hi = n * (k + 1) / t;
    pool.emplace_back([&, lo, hi] { total += decode_shard(net, inputs.subspan(lo, hi - lo)); });
  }
  for (auto& th : pool) th.join();
  return total.load();
}

}  // namespace detail

inline BenchResult bench(const Network& net, std::span<const std::vector<int>> inputs, const BenchOptions& opt) {
  if (opt.repetitions < 3) throw std::invalid_argument("bench: at least 3 repetitions are required");
  if (opt.threads < 1) throw std::invalid_argument("bench: threads must be at least 1");
  if (inputs.empty()) throw std::invalid_argument("bench: no inputs");
  BenchResult r;
  r.repetitions = opt.repetitions;
  r.threads = opt.threads;
  r.size_factor = member_size_factor(net);
  r.tokens = detail::decode_all(net, inputs, opt.threads);  // warm-up
  for (int k = 0; k < opt.repetitions; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    detail::decode_all(net, inputs, opt.threads);
    r.rep_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::vector<double> sorted = r.rep_seconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  r.wall_seconds = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  r.tokens_per_second = static_cast<double>(r.tokens) / std::max(r.wall_seconds, 1e-12);
  return r;
}

}  // namespace foldnet
