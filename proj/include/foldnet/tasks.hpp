#pragma once

// Synthetic toy tasks.
//
// Token ids 0 and 1 are reserved for end-of-sequence and begin-of-sequence in
// Reverse/Copy, so a vocabulary of size V carries symbols 2..V-1. Targets
// of sequence tasks end with EOS. Parity uses raw bits 0/1 and a single class
// label target.

#include "foldnet/network.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace foldnet {

enum class Task { Reverse, Copy, Parity };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::Reverse: return "reverse";
    case Task::Copy: return "copy";
    case Task::Parity: return "parity";
  }
  return "?";
}

inline std::optional<Task> parse_task(std::string_view s) {
  using enum Task;
  return parse_enum(s, {Reverse, Copy, Parity});
}

struct Example {
  std::vector<int> source;
  std::vector<int> target;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::string task_name;
  int vocab_size = 0;
  std::vector<Example> items;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct TaskOptions {
  Task task = Task::Reverse;
  int vocab_size = 10;
  int min_length = 3;
  int max_length = 6;
  std::size_t count = 1000;
  std::uint64_t seed = 1;
};

inline Dataset make_task(const TaskOptions& opt) {
  if (opt.count < 1) throw std::invalid_argument("make_task: need at least one item");
  if (opt.min_length < 1 || opt.max_length < opt.min_length) {
    throw std::invalid_argument("make_task: empty length range [" + std::to_string(opt.min_length) + ", " +
                                std::to_string(opt.max_length) + "]");
  }
  Dataset ds;
  ds.task_name = std::string(to_string(opt.task));
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<int> length(opt.min_length, opt.max_length);

  if (opt.task == Task::Parity) {
    ds.vocab_size = 2;
    std::uniform_int_distribution<int> bit(0, 1);
    for (std::size_t n = 0; n < opt.count; ++n) {
      Example ex;
      const int len = length(rng);
      int parity = 0;
      for (int t = 0; t < len; ++t) {
        ex.source.push_back(bit(rng));
        parity ^= ex.source.back();
      }
      ex.target = {parity};
      ds.items.push_back(std::move(ex));
    }
    return ds;
  }

  if (opt.vocab_size < 3) throw std::invalid_argument("make_task: vocab_size must leave room for symbols beside EOS/BOS");
  ds.vocab_size = opt.vocab_size;
  std::uniform_int_distribution<int> symbol(2, opt.vocab_size - 1);
  for (std::size_t n = 0; n < opt.count; ++n) {
    Example ex;
    const int len = length(rng);
    for (int t = 0; t < len; ++t) ex.source.push_back(symbol(rng));
    ex.target = ex.source;
    if (opt.task == Task::Reverse) std::reverse(ex.target.begin(), ex.target.end());
    ex.target.push_back(kEos);
    ds.items.push_back(std::move(ex));
  }
  return ds;
}

/// Held-out split: same task and lengths under a derived seed.
inline Dataset make_heldout(TaskOptions opt, std::size_t count) {
  opt.seed = opt.seed * 0x9E3779B97F4A7C15ULL + 0x5EED;
  opt.count = count;
  return make_task(opt);
}

/// Feature vector view of a token sequence (Feedforward inputs).
inline Vector features_of(const std::vector<int>& tokens) {
  Vector x(static_cast<Eigen::Index>(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) x(static_cast<Eigen::Index>(i)) = tokens[i];
  return x;
}

}  // namespace foldnet
