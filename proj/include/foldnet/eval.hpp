#pragma once

// Toy-task metrics: exact-sequence accuracy, mean per-token negative
// log-likelihood, and argmax agreement against a reference.

#include "foldnet/forward.hpp"
#include "foldnet/shrink.hpp"
#include "foldnet/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace foldnet {

struct EvalMetrics {
  std::size_t items = 0;
  double accuracy = 0.0;  // fraction of exactly reproduced targets
  double mean_nll = 0.0;  // per target token, teacher forced
};

/// Decoding length limit used when none is given: twice the source plus EOS.
inline std::size_t default_max_len(const std::vector<int>& src) { return 2 * src.size() + 1; }

namespace detail {

inline Vector mean_output(std::span<const Network* const> models, const Example& ex) {
  Vector p = Vector::Zero(models[0]->layers.back().size);
  for (const Network* m : models) {
    const StepOutput o = models[0]->arch == Arch::Feedforward ? forward(*m, features_of(ex.source))
                                                              : forward(*m, std::span<const int>(ex.source));
    p += softmax(o.logits);
  }
  return p / static_cast<double>(models.size());
}

inline void check_models(std::span<const Network* const> models) {
  if (models.empty()) throw NetworkError("evaluate: no models");
  for (std::size_t k = 1; k < models.size(); ++k) {
    if (models[k]->arch != models[0]->arch || models[k]->layers.back().size != models[0]->layers.back().size) {
      throw NetworkError("evaluate: model " + std::to_string(k + 1) + " has a different output space");
    }
  }
}

}  // namespace detail

/// Metrics of one model, or of the probability-averaging ensemble of several.
inline EvalMetrics evaluate(std::span<const Network* const> models, const Dataset& data) {
  detail::check_models(models);
  EvalMetrics m;
  m.items = data.items.size();
  if (data.items.empty()) return m;
  std::size_t correct = 0, tokens = 0;
  double nll = 0.0;
  for (const auto& ex : data.items) {
    if (models[0]->arch == Arch::EncDecAttention) {
      const DecodeResult out = models.size() == 1 ? greedy_decode(*models[0], ex.source, default_max_len(ex.source))
                                                  : ensemble_decode(models, ex.source, default_max_len(ex.source));
      const bool ended = out.distributions.size() > out.tokens.size();
      if (ended && std::equal(out.tokens.begin(), out.tokens.end(), ex.target.begin(), ex.target.end() - 1) &&
          out.tokens.size() + 1 == ex.target.size()) {
        ++correct;
      }
      const auto dists = ensemble_forward(models, ex.source, ex.target);
      for (std::size_t i = 0; i < dists.size(); ++i) nll -= std::log(std::max(dists[i](ex.target[i]), 1e-300));
      tokens += ex.target.size();
    } else {
      const Vector p = detail::mean_output(models, ex);
      correct += argmax(p) == ex.target.at(0) ? 1 : 0;
      nll -= std::log(std::max(p(ex.target.at(0)), 1e-300));
      ++tokens;
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(data.items.size());
  m.mean_nll = nll / static_cast<double>(std::max<std::size_t>(tokens, 1));
  return m;
}

inline EvalMetrics evaluate(const Network& model, const Dataset& data) {
  const Network* p[] = {&model};
  return evaluate(std::span<const Network* const>(p), data);
}

/// Argmax agreement of `cand` with the reference ensemble on the dataset
/// sources (decoders are compared step by step along the reference output).
inline double agreement(std::span<const Network* const> refs, const Network& cand, const Dataset& data) {
  if (cand.arch == Arch::Feedforward) {
    std::vector<Vector> xs;
    for (const auto& ex : data.items) xs.push_back(features_of(ex.source));
    return divergence(refs, cand, std::span<const Vector>(xs)).agreement;
  }
  std::vector<std::vector<int>> srcs;
  std::size_t longest = 0;
  for (const auto& ex : data.items) {
    srcs.push_back(ex.source);
    longest = std::max(longest, default_max_len(ex.source));
  }
  return divergence(refs, cand, std::span<const std::vector<int>>(srcs), CompareOn::Probabilities, longest).agreement;
}

}  // namespace foldnet
