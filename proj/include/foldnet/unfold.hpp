#pragma once

// Unfolding: K topology-identical networks become one network whose inner
// layers are the concatenation of the members' inner layers.
//
//   inner -> inner          block diagonal of the member matrices
//   inner -> non-inner      vertical stack scaled by 1/K
//   non-inner -> inner      horizontal concatenation
//   non-inner -> non-inner  mean of the member matrices
//
// The attention energy projection maps an inner layer onto a scalar, so it is
// stacked and scaled like any inner -> non-inner connection; the unfolded
// network therefore softmaxes the mean member energy once per position.

#include "foldnet/network.hpp"

#include <span>
#include <string>
#include <vector>

namespace foldnet {

enum class LayerRole { BiasOrInput, Inner, Output };

inline LayerRole layer_role(int d, int output_id) {
  if (d < 0 || d > output_id) {
    throw NetworkError("layer_role: layer " + std::to_string(d) + " outside [0, " + std::to_string(output_id) + "]");
  }
  if (d <= 1) return LayerRole::BiasOrInput;
  if (d == output_id) return LayerRole::Output;
  return LayerRole::Inner;
}

inline bool is_inner(const Network& net, int d) { return layer_role(d, net.output_id()) == LayerRole::Inner; }

inline Network unfold(std::span<const Network* const> nets) {
  if (nets.empty()) throw NetworkError("unfold: no networks given");
  const Network& first = *nets[0];
  validate(first);
  for (std::size_t k = 1; k < nets.size(); ++k) {
    if (auto diff = topology_difference(first, *nets[k])) {
      throw NetworkError("unfold: network " + std::to_string(k + 1) + " does not match network 1: " + *diff);
    }
  }
  const auto count = static_cast<int>(nets.size());
  const double inv_k = 1.0 / static_cast<double>(count);

  Network out;
  out.arch = first.arch;
  out.vocab_size = first.vocab_size;
  out.layers = first.layers;
  for (auto& l : out.layers) {
    if (is_inner(first, l.id)) l.size *= count;
  }
  out.member_sizes.reserve(first.layers.size());
  for (const auto& l : first.layers) out.member_sizes.push_back(l.size);
  out.member_parameters = first.parameter_count();

  for (const auto& c : first.connections) {
    std::vector<const Matrix*> blocks;
    blocks.reserve(nets.size());
    for (const Network* n : nets) {
      blocks.push_back(&n->connections[static_cast<std::size_t>(n->find_connection(c.from, c.to, c.tag))].weights);
    }
    const bool from_inner = is_inner(first, c.from);
    const bool to_inner = c.tag != Tag::Energy && is_inner(first, c.to);

    Connection u{c.from, c.to, c.tag, {}};
    if (from_inner && to_inner) {
      u.weights = block_diagonal(blocks);
    } else if (from_inner) {
      u.weights = stack_vertical(blocks) * inv_k;
    } else if (to_inner) {
      u.weights = stack_horizontal(blocks);
    } else {
      u.weights = Matrix::Zero(c.weights.rows(), c.weights.cols());
      for (const Matrix* b : blocks) u.weights += *b;
      u.weights *= inv_k;
    }
    out.connections.push_back(std::move(u));
  }
  validate(out);
  return out;
}

inline Network unfold(const std::vector<Network>& nets) {
  std::vector<const Network*> ptrs;
  ptrs.reserve(nets.size());
  for (const auto& n : nets) ptrs.push_back(&n);
  return unfold(std::span<const Network* const>(ptrs));
}

/// Parameter count of `net` relative to `reference`.
inline double size_factor(const Network& net, const Network& reference) {
  const std::size_t ref = reference.parameter_count();
  if (ref == 0) throw NetworkError("size_factor: reference network has no parameters");
  return static_cast<double>(net.parameter_count()) / static_cast<double>(ref);
}

/// Size factor against the recorded member size, or 1.0 for networks that
/// were never unfolded.
inline double member_size_factor(const Network& net) {
  if (net.member_parameters == 0) return 1.0;
  return static_cast<double>(net.parameter_count()) / static_cast<double>(net.member_parameters);
}

}  // namespace foldnet
