#pragma once

// Layered network representation. A network is a list of layers indexed
// 0..D (0 = single bias neuron, 1 = input, D = output) plus a list of weight
// matrices W(from, to) of shape s(from) x s(to). Connections may skip layers
// or point backwards (recurrence).

#include "foldnet/linalg.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace foldnet {

class NetworkError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LayerKind { Bias, Input, Dense, Gru, AttentionScore, Output };
enum class Activation { Linear, Tanh, Sigmoid, Softmax };
enum class Arch { Feedforward, SeqClassifier, EncDecAttention };

// Role of a weight matrix inside its target layer. Gru targets take State,
// UpdateGate, ResetGate (and Init for the decoder start-state projection).
// Energy is the scalar projection v of the attention layer, stored as an
// s x 1 self-connection.
enum class Tag { Plain, State, UpdateGate, ResetGate, Init, Energy };

inline constexpr int kEos = 0;
inline constexpr int kBos = 1;

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Bias: return "Bias";
    case LayerKind::Input: return "Input";
    case LayerKind::Dense: return "Dense";
    case LayerKind::Gru: return "Gru";
    case LayerKind::AttentionScore: return "AttentionScore";
    case LayerKind::Output: return "Output";
  }
  return "?";
}

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Linear: return "Linear";
    case Activation::Tanh: return "Tanh";
    case Activation::Sigmoid: return "Sigmoid";
    case Activation::Softmax: return "Softmax";
  }
  return "?";
}

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::Feedforward: return "Feedforward";
    case Arch::SeqClassifier: return "SeqClassifier";
    case Arch::EncDecAttention: return "EncDecAttention";
  }
  return "?";
}

inline std::string_view to_string(Tag t) {
  switch (t) {
    case Tag::Plain: return "plain";
    case Tag::State: return "state";
    case Tag::UpdateGate: return "update_gate";
    case Tag::ResetGate: return "reset_gate";
    case Tag::Init: return "init";
    case Tag::Energy: return "energy";
  }
  return "?";
}

template <typename E>
std::optional<E> parse_enum(std::string_view text, std::initializer_list<E> values) {
  for (E v : values) {
    if (to_string(v) == text) return v;
  }
  return std::nullopt;
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view s) {
  using enum LayerKind;
  return parse_enum(s, {Bias, Input, Dense, Gru, AttentionScore, Output});
}
inline std::optional<Activation> parse_activation(std::string_view s) {
  using enum Activation;
  return parse_enum(s, {Linear, Tanh, Sigmoid, Softmax});
}
inline std::optional<Arch> parse_arch(std::string_view s) {
  using enum Arch;
  return parse_enum(s, {Feedforward, SeqClassifier, EncDecAttention});
}
inline std::optional<Tag> parse_tag(std::string_view s) {
  using enum Tag;
  return parse_enum(s, {Plain, State, UpdateGate, ResetGate, Init, Energy});
}

struct LayerSpec {
  int id = 0;
  LayerKind kind = LayerKind::Dense;
  int size = 0;
  Activation activation = Activation::Linear;
  std::string name;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Connection {
  int from = 0;
  int to = 0;
  Tag tag = Tag::Plain;
  Matrix weights;

  friend bool operator==(const Connection& a, const Connection& b) {
    return a.from == b.from && a.to == b.to && a.tag == b.tag &&
           a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols() &&
           a.weights == b.weights;
  }
};

inline std::string connection_label(int from, int to) {
  return "connection " + std::to_string(from) + "→" + std::to_string(to);
}

struct Network {
  Arch arch = Arch::Feedforward;
  int vocab_size = 0;
  std::vector<LayerSpec> layers;
  std::vector<Connection> connections;
  // Per-layer sizes of one ensemble member, recorded by unfold(). Empty for
  // networks that were never unfolded.
  std::vector<int> member_sizes;
  // Parameter count of one member, recorded by unfold(); 0 when unknown.
  std::size_t member_parameters = 0;

  int output_id() const { return static_cast<int>(layers.size()) - 1; }

  const LayerSpec& layer(int id) const {
    if (id < 0 || id >= static_cast<int>(layers.size())) {
      throw NetworkError("no layer " + std::to_string(id));
    }
    return layers[static_cast<std::size_t>(id)];
  }

  int find_connection(int from, int to, Tag tag) const {
    for (std::size_t i = 0; i < connections.size(); ++i) {
      const auto& c = connections[i];
      if (c.from == from && c.to == to && c.tag == tag) return static_cast<int>(i);
    }
    return -1;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : connections) n += static_cast<std::size_t>(c.weights.size());
    return n;
  }

  /// Resolves a layer by name or by decimal id.
  int layer_id(std::string_view key) const {
    for (const auto& l : layers) {
      if (l.name == key) return l.id;
    }
    int id = -1;
    try {
      std::size_t used = 0;
      id = std::stoi(std::string(key), &used);
      if (used != key.size()) id = -1;
    } catch (const std::exception&) {
      id = -1;
    }
    if (id < 0 || id >= static_cast<int>(layers.size())) {
      throw NetworkError("unknown layer '" + std::string(key) + "'");
    }
    return id;
  }

  friend bool operator==(const Network&, const Network&) = default;
};

inline bool is_gru_tag(Tag t) {
  return t == Tag::State || t == Tag::UpdateGate || t == Tag::ResetGate || t == Tag::Init;
}

/// Expected weight shape of a connection given current layer sizes.
inline std::pair<int, int> expected_shape(const Network& net, const Connection& c) {
  const int rows = net.layer(c.from).size;
  const int cols = c.tag == Tag::Energy ? 1 : net.layer(c.to).size;
  return {rows, cols};
}

/// Throws NetworkError describing the first violated structural invariant.
inline void validate(const Network& net) {
  const int n = static_cast<int>(net.layers.size());
  if (n < 3) throw NetworkError("network needs at least bias, input and output layers");
  for (int i = 0; i < n; ++i) {
    const auto& l = net.layers[static_cast<std::size_t>(i)];
    if (l.id != i) throw NetworkError("layer ids must be contiguous: found id " + std::to_string(l.id) + " at position " + std::to_string(i));
    if (l.size < 1) throw NetworkError("layer " + std::to_string(i) + ": size must be positive");
  }
  if (net.layers[0].kind != LayerKind::Bias) throw NetworkError("layer 0 must be Bias");
  if (net.layers[0].size != 1) throw NetworkError("layer 0 (Bias) must have size 1");
  if (net.layers[1].kind != LayerKind::Input) throw NetworkError("layer 1 must be Input");
  if (net.layers.back().kind != LayerKind::Output) throw NetworkError("layer " + std::to_string(n - 1) + " must be Output");
  int attention_layers = 0;
  for (int i = 2; i + 1 < n; ++i) {
    const auto kind = net.layers[static_cast<std::size_t>(i)].kind;
    if (kind == LayerKind::Bias || kind == LayerKind::Input || kind == LayerKind::Output) {
      throw NetworkError("layer " + std::to_string(i) + ": " + std::string(to_string(kind)) + " not allowed as inner layer");
    }
    if (kind == LayerKind::AttentionScore) ++attention_layers;
  }

  std::vector<bool> has_incoming(static_cast<std::size_t>(n), false);
  for (std::size_t ci = 0; ci < net.connections.size(); ++ci) {
    const auto& c = net.connections[ci];
    if (c.from < 0 || c.from >= n || c.to < 0 || c.to >= n) {
      throw NetworkError(connection_label(c.from, c.to) + ": endpoint out of range");
    }
    const auto& to = net.layers[static_cast<std::size_t>(c.to)];
    if (to.kind == LayerKind::Bias || to.kind == LayerKind::Input) {
      throw NetworkError(connection_label(c.from, c.to) + ": cannot feed into " + std::string(to_string(to.kind)) + " layer");
    }
    if (c.tag == Tag::Energy) {
      if (c.from != c.to || to.kind != LayerKind::AttentionScore) {
        throw NetworkError(connection_label(c.from, c.to) + ": energy tag only valid as AttentionScore self-connection");
      }
    } else if (c.from == c.to && to.kind != LayerKind::Gru) {
      throw NetworkError(connection_label(c.from, c.to) + ": self-connection only allowed on Gru layers");
    }
    if (to.kind == LayerKind::Gru) {
      if (!is_gru_tag(c.tag)) throw NetworkError(connection_label(c.from, c.to) + ": Gru target requires a gate tag");
    } else if (c.tag != Tag::Plain && c.tag != Tag::Energy) {
      throw NetworkError(connection_label(c.from, c.to) + ": tag " + std::string(to_string(c.tag)) + " requires a Gru target");
    }
    const auto [rows, cols] = expected_shape(net, c);
    if (c.weights.rows() != rows || c.weights.cols() != cols) {
      throw NetworkError(connection_label(c.from, c.to) + ": expected " + shape_str(rows, cols) +
                         ", found " + shape_str(c.weights.rows(), c.weights.cols()));
    }
    if (!c.weights.allFinite()) throw NetworkError(connection_label(c.from, c.to) + ": non-finite weight");
    for (std::size_t cj = 0; cj < ci; ++cj) {
      const auto& o = net.connections[cj];
      if (o.from == c.from && o.to == c.to && o.tag == c.tag) {
        throw NetworkError(connection_label(c.from, c.to) + ": duplicate " + std::string(to_string(c.tag)) + " connection");
      }
    }
    if (c.tag != Tag::Energy) has_incoming[static_cast<std::size_t>(c.to)] = true;
  }
  for (int i = 2; i < n; ++i) {
    if (!has_incoming[static_cast<std::size_t>(i)]) {
      throw NetworkError("layer " + std::to_string(i) + " has no incoming connection");
    }
  }

  auto expect_kind = [&](int id, LayerKind kind) {
    if (id >= n || net.layers[static_cast<std::size_t>(id)].kind != kind) {
      throw NetworkError(std::string(to_string(net.arch)) + ": layer " + std::to_string(id) + " must be " + std::string(to_string(kind)));
    }
  };
  switch (net.arch) {
    case Arch::Feedforward:
      for (int i = 2; i + 1 < n; ++i) expect_kind(i, LayerKind::Dense);
      for (const auto& c : net.connections) {
        if (c.from >= c.to && c.from != 0) throw NetworkError(connection_label(c.from, c.to) + ": feedforward connections must point forward");
      }
      break;
    case Arch::SeqClassifier:
      if (n != 5) throw NetworkError("SeqClassifier: expected 5 layers, found " + std::to_string(n));
      expect_kind(2, LayerKind::Dense);
      expect_kind(3, LayerKind::Gru);
      break;
    case Arch::EncDecAttention:
      if (n != 8) throw NetworkError("EncDecAttention: expected 8 layers, found " + std::to_string(n));
      expect_kind(2, LayerKind::Dense);
      expect_kind(3, LayerKind::Gru);
      expect_kind(4, LayerKind::Dense);
      expect_kind(5, LayerKind::Gru);
      expect_kind(6, LayerKind::AttentionScore);
      if (attention_layers != 1) throw NetworkError("EncDecAttention: exactly one AttentionScore layer required");
      if (net.find_connection(6, 6, Tag::Energy) < 0) throw NetworkError("EncDecAttention: attention layer lacks its energy projection");
      break;
  }
  if (net.arch != Arch::EncDecAttention && attention_layers != 0) {
    throw NetworkError(std::string(to_string(net.arch)) + ": AttentionScore layers only allowed in EncDecAttention");
  }
  if (net.arch != Arch::Feedforward) {
    if (net.vocab_size < 1) throw NetworkError("sequence network needs a positive vocab_size");
    if (net.layers[1].size != net.vocab_size) throw NetworkError("input layer size must equal vocab_size");
  }
  if (net.arch == Arch::EncDecAttention && net.layers.back().size != net.vocab_size) {
    throw NetworkError("EncDecAttention: output layer size must equal vocab_size");
  }
  if (!net.member_sizes.empty() && net.member_sizes.size() != net.layers.size()) {
    throw NetworkError("member_sizes must have one entry per layer");
  }
}

/// First structural difference between two networks (kinds, sizes,
/// activations, connection set and shapes, vocab), or nullopt if they share a
/// topology.
inline std::optional<std::string> topology_difference(const Network& a, const Network& b) {
  if (a.arch != b.arch) return "arch differs: " + std::string(to_string(a.arch)) + " vs " + std::string(to_string(b.arch));
  if (a.vocab_size != b.vocab_size) return "vocab_size differs: " + std::to_string(a.vocab_size) + " vs " + std::to_string(b.vocab_size);
  if (a.layers.size() != b.layers.size()) return "layer count differs: " + std::to_string(a.layers.size()) + " vs " + std::to_string(b.layers.size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto& x = a.layers[i];
    const auto& y = b.layers[i];
    if (x.kind != y.kind || x.size != y.size || x.activation != y.activation) {
      return "layer " + std::to_string(i) + " differs: " + std::string(to_string(x.kind)) + "[" + std::to_string(x.size) + "] vs " +
             std::string(to_string(y.kind)) + "[" + std::to_string(y.size) + "]";
    }
  }
  if (a.connections.size() != b.connections.size()) {
    return "connection count differs: " + std::to_string(a.connections.size()) + " vs " + std::to_string(b.connections.size());
  }
  for (std::size_t i = 0; i < a.connections.size(); ++i) {
    const auto& x = a.connections[i];
    const int j = b.find_connection(x.from, x.to, x.tag);
    if (j < 0) return connection_label(x.from, x.to) + " (" + std::string(to_string(x.tag)) + ") missing in second network";
    const auto& y = b.connections[static_cast<std::size_t>(j)];
    if (x.weights.rows() != y.weights.rows() || x.weights.cols() != y.weights.cols()) {
      return connection_label(x.from, x.to) + " shape differs: " + shape_str(x.weights.rows(), x.weights.cols()) + " vs " +
             shape_str(y.weights.rows(), y.weights.cols());
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Builders

struct InitOptions {
  std::uint64_t seed = 1;
  double scale = 1.0;  // multiplies the 1/sqrt(fan_in) uniform range
};

namespace detail {

class WeightInit {
 public:
  explicit WeightInit(const InitOptions& opt) : rng_(opt.seed), scale_(opt.scale) {}

  Matrix uniform(int rows, int cols, double fan_in) {
    const double a = scale_ / std::sqrt(std::max(1.0, fan_in));
    std::uniform_real_distribution<double> dist(-a, a);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return m;
  }

 private:
  std::mt19937_64 rng_;
  double scale_;
};

inline void add_gru_inputs(Network& net, WeightInit& init, int from, int to, double fan_in, bool bias) {
  const int rows = net.layers[static_cast<std::size_t>(from)].size;
  const int cols = net.layers[static_cast<std::size_t>(to)].size;
  for (Tag t : {Tag::State, Tag::UpdateGate, Tag::ResetGate}) {
    net.connections.push_back({from, to, t, bias ? Matrix(Matrix::Zero(rows, cols)) : init.uniform(rows, cols, fan_in)});
  }
}

}  // namespace detail

struct FeedforwardShape {
  int inputs = 2;
  std::vector<int> hidden{4};
  Activation hidden_activation = Activation::Tanh;
  int outputs = 2;
  Activation output_activation = Activation::Softmax;
  bool bias = true;
};

inline Network make_feedforward(const FeedforwardShape& shape, const InitOptions& opt = {}) {
  Network net;
  net.arch = Arch::Feedforward;
  net.layers.push_back({0, LayerKind::Bias, 1, Activation::Linear, "bias"});
  net.layers.push_back({1, LayerKind::Input, shape.inputs, Activation::Linear, "input"});
  for (std::size_t h = 0; h < shape.hidden.size(); ++h) {
    const int id = static_cast<int>(h) + 2;
    net.layers.push_back({id, LayerKind::Dense, shape.hidden[h], shape.hidden_activation, "hidden" + std::to_string(h + 1)});
  }
  const int out = static_cast<int>(net.layers.size());
  net.layers.push_back({out, LayerKind::Output, shape.outputs, shape.output_activation, "output"});

  detail::WeightInit init(opt);
  for (int to = 2; to <= out; ++to) {
    const int from = to - 1;
    const int rows = net.layers[static_cast<std::size_t>(from)].size;
    const int cols = net.layers[static_cast<std::size_t>(to)].size;
    net.connections.push_back({from, to, Tag::Plain, init.uniform(rows, cols, rows)});
    if (shape.bias) net.connections.push_back({0, to, Tag::Plain, init.uniform(1, cols, rows)});
  }
  validate(net);
  return net;
}

struct SeqClassifierShape {
  int vocab = 2;
  int embed = 4;
  int hidden = 8;
  int classes = 2;
};

inline Network make_seq_classifier(const SeqClassifierShape& shape, const InitOptions& opt = {}) {
  Network net;
  net.arch = Arch::SeqClassifier;
  net.vocab_size = shape.vocab;
  net.layers = {
      {0, LayerKind::Bias, 1, Activation::Linear, "bias"},
      {1, LayerKind::Input, shape.vocab, Activation::Linear, "input"},
      {2, LayerKind::Dense, shape.embed, Activation::Linear, "embed"},
      {3, LayerKind::Gru, shape.hidden, Activation::Linear, "gru"},
      {4, LayerKind::Output, shape.classes, Activation::Softmax, "output"},
  };
  detail::WeightInit init(opt);
  net.connections.push_back({1, 2, Tag::Plain, init.uniform(shape.vocab, shape.embed, 1.0)});
  detail::add_gru_inputs(net, init, 2, 3, shape.embed, false);
  detail::add_gru_inputs(net, init, 3, 3, shape.hidden, false);
  detail::add_gru_inputs(net, init, 0, 3, 1.0, true);
  net.connections.push_back({3, 4, Tag::Plain, init.uniform(shape.hidden, shape.classes, shape.hidden)});
  net.connections.push_back({0, 4, Tag::Plain, Matrix::Zero(1, shape.classes)});
  validate(net);
  return net;
}

struct EncDecShape {
  int vocab = 10;
  int embed = 16;
  int hidden = 32;
  int attention = 32;
};

/// Attention encoder-decoder with the fixed layer layout
///   0 bias, 1 input (one-hot tokens), 2 enc_embed, 3 enc_gru, 4 dec_embed,
///   5 dec_gru, 6 attention, 7 output.
/// Connections leaving enc_gru towards dec_gru/output carry the attention
/// context vector; enc_gru -> attention is applied per source position.
inline Network make_encdec(const EncDecShape& shape, const InitOptions& opt = {}) {
  Network net;
  net.arch = Arch::EncDecAttention;
  net.vocab_size = shape.vocab;
  net.layers = {
      {0, LayerKind::Bias, 1, Activation::Linear, "bias"},
      {1, LayerKind::Input, shape.vocab, Activation::Linear, "input"},
      {2, LayerKind::Dense, shape.embed, Activation::Linear, "enc_embed"},
      {3, LayerKind::Gru, shape.hidden, Activation::Linear, "enc_gru"},
      {4, LayerKind::Dense, shape.embed, Activation::Linear, "dec_embed"},
      {5, LayerKind::Gru, shape.hidden, Activation::Linear, "dec_gru"},
      {6, LayerKind::AttentionScore, shape.attention, Activation::Tanh, "attention"},
      {7, LayerKind::Output, shape.vocab, Activation::Softmax, "output"},
  };
  detail::WeightInit init(opt);
  const int h = shape.hidden;
  const int a = shape.attention;
  const int v = shape.vocab;

  net.connections.push_back({1, 2, Tag::Plain, init.uniform(v, shape.embed, 1.0)});
  detail::add_gru_inputs(net, init, 2, 3, shape.embed, false);
  detail::add_gru_inputs(net, init, 3, 3, h, false);
  detail::add_gru_inputs(net, init, 0, 3, 1.0, true);

  net.connections.push_back({1, 4, Tag::Plain, init.uniform(v, shape.embed, 1.0)});
  net.connections.push_back({3, 5, Tag::Init, init.uniform(h, h, h)});
  net.connections.push_back({0, 5, Tag::Init, Matrix::Zero(1, h)});
  detail::add_gru_inputs(net, init, 4, 5, shape.embed, false);
  detail::add_gru_inputs(net, init, 3, 5, h, false);
  detail::add_gru_inputs(net, init, 5, 5, h, false);
  detail::add_gru_inputs(net, init, 0, 5, 1.0, true);

  net.connections.push_back({5, 6, Tag::Plain, init.uniform(h, a, h)});
  net.connections.push_back({3, 6, Tag::Plain, init.uniform(h, a, h)});
  net.connections.push_back({0, 6, Tag::Plain, Matrix::Zero(1, a)});
  net.connections.push_back({6, 6, Tag::Energy, init.uniform(a, 1, a)});

  net.connections.push_back({5, 7, Tag::Plain, init.uniform(h, v, h)});
  net.connections.push_back({3, 7, Tag::Plain, init.uniform(h, v, h)});
  net.connections.push_back({4, 7, Tag::Plain, init.uniform(shape.embed, v, shape.embed)});
  net.connections.push_back({0, 7, Tag::Plain, Matrix::Zero(1, v)});
  validate(net);
  return net;
}

}  // namespace foldnet
