#pragma once

// Inference for the three supported architectures: GRU cells, additive
// attention, feedforward and sequence forward passes, greedy decoding and
// probability-averaging ensemble decoding.

#include "foldnet/network.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace foldnet {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vector softmax(const Vector& logits) {
  const double top = logits.maxCoeff();
  Vector e = (logits.array() - top).exp().matrix();
  return e / e.sum();
}

inline Vector activate(const Vector& pre, Activation act) {
  switch (act) {
    case Activation::Linear: return pre;
    case Activation::Tanh: return pre.array().tanh().matrix();
    case Activation::Sigmoid: return pre.unaryExpr([](double v) { return sigmoid(v); });
    case Activation::Softmax: return softmax(pre);
  }
  return pre;
}

inline Eigen::Index argmax(const Vector& v) {
  Eigen::Index best = 0;
  v.maxCoeff(&best);
  return best;
}

// ---------------------------------------------------------------------------
// GRU cell

/// Intermediate values of one GRU step, kept for backpropagation.
struct GruTrace {
  Vector h_prev, z, r, cand;
};

/// Combines pre-activations with the recurrent terms:
///   z = sigmoid(pre_z + h Uz), r = sigmoid(pre_r + h Ur),
///   cand = tanh(pre_h + (r*h) Uh), h' = (1-z)*h + z*cand.
/// Null recurrent matrices count as zero.
inline Vector gru_combine(const Matrix* uz, const Matrix* ur, const Matrix* uh, const Vector& h,
                          Vector pre_z, Vector pre_r, Vector pre_h, GruTrace* trace = nullptr) {
  if (uz) pre_z.noalias() += h * *uz;
  if (ur) pre_r.noalias() += h * *ur;
  Vector z = pre_z.unaryExpr([](double v) { return sigmoid(v); });
  Vector r = pre_r.unaryExpr([](double v) { return sigmoid(v); });
  if (uh) pre_h.noalias() += r.cwiseProduct(h) * *uh;
  Vector cand = pre_h.array().tanh().matrix();
  Vector out = (1.0 - z.array()) * h.array() + z.array() * cand.array();
  if (trace) {
    trace->h_prev = h;
    trace->z = std::move(z);
    trace->r = std::move(r);
    trace->cand = std::move(cand);
  }
  return out;
}

/// Self-contained GRU parameters for a single input stream.
struct GruCell {
  Matrix input_state, input_update, input_reset;  // n x m
  Matrix rec_state, rec_update, rec_reset;        // m x m
  Vector bias_state, bias_update, bias_reset;     // 1 x m
};

inline Vector gru_step(const GruCell& cell, const Vector& h, const Vector& x) {
  const auto m = cell.rec_state.rows();
  if (h.size() != m || cell.rec_state.cols() != m || cell.rec_update.rows() != m || cell.rec_reset.rows() != m ||
      cell.input_state.rows() != x.size() || cell.input_update.rows() != x.size() || cell.input_reset.rows() != x.size() ||
      cell.input_state.cols() != m || cell.input_update.cols() != m || cell.input_reset.cols() != m ||
      cell.bias_state.size() != m || cell.bias_update.size() != m || cell.bias_reset.size() != m) {
    throw NetworkError("gru_step: inconsistent shapes (state " + std::to_string(h.size()) + ", input " +
                       std::to_string(x.size()) + ")");
  }
  Vector pz = x * cell.input_update + cell.bias_update;
  Vector pr = x * cell.input_reset + cell.bias_reset;
  Vector ph = x * cell.input_state + cell.bias_state;
  return gru_combine(&cell.rec_update, &cell.rec_reset, &cell.rec_state, h, std::move(pz), std::move(pr), std::move(ph));
}

// ---------------------------------------------------------------------------
// Additive attention

struct AttentionTrace {
  Matrix hidden;  // T x A, tanh activities of the attention layer
  Vector alpha;   // T
};

/// e_t = tanh(state_proj + annotation_proj[t]) . energy, alpha = softmax(e).
/// state_proj already contains the attention bias.
inline Vector attend(const Vector& state_proj, const Matrix& annotation_proj, const Matrix& energy,
                     AttentionTrace* trace = nullptr) {
  Matrix hidden = (annotation_proj.rowwise() + state_proj).array().tanh().matrix();
  Vector e = (hidden * energy).transpose();
  Vector alpha = softmax(e);
  if (trace) {
    trace->hidden = std::move(hidden);
    trace->alpha = alpha;
  }
  return alpha;
}

struct AttentionParams {
  Matrix state_weights;       // m_state x A
  Matrix annotation_weights;  // a x A
  Vector bias;                // A
  Matrix energy;              // A x 1
};

inline Vector attention_weights(const AttentionParams& p, const Vector& state, const Matrix& annotations) {
  if (annotations.rows() < 1) throw NetworkError("attention_weights: no source positions");
  if (state.size() != p.state_weights.rows() || annotations.cols() != p.annotation_weights.rows() ||
      p.state_weights.cols() != p.annotation_weights.cols() || p.bias.size() != p.state_weights.cols() ||
      p.energy.rows() != p.state_weights.cols() || p.energy.cols() != 1) {
    throw NetworkError("attention_weights: inconsistent shapes");
  }
  Vector sp = state * p.state_weights + p.bias;
  Matrix ap = annotations * p.annotation_weights;
  return attend(sp, ap, p.energy);
}

// ---------------------------------------------------------------------------
// Connection lookup for the sequence architectures

struct GateConns {
  int state = -1, update = -1, reset = -1;
};

inline GateConns gate_conns(const Network& net, int from, int to) {
  return {net.find_connection(from, to, Tag::State), net.find_connection(from, to, Tag::UpdateGate),
          net.find_connection(from, to, Tag::ResetGate)};
}

/// Indices of every connection used by the sequence architectures; -1 marks
/// an absent (zero) connection.
struct SeqLayout {
  // encoder / classifier trunk
  int embed_in = -1, embed_bias = -1;
  GateConns gru_from_embed, gru_rec, gru_bias;
  // classifier head
  int cls_out = -1, cls_bias = -1;
  // decoder
  int dec_embed_in = -1, dec_embed_bias = -1;
  int init_w = -1, init_b = -1;
  GateConns dec_from_embed, dec_from_ctx, dec_rec, dec_bias;
  int att_from_dec = -1, att_from_enc = -1, att_bias = -1, att_energy = -1;
  int out_from_dec = -1, out_from_ctx = -1, out_from_embed = -1, out_bias = -1;

  static SeqLayout of(const Network& net) {
    SeqLayout l;
    std::vector<bool> used(net.connections.size(), false);
    auto take = [&](int from, int to, Tag tag) {
      const int i = net.find_connection(from, to, tag);
      if (i >= 0) used[static_cast<std::size_t>(i)] = true;
      return i;
    };
    auto take_gates = [&](int from, int to) {
      return GateConns{take(from, to, Tag::State), take(from, to, Tag::UpdateGate), take(from, to, Tag::ResetGate)};
    };
    l.embed_in = take(1, 2, Tag::Plain);
    l.embed_bias = take(0, 2, Tag::Plain);
    l.gru_from_embed = take_gates(2, 3);
    l.gru_rec = take_gates(3, 3);
    l.gru_bias = take_gates(0, 3);
    if (net.arch == Arch::SeqClassifier) {
      l.cls_out = take(3, 4, Tag::Plain);
      l.cls_bias = take(0, 4, Tag::Plain);
    } else if (net.arch == Arch::EncDecAttention) {
      l.dec_embed_in = take(1, 4, Tag::Plain);
      l.dec_embed_bias = take(0, 4, Tag::Plain);
      l.init_w = take(3, 5, Tag::Init);
      l.init_b = take(0, 5, Tag::Init);
      l.dec_from_embed = take_gates(4, 5);
      l.dec_from_ctx = take_gates(3, 5);
      l.dec_rec = take_gates(5, 5);
      l.dec_bias = take_gates(0, 5);
      l.att_from_dec = take(5, 6, Tag::Plain);
      l.att_from_enc = take(3, 6, Tag::Plain);
      l.att_bias = take(0, 6, Tag::Plain);
      l.att_energy = take(6, 6, Tag::Energy);
      l.out_from_dec = take(5, 7, Tag::Plain);
      l.out_from_ctx = take(3, 7, Tag::Plain);
      l.out_from_embed = take(4, 7, Tag::Plain);
      l.out_bias = take(0, 7, Tag::Plain);
    } else {
      throw NetworkError("SeqLayout: not a sequence architecture");
    }
    for (std::size_t i = 0; i < used.size(); ++i) {
      if (!used[i]) {
        const auto& c = net.connections[i];
        throw NetworkError(connection_label(c.from, c.to) + " (" + std::string(to_string(c.tag)) + ") is not part of the " +
                           std::string(to_string(net.arch)) + " layout");
      }
    }
    return l;
  }
};

namespace detail {

inline const Matrix* weights_or_null(const Network& net, int idx) {
  return idx < 0 ? nullptr : &net.connections[static_cast<std::size_t>(idx)].weights;
}

inline void add_product(Vector& out, const Vector& x, const Network& net, int idx) {
  if (idx >= 0) out.noalias() += x * net.connections[static_cast<std::size_t>(idx)].weights;
}

inline void add_row(Vector& out, Eigen::Index row, const Network& net, int idx) {
  if (idx >= 0) out += net.connections[static_cast<std::size_t>(idx)].weights.row(row);
}

inline void check_token(const Network& net, int token) {
  if (token < 0 || token >= net.vocab_size) {
    throw NetworkError("token id " + std::to_string(token) + " outside vocabulary of size " + std::to_string(net.vocab_size));
  }
}

/// Embedding of a one-hot token through the Dense linear layer `layer`.
inline Vector embed(const Network& net, int token, int weights, int bias, int size) {
  check_token(net, token);
  Vector e = Vector::Zero(size);
  add_row(e, token, net, weights);
  add_row(e, 0, net, bias);
  return e;
}

/// Pre-activations of the three gates from one input stream.
struct GatePre {
  Vector z, r, h;
  explicit GatePre(Eigen::Index m) : z(Vector::Zero(m)), r(Vector::Zero(m)), h(Vector::Zero(m)) {}
  void add(const Vector& x, const Network& net, const GateConns& g) {
    add_product(z, x, net, g.update);
    add_product(r, x, net, g.reset);
    add_product(h, x, net, g.state);
  }
  void add_bias(const Network& net, const GateConns& g) {
    add_row(z, 0, net, g.update);
    add_row(r, 0, net, g.reset);
    add_row(h, 0, net, g.state);
  }
};

inline Vector gru_recur(const Network& net, const GateConns& rec, const Vector& h, GatePre pre, GruTrace* trace = nullptr) {
  return gru_combine(weights_or_null(net, rec.update), weights_or_null(net, rec.reset), weights_or_null(net, rec.state), h,
                     std::move(pre.z), std::move(pre.r), std::move(pre.h), trace);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward passes

struct StepOutput {
  Vector logits;
  Vector probs;  // output activation applied to logits
};

/// Feedforward pass over a feature vector.
inline StepOutput forward(const Network& net, const Vector& input) {
  if (net.arch != Arch::Feedforward) throw NetworkError("forward(features) requires a Feedforward network");
  if (input.size() != net.layers[1].size) {
    throw NetworkError("input has " + std::to_string(input.size()) + " features, network expects " + std::to_string(net.layers[1].size));
  }
  const int out = net.output_id();
  std::vector<Vector> act(net.layers.size());
  act[0] = Vector::Ones(1);
  act[1] = input;
  for (int d = 2; d <= out; ++d) {
    Vector pre = Vector::Zero(net.layers[static_cast<std::size_t>(d)].size);
    for (const auto& c : net.connections) {
      if (c.to == d) pre.noalias() += act[static_cast<std::size_t>(c.from)] * c.weights;
    }
    if (d == out) {
      StepOutput o;
      o.probs = activate(pre, net.layers[static_cast<std::size_t>(d)].activation);
      o.logits = std::move(pre);
      return o;
    }
    act[static_cast<std::size_t>(d)] = activate(pre, net.layers[static_cast<std::size_t>(d)].activation);
  }
  return {};
}

/// Runs the embedding + GRU trunk over `tokens`; returns every state h_1..h_T.
inline Matrix encode(const Network& net, const SeqLayout& l, std::span<const int> tokens) {
  const int embed_size = net.layers[2].size;
  const int m = net.layers[3].size;
  Matrix states(static_cast<Eigen::Index>(tokens.size()), m);
  Vector h = Vector::Zero(m);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    Vector e = detail::embed(net, tokens[t], l.embed_in, l.embed_bias, embed_size);
    detail::GatePre pre(m);
    pre.add(e, net, l.gru_from_embed);
    pre.add_bias(net, l.gru_bias);
    h = detail::gru_recur(net, l.gru_rec, h, std::move(pre));
    states.row(static_cast<Eigen::Index>(t)) = h;
  }
  return states;
}

/// Sequence classifier pass: logits from the final GRU state.
inline StepOutput forward(const Network& net, std::span<const int> tokens) {
  if (net.arch != Arch::SeqClassifier) throw NetworkError("forward(tokens) requires a SeqClassifier network");
  if (tokens.empty()) throw NetworkError("empty token sequence");
  const SeqLayout l = SeqLayout::of(net);
  Matrix states = encode(net, l, tokens);
  Vector h = states.row(states.rows() - 1);
  Vector logits = Vector::Zero(net.layers[4].size);
  detail::add_product(logits, h, net, l.cls_out);
  detail::add_row(logits, 0, net, l.cls_bias);
  StepOutput o;
  o.probs = activate(logits, net.layers[4].activation);
  o.logits = std::move(logits);
  return o;
}

/// Incremental attention decoder. The constructor encodes the source; each
/// step() consumes the previously emitted token and returns the next output
/// distribution.
class Decoder {
 public:
  Decoder(const Network& net, std::span<const int> src) : net_(&net), layout_(SeqLayout::of(net)) {
    if (net.arch != Arch::EncDecAttention) throw NetworkError("Decoder requires an EncDecAttention network");
    if (src.empty()) throw NetworkError("empty source sequence");
    annotations_ = encode(net, layout_, src);
    const int a = net.layers[6].size;
    annotation_proj_ = Matrix::Zero(annotations_.rows(), a);
    if (layout_.att_from_enc >= 0) annotation_proj_.noalias() = annotations_ * weight(layout_.att_from_enc);
    Vector last = annotations_.row(annotations_.rows() - 1);
    Vector s = Vector::Zero(net.layers[5].size);
    detail::add_product(s, last, net, layout_.init_w);
    detail::add_row(s, 0, net, layout_.init_b);
    state_ = s.array().tanh().matrix();
  }

  StepOutput step(int prev_token) {
    const Network& net = *net_;
    const auto& l = layout_;
    const int m = net.layers[5].size;

    Vector sp = Vector::Zero(net.layers[6].size);
    detail::add_product(sp, state_, net, l.att_from_dec);
    detail::add_row(sp, 0, net, l.att_bias);
    alpha_ = attend(sp, annotation_proj_, weight(l.att_energy));
    Vector ctx = alpha_ * annotations_;

    Vector e = detail::embed(net, prev_token, l.dec_embed_in, l.dec_embed_bias, net.layers[4].size);
    detail::GatePre pre(m);
    pre.add(e, net, l.dec_from_embed);
    pre.add(ctx, net, l.dec_from_ctx);
    pre.add_bias(net, l.dec_bias);
    state_ = detail::gru_recur(net, l.dec_rec, state_, std::move(pre));

    Vector logits = Vector::Zero(net.layers[7].size);
    detail::add_product(logits, state_, net, l.out_from_dec);
    detail::add_product(logits, ctx, net, l.out_from_ctx);
    detail::add_product(logits, e, net, l.out_from_embed);
    detail::add_row(logits, 0, net, l.out_bias);
    StepOutput o;
    o.probs = activate(logits, net.layers[7].activation);
    o.logits = std::move(logits);
    return o;
  }

  const Vector& state() const { return state_; }
  const Vector& attention() const { return alpha_; }

 private:
  const Matrix& weight(int idx) const { return net_->connections[static_cast<std::size_t>(idx)].weights; }

  const Network* net_;
  SeqLayout layout_;
  Matrix annotations_;
  Matrix annotation_proj_;
  Vector state_;
  Vector alpha_;
};

/// Teacher-forced decoder pass: step i consumes BOS (i = 0) or target[i-1].
/// Returns one output per target token.
inline std::vector<StepOutput> forward(const Network& net, std::span<const int> src, std::span<const int> target) {
  Decoder dec(net, src);
  std::vector<StepOutput> out;
  out.reserve(target.size());
  int prev = kBos;
  for (int tok : target) {
    out.push_back(dec.step(prev));
    detail::check_token(net, tok);
    prev = tok;
  }
  return out;
}

struct DecodeResult {
  std::vector<int> tokens;           // emitted tokens, EOS excluded
  std::vector<Vector> distributions; // one per step, including the EOS step
};

inline DecodeResult greedy_decode(const Network& net, std::span<const int> src, std::size_t max_len) {
  DecodeResult res;
  if (max_len == 0) return res;
  Decoder dec(net, src);
  int prev = kBos;
  for (std::size_t i = 0; i < max_len; ++i) {
    StepOutput o = dec.step(prev);
    const int tok = static_cast<int>(argmax(o.probs));
    res.distributions.push_back(std::move(o.probs));
    if (tok == kEos) break;
    res.tokens.push_back(tok);
    prev = tok;
  }
  return res;
}

/// Probability-averaging ensemble decoder. Each member keeps its own
/// attention and state; all members advance with the jointly chosen token.
inline DecodeResult ensemble_decode(std::span<const Network* const> nets, std::span<const int> src, std::size_t max_len) {
  if (nets.empty()) throw NetworkError("ensemble_decode: no models");
  for (std::size_t k = 1; k < nets.size(); ++k) {
    if (auto diff = topology_difference(*nets[0], *nets[k])) {
      throw NetworkError("ensemble_decode: model " + std::to_string(k) + " " + *diff);
    }
  }
  DecodeResult res;
  if (max_len == 0) return res;
  std::vector<Decoder> decs;
  decs.reserve(nets.size());
  for (const Network* n : nets) decs.emplace_back(*n, src);
  int prev = kBos;
  const double inv_k = 1.0 / static_cast<double>(nets.size());
  for (std::size_t i = 0; i < max_len; ++i) {
    Vector avg = Vector::Zero(nets[0]->layers.back().size);
    for (auto& d : decs) avg += d.step(prev).probs;
    avg *= inv_k;
    const int tok = static_cast<int>(argmax(avg));
    res.distributions.push_back(std::move(avg));
    if (tok == kEos) break;
    res.tokens.push_back(tok);
    prev = tok;
  }
  return res;
}

inline DecodeResult ensemble_decode(const std::vector<Network>& nets, std::span<const int> src, std::size_t max_len) {
  std::vector<const Network*> ptrs;
  for (const auto& n : nets) ptrs.push_back(&n);
  return ensemble_decode(std::span<const Network* const>(ptrs), src, max_len);
}

/// Teacher-forced ensemble distributions (arithmetic mean of member probabilities).
inline std::vector<Vector> ensemble_forward(std::span<const Network* const> nets, std::span<const int> src, std::span<const int> target) {
  if (nets.empty()) throw NetworkError("ensemble_forward: no models");
  std::vector<Vector> avg;
  for (const Network* n : nets) {
    auto steps = forward(*n, src, target);
    if (avg.empty()) {
      for (auto& s : steps) avg.push_back(s.probs);
    } else {
      for (std::size_t i = 0; i < steps.size(); ++i) avg[i] += steps[i].probs;
    }
  }
  for (auto& v : avg) v /= static_cast<double>(nets.size());
  return avg;
}

}  // namespace foldnet
