#pragma once

// Cross-entropy gradients for all architectures by explicit backpropagation
// (through time for the GRU layers, through the attention softmax for the
// decoder). Gradients are laid out like net.connections.

#include "foldnet/forward.hpp"
#include "foldnet/tasks.hpp"

#include <functional>
#include <vector>

namespace foldnet {

using Gradients = std::vector<Matrix>;

inline Gradients zero_gradients(const Network& net) {
  Gradients g;
  g.reserve(net.connections.size());
  for (const auto& c : net.connections) g.push_back(Matrix::Zero(c.weights.rows(), c.weights.cols()));
  return g;
}

/// Receives (layer id, activity row) for every evaluation of a layer.
using ActivitySink = std::function<void(int, const Vector&)>;

namespace detail {

inline Vector activation_grad(const Vector& act, const Vector& dact, Activation a) {
  switch (a) {
    case Activation::Linear: return dact;
    case Activation::Tanh: return dact.cwiseProduct((1.0 - act.array().square()).matrix());
    case Activation::Sigmoid: return dact.cwiseProduct((act.array() * (1.0 - act.array())).matrix());
    case Activation::Softmax: break;
  }
  throw NetworkError("softmax is only supported on the output layer");
}

/// Cross-entropy of softmax(logits) against `target`; writes dL/dlogits.
inline double softmax_xent(const Vector& logits, int target, Vector& dlogits) {
  if (target < 0 || target >= logits.size()) throw NetworkError("target id " + std::to_string(target) + " out of range");
  dlogits = softmax(logits);
  const double loss = -std::log(std::max(dlogits(target), 1e-300));
  dlogits(target) -= 1.0;
  return loss;
}

class GradWriter {
 public:
  GradWriter(const Network& net, Gradients& g, double scale) : net_(net), g_(g), scale_(scale) {}

  const Matrix& w(int idx) const { return net_.connections[static_cast<std::size_t>(idx)].weights; }

  /// grad[idx] += scale * x^T dy; returns dy W^T (the gradient w.r.t. x).
  Vector linear(int idx, const Vector& x, const Vector& dy) {
    if (idx < 0) return Vector::Zero(x.size());
    g_[static_cast<std::size_t>(idx)].noalias() += scale_ * x.transpose() * dy;
    return dy * w(idx).transpose();
  }
  void linear_no_input_grad(int idx, const Vector& x, const Vector& dy) {
    if (idx >= 0) g_[static_cast<std::size_t>(idx)].noalias() += scale_ * x.transpose() * dy;
  }
  template <typename Derived>
  void add_matrix(int idx, const Eigen::MatrixBase<Derived>& dw) {
    if (idx >= 0) g_[static_cast<std::size_t>(idx)].noalias() += scale_ * dw;
  }
  void row(int idx, Eigen::Index r, const Vector& dy) {
    if (idx >= 0) g_[static_cast<std::size_t>(idx)].row(r) += scale_ * dy;
  }
  Vector gates(const GateConns& g, const Vector& x, const Vector& dz, const Vector& dr, const Vector& dh) {
    Vector dx = linear(g.update, x, dz);
    dx += linear(g.reset, x, dr);
    dx += linear(g.state, x, dh);
    return dx;
  }
  void gate_bias(const GateConns& g, const Vector& dz, const Vector& dr, const Vector& dh) {
    row(g.update, 0, dz);
    row(g.reset, 0, dr);
    row(g.state, 0, dh);
  }

  struct GruGrads {
    Vector dz, dr, dh;  // w.r.t. gate pre-activations
    Vector dprev;       // w.r.t. the previous state
  };

  /// Backward through gru_combine given dL/dh'.
  GruGrads gru(const GateConns& rec, const GruTrace& t, const Vector& dout) {
    GruGrads out;
    const Vector dcand = dout.cwiseProduct(t.z);
    const Vector dz = dout.cwiseProduct(t.cand - t.h_prev);
    out.dprev = dout.cwiseProduct((1.0 - t.z.array()).matrix());
    out.dh = dcand.cwiseProduct((1.0 - t.cand.array().square()).matrix());
    Vector dr = Vector::Zero(t.r.size());
    if (rec.state >= 0) {
      const Vector rh = t.r.cwiseProduct(t.h_prev);
      const Vector drh = linear(rec.state, rh, out.dh);
      dr = drh.cwiseProduct(t.h_prev);
      out.dprev += drh.cwiseProduct(t.r);
    }
    out.dz = dz.cwiseProduct((t.z.array() * (1.0 - t.z.array())).matrix());
    out.dr = dr.cwiseProduct((t.r.array() * (1.0 - t.r.array())).matrix());
    out.dprev += linear(rec.update, t.h_prev, out.dz);
    out.dprev += linear(rec.reset, t.h_prev, out.dr);
    return out;
  }

 private:
  const Network& net_;
  Gradients& g_;
  double scale_;
};

struct EncoderTape {
  std::vector<int> tokens;
  std::vector<Vector> embeds;
  std::vector<GruTrace> traces;
  Matrix states;  // T x m
};

inline EncoderTape encode_taped(const Network& net, const SeqLayout& l, std::span<const int> tokens, const ActivitySink* sink) {
  EncoderTape tape;
  const int embed_size = net.layers[2].size;
  const int m = net.layers[3].size;
  tape.tokens.assign(tokens.begin(), tokens.end());
  tape.states.resize(static_cast<Eigen::Index>(tokens.size()), m);
  tape.traces.resize(tokens.size());
  Vector h = Vector::Zero(m);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    Vector e = embed(net, tokens[t], l.embed_in, l.embed_bias, embed_size);
    GatePre pre(m);
    pre.add(e, net, l.gru_from_embed);
    pre.add_bias(net, l.gru_bias);
    h = gru_recur(net, l.gru_rec, h, std::move(pre), &tape.traces[t]);
    tape.states.row(static_cast<Eigen::Index>(t)) = h;
    if (sink) {
      (*sink)(2, e);
      (*sink)(3, h);
    }
    tape.embeds.push_back(std::move(e));
  }
  return tape;
}

/// Backpropagates dL/dstates (T x m) through the encoder.
inline void encode_backward(GradWriter& gw, const SeqLayout& l, const EncoderTape& tape, const Matrix& dstates) {
  Vector dh = Vector::Zero(dstates.cols());
  for (std::size_t t = tape.tokens.size(); t-- > 0;) {
    dh += dstates.row(static_cast<Eigen::Index>(t));
    auto gg = gw.gru(l.gru_rec, tape.traces[t], dh);
    const Vector de = gw.gates(l.gru_from_embed, tape.embeds[t], gg.dz, gg.dr, gg.dh);
    gw.gate_bias(l.gru_bias, gg.dz, gg.dr, gg.dh);
    gw.row(l.embed_in, tape.tokens[t], de);
    gw.row(l.embed_bias, 0, de);
    dh = std::move(gg.dprev);
  }
}

inline double feedforward_grad(const Network& net, const Example& ex, GradWriter& gw, const ActivitySink* sink) {
  const Vector x = features_of(ex.source);
  if (x.size() != net.layers[1].size) throw NetworkError("feedforward input size mismatch");
  const int out = net.output_id();
  std::vector<Vector> act(net.layers.size());
  act[0] = Vector::Ones(1);
  act[1] = x;
  Vector logits;
  for (int d = 2; d <= out; ++d) {
    Vector pre = Vector::Zero(net.layers[static_cast<std::size_t>(d)].size);
    for (const auto& c : net.connections) {
      if (c.to == d) pre.noalias() += act[static_cast<std::size_t>(c.from)] * c.weights;
    }
    if (d == out) {
      logits = std::move(pre);
    } else {
      act[static_cast<std::size_t>(d)] = activate(pre, net.layers[static_cast<std::size_t>(d)].activation);
      if (sink) (*sink)(d, act[static_cast<std::size_t>(d)]);
    }
  }
  Vector dlogits;
  const double loss = softmax_xent(logits, ex.target.at(0), dlogits);

  std::vector<Vector> dact(net.layers.size());
  for (int d = out; d >= 2; --d) {
    Vector dpre;
    if (d == out) {
      dpre = dlogits;
    } else {
      if (dact[static_cast<std::size_t>(d)].size() == 0) continue;
      dpre = activation_grad(act[static_cast<std::size_t>(d)], dact[static_cast<std::size_t>(d)],
                             net.layers[static_cast<std::size_t>(d)].activation);
    }
    for (std::size_t ci = 0; ci < net.connections.size(); ++ci) {
      const auto& c = net.connections[ci];
      if (c.to != d) continue;
      const auto from = static_cast<std::size_t>(c.from);
      if (c.from >= 2) {
        Vector dx = gw.linear(static_cast<int>(ci), act[from], dpre);
        if (dact[from].size() == 0) {
          dact[from] = std::move(dx);
        } else {
          dact[from] += dx;
        }
      } else {
        gw.linear_no_input_grad(static_cast<int>(ci), act[from], dpre);
      }
    }
  }
  return loss;
}

inline double classifier_grad(const Network& net, const SeqLayout& l, const Example& ex, GradWriter& gw, const ActivitySink* sink) {
  if (ex.source.empty()) throw NetworkError("empty token sequence");
  const EncoderTape tape = encode_taped(net, l, ex.source, sink);
  const Eigen::Index last = tape.states.rows() - 1;
  const Vector h = tape.states.row(last);
  Vector logits = Vector::Zero(net.layers[4].size);
  add_product(logits, h, net, l.cls_out);
  add_row(logits, 0, net, l.cls_bias);
  Vector dlogits;
  const double loss = softmax_xent(logits, ex.target.at(0), dlogits);
  Matrix dstates = Matrix::Zero(tape.states.rows(), tape.states.cols());
  dstates.row(last) = gw.linear(l.cls_out, h, dlogits);
  gw.row(l.cls_bias, 0, dlogits);
  encode_backward(gw, l, tape, dstates);
  return loss;
}

inline double encdec_grad(const Network& net, const SeqLayout& l, const Example& ex, GradWriter& gw, const ActivitySink* sink) {
  if (ex.source.empty()) throw NetworkError("empty source sequence");
  const EncoderTape enc = encode_taped(net, l, ex.source, sink);
  const Matrix& ann = enc.states;
  const Eigen::Index src_len = ann.rows();
  const int a = net.layers[6].size;
  const int m = net.layers[5].size;
  const int embed_size = net.layers[4].size;

  Matrix proj = Matrix::Zero(src_len, a);
  if (l.att_from_enc >= 0) proj.noalias() = ann * gw.w(l.att_from_enc);

  const Vector last = ann.row(src_len - 1);
  Vector s0 = Vector::Zero(m);
  add_product(s0, last, net, l.init_w);
  add_row(s0, 0, net, l.init_b);
  s0 = s0.array().tanh().matrix();

  const std::size_t steps = ex.target.size();
  std::vector<Vector> states{s0};
  std::vector<AttentionTrace> att(steps);
  std::vector<Vector> ctxs(steps), embeds(steps), dlogits(steps);
  std::vector<GruTrace> traces(steps);
  std::vector<int> prev(steps);
  double loss = 0.0;
  const Matrix& energy = gw.w(l.att_energy);

  for (std::size_t i = 0; i < steps; ++i) {
    prev[i] = i == 0 ? kBos : ex.target[i - 1];
    const Vector& s = states.back();
    Vector sp = Vector::Zero(a);
    add_product(sp, s, net, l.att_from_dec);
    add_row(sp, 0, net, l.att_bias);
    const Vector alpha = attend(sp, proj, energy, &att[i]);
    ctxs[i] = alpha * ann;
    embeds[i] = embed(net, prev[i], l.dec_embed_in, l.dec_embed_bias, embed_size);
    GatePre pre(m);
    pre.add(embeds[i], net, l.dec_from_embed);
    pre.add(ctxs[i], net, l.dec_from_ctx);
    pre.add_bias(net, l.dec_bias);
    Vector next = gru_recur(net, l.dec_rec, s, std::move(pre), &traces[i]);
    Vector logits = Vector::Zero(net.layers[7].size);
    add_product(logits, next, net, l.out_from_dec);
    add_product(logits, ctxs[i], net, l.out_from_ctx);
    add_product(logits, embeds[i], net, l.out_from_embed);
    add_row(logits, 0, net, l.out_bias);
    loss += softmax_xent(logits, ex.target[i], dlogits[i]);
    if (sink) {
      (*sink)(4, embeds[i]);
      (*sink)(5, next);
      for (Eigen::Index t = 0; t < src_len; ++t) (*sink)(6, att[i].hidden.row(t));
    }
    states.push_back(std::move(next));
  }

  Matrix dann = Matrix::Zero(src_len, ann.cols());
  Matrix dproj = Matrix::Zero(src_len, a);
  Vector ds = Vector::Zero(m);
  for (std::size_t i = steps; i-- > 0;) {
    const Vector& dl = dlogits[i];
    const Vector& s_next = states[i + 1];
    const Vector& s_prev = states[i];
    ds += gw.linear(l.out_from_dec, s_next, dl);
    Vector dctx = gw.linear(l.out_from_ctx, ctxs[i], dl);
    Vector demb = gw.linear(l.out_from_embed, embeds[i], dl);
    gw.row(l.out_bias, 0, dl);

    auto gg = gw.gru(l.dec_rec, traces[i], ds);
    demb += gw.gates(l.dec_from_embed, embeds[i], gg.dz, gg.dr, gg.dh);
    dctx += gw.gates(l.dec_from_ctx, ctxs[i], gg.dz, gg.dr, gg.dh);
    gw.gate_bias(l.dec_bias, gg.dz, gg.dr, gg.dh);
    gw.row(l.dec_embed_in, prev[i], demb);
    gw.row(l.dec_embed_bias, 0, demb);
    ds = std::move(gg.dprev);

    // context = alpha * ann
    const Vector& alpha = att[i].alpha;
    dann.noalias() += alpha.transpose() * dctx;
    const Vector dalpha = (ann * dctx.transpose()).transpose();
    const double dot = alpha.dot(dalpha);
    const Vector de = alpha.cwiseProduct((dalpha.array() - dot).matrix());
    const Matrix& hid = att[i].hidden;
    gw.add_matrix(l.att_energy, hid.transpose() * de.transpose());
    Matrix dhid = (de.transpose() * energy.transpose()).array() * (1.0 - hid.array().square());
    const Vector dsp = dhid.colwise().sum();
    dproj += dhid;
    ds += gw.linear(l.att_from_dec, s_prev, dsp);
    gw.row(l.att_bias, 0, dsp);
  }
  // initial state s0 = tanh(last * W_init + b_init)
  const Vector ds0 = ds.cwiseProduct((1.0 - s0.array().square()).matrix());
  dann.row(src_len - 1) += gw.linear(l.init_w, last, ds0);
  gw.row(l.init_b, 0, ds0);
  if (l.att_from_enc >= 0) {
    gw.add_matrix(l.att_from_enc, ann.transpose() * dproj);
    dann.noalias() += dproj * gw.w(l.att_from_enc).transpose();
  }
  encode_backward(gw, l, enc, dann);
  return loss;
}

}  // namespace detail

/// Adds scale * dL/dW for one example to `grads` and returns the example's
/// summed token cross-entropy L.
inline double example_gradient(const Network& net, const Example& ex, Gradients& grads, double scale,
                               const ActivitySink* sink = nullptr) {
  detail::GradWriter gw(net, grads, scale);
  switch (net.arch) {
    case Arch::Feedforward: return detail::feedforward_grad(net, ex, gw, sink);
    case Arch::SeqClassifier: return detail::classifier_grad(net, SeqLayout::of(net), ex, gw, sink);
    case Arch::EncDecAttention: return detail::encdec_grad(net, SeqLayout::of(net), ex, gw, sink);
  }
  return 0.0;
}

/// Summed token cross-entropy of one example (no gradients).
inline double example_loss(const Network& net, const Example& ex) {
  switch (net.arch) {
    case Arch::Feedforward: {
      const StepOutput o = forward(net, features_of(ex.source));
      return -std::log(std::max(softmax(o.logits)(ex.target.at(0)), 1e-300));
    }
    case Arch::SeqClassifier: {
      const StepOutput o = forward(net, std::span<const int>(ex.source));
      return -std::log(std::max(softmax(o.logits)(ex.target.at(0)), 1e-300));
    }
    case Arch::EncDecAttention: {
      double loss = 0.0;
      const auto steps = forward(net, ex.source, ex.target);
      for (std::size_t i = 0; i < steps.size(); ++i) loss -= std::log(std::max(steps[i].probs(ex.target[i]), 1e-300));
      return loss;
    }
  }
  return 0.0;
}

}  // namespace foldnet
