#pragma once

// Layer shrinking: neuron removal with linear-combination compensation
// (data-free from incoming weights, data-bound from recorded activities), the
// add-to-nearest-neighbour baseline, and low-rank replacement of linear layers.
//
// For a layer d with m neurons, U stacks every incoming weight matrix
// vertically (m_in x m, bias rows included) and V stacks every outgoing matrix
// horizontally (m x m_out). Gru recurrences appear in both.

#include "foldnet/forward.hpp"
#include "foldnet/network.hpp"
#include "foldnet/unfold.hpp"

#include <json.hpp>

#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace foldnet {

class ShrinkError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ShrinkMethod { Svd, DataFree, SrinivasBabu, DataBound };

inline std::string_view to_string(ShrinkMethod m) {
  switch (m) {
    case ShrinkMethod::Svd: return "svd";
    case ShrinkMethod::DataFree: return "datafree";
    case ShrinkMethod::SrinivasBabu: return "srinivas_babu";
    case ShrinkMethod::DataBound: return "databound";
  }
  return "?";
}

inline std::optional<ShrinkMethod> parse_shrink_method(std::string_view s) {
  using enum ShrinkMethod;
  return parse_enum(s, {Svd, DataFree, SrinivasBabu, DataBound});
}

struct PairSelection {
  int i = -1;  // reference neuron
  int j = -1;  // neuron to remove
  double criterion = 0.0;
};

struct ShrinkRecord {
  int layer = 0;
  int j = -1;
  int i = -1;
  double criterion = 0.0;
  double residual = 0.0;

  friend bool operator==(const ShrinkRecord&, const ShrinkRecord&) = default;
};

struct ShrinkReport {
  ShrinkMethod method = ShrinkMethod::DataFree;
  int layer = -1;  // -1 when a report covers several layers
  std::vector<ShrinkRecord> removals;
  std::vector<int> sizes_before;
  std::vector<int> sizes_after;
  double size_factor_before = 1.0;
  double size_factor_after = 1.0;
};

inline nlohmann::json to_json(const ShrinkReport& r) {
  nlohmann::json removals = nlohmann::json::array();
  for (const auto& x : r.removals) {
    removals.push_back({{"layer", x.layer}, {"j", x.j}, {"i", x.i}, {"criterion", x.criterion}, {"residual", x.residual}});
  }
  nlohmann::json j = {{"method", to_string(r.method)},
                      {"layer", r.layer},
                      {"removals", std::move(removals)},
                      {"sizes_before", r.sizes_before},
                      {"sizes_after", r.sizes_after},
                      {"size_factor_before", r.size_factor_before},
                      {"size_factor_after", r.size_factor_after}};
  return j;
}

// ---------------------------------------------------------------------------
// Matrix-level operations

/// argmin over ordered pairs i != j of ||cols_i - cols_j||^2 * weight_j.
/// Ties resolve to the smallest i, then the smallest j.
inline PairSelection select_pair(const Matrix& cols, const Eigen::VectorXd& weight) {
  const Eigen::Index m = cols.cols();
  if (m < 2) throw ShrinkError("selection needs at least 2 neurons, layer has " + std::to_string(m));
  // Column-major copy keeps the column differences contiguous.
  const Eigen::MatrixXd c = cols;
  PairSelection best;
  best.criterion = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      if (i == j) continue;
      const double value = (c.col(i) - c.col(j)).squaredNorm() * weight(j);
      if (value < best.criterion) {
        best = {static_cast<int>(i), static_cast<int>(j), value};
      }
    }
  }
  return best;
}

/// Neuron pair minimizing ||U_i - U_j||^2 ||V_j||^2; j is removed.
inline PairSelection datafree_select(const Matrix& u, const Matrix& v) {
  if (u.cols() != v.rows()) {
    throw ShrinkError("datafree_select: U has " + std::to_string(u.cols()) + " neurons, V has " + std::to_string(v.rows()));
  }
  const Eigen::VectorXd out_norm = v.rowwise().squaredNorm();
  return select_pair(u, out_norm);
}

/// Neuron pair minimizing ||A_i - A_j||^2 ||A_j||^2 over activity columns.
inline PairSelection databound_select(const Matrix& activities) {
  if (activities.rows() < 1) throw ShrinkError("databound_select: empty activity matrix");
  const Eigen::VectorXd norm = activities.colwise().squaredNorm().transpose();
  return select_pair(activities, norm);
}

/// lambda solving U_{:,not j} lambda = U_{:,j} in the least-squares sense.
inline LeastSquares datafree_lambda(const Matrix& u, int j) {
  if (u.cols() < 2) throw ShrinkError("datafree_lambda: need at least 2 neurons");
  if (j < 0 || j >= u.cols()) throw ShrinkError("datafree_lambda: neuron " + std::to_string(j) + " out of range");
  return ols_min_norm(drop_column(u, j), u.col(j));
}

inline constexpr std::size_t kDefaultSampleCap = 50000;

/// Same system on recorded activities; tall matrices are first reduced to a
/// uniform random sample of `sample_cap` rows.
inline LeastSquares databound_lambda(const Matrix& activities, int j, std::size_t sample_cap = kDefaultSampleCap,
                                     std::uint64_t seed = 1) {
  if (static_cast<std::size_t>(activities.rows()) <= sample_cap) return datafree_lambda(activities, j);
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(activities.rows()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> picked;
  picked.reserve(sample_cap);
  std::sample(rows.begin(), rows.end(), std::back_inserter(picked), static_cast<std::ptrdiff_t>(sample_cap), rng);
  Matrix sample(static_cast<Eigen::Index>(picked.size()), activities.cols());
  for (std::size_t r = 0; r < picked.size(); ++r) sample.row(static_cast<Eigen::Index>(r)) = activities.row(picked[r]);
  return datafree_lambda(sample, j);
}

/// Lambda over the full neuron index range: entry j is zero.
inline Eigen::VectorXd expand_lambda(const Vector& lambda, int j) {
  Eigen::VectorXd full = Eigen::VectorXd::Zero(lambda.size() + 1);
  for (Eigen::Index k = 0, src = 0; k < full.size(); ++k) {
    if (k == j) continue;
    full(k) = lambda(src++);
  }
  return full;
}

struct Bundles {
  Matrix u;
  Matrix v;
};

/// V' = (V + lambda V_{j,:}) without row j, U' = U without column j.
inline Bundles apply_removal(const Matrix& u, const Matrix& v, int j, const Vector& lambda) {
  if (u.cols() != v.rows()) throw ShrinkError("apply_removal: U/V neuron counts differ");
  if (lambda.size() != u.cols() - 1) {
    throw ShrinkError("apply_removal: lambda has " + std::to_string(lambda.size()) + " entries, expected " + std::to_string(u.cols() - 1));
  }
  if (j < 0 || j >= u.cols()) throw ShrinkError("apply_removal: neuron " + std::to_string(j) + " out of range");
  Matrix vv = v;
  const Eigen::VectorXd full = expand_lambda(lambda, j);
  vv.noalias() += full * v.row(j);
  return {drop_column(u, j), drop_row(vv, j)};
}

// ---------------------------------------------------------------------------
// Network-level bundles

/// Incoming connections of layer d (the energy self-connection is outgoing).
inline std::vector<int> incoming_connections(const Network& net, int d) {
  std::vector<int> out;
  for (std::size_t i = 0; i < net.connections.size(); ++i) {
    const auto& c = net.connections[i];
    if (c.to == d && c.tag != Tag::Energy) out.push_back(static_cast<int>(i));
  }
  return out;
}

inline std::vector<int> outgoing_connections(const Network& net, int d) {
  std::vector<int> out;
  for (std::size_t i = 0; i < net.connections.size(); ++i) {
    if (net.connections[i].from == d) out.push_back(static_cast<int>(i));
  }
  return out;
}

inline Matrix incoming_bundle(const Network& net, int d) {
  std::vector<const Matrix*> blocks;
  for (int i : incoming_connections(net, d)) blocks.push_back(&net.connections[static_cast<std::size_t>(i)].weights);
  if (blocks.empty()) return Matrix(0, net.layer(d).size);
  return stack_vertical(blocks);
}

inline Matrix outgoing_bundle(const Network& net, int d) {
  std::vector<const Matrix*> blocks;
  for (int i : outgoing_connections(net, d)) blocks.push_back(&net.connections[static_cast<std::size_t>(i)].weights);
  if (blocks.empty()) return Matrix(net.layer(d).size, 0);
  return stack_horizontal(blocks);
}

/// Deletes neuron j of layer d from a list of matrices laid out like
/// net.connections (weights or optimizer state).
inline void drop_neuron(const Network& net, int d, int j, std::vector<Matrix>& mats) {
  for (std::size_t i = 0; i < net.connections.size(); ++i) {
    const auto& c = net.connections[i];
    if (c.to == d && c.tag != Tag::Energy) mats[i] = drop_column(mats[i], j);
    if (c.from == d) mats[i] = drop_row(mats[i], j);
  }
}

/// Removes neuron j from layer d, adding lambda_k * V_{j,:} to every other
/// outgoing row k first. `full_lambda` has one entry per current neuron
/// (entry j ignored); pass an empty vector for uncompensated deletion.
inline void remove_neuron(Network& net, int d, int j, const Eigen::VectorXd& full_lambda) {
  const int m = net.layer(d).size;
  if (m < 2) throw ShrinkError("cannot remove the last neuron of layer " + std::to_string(d));
  if (j < 0 || j >= m) throw ShrinkError("neuron " + std::to_string(j) + " out of range for layer " + std::to_string(d));
  if (full_lambda.size() != 0) {
    if (full_lambda.size() != m) throw ShrinkError("remove_neuron: lambda size mismatch");
    for (int idx : outgoing_connections(net, d)) {
      Matrix& w = net.connections[static_cast<std::size_t>(idx)].weights;
      const Vector row_j = w.row(j);
      for (int k = 0; k < m; ++k) {
        if (k != j && full_lambda(k) != 0.0) w.row(k) += full_lambda(k) * row_j;
      }
    }
  }
  for (auto& c : net.connections) {
    if (c.to == d && c.tag != Tag::Energy) c.weights = drop_column(c.weights, j);
    if (c.from == d) c.weights = drop_row(c.weights, j);
  }
  net.layers[static_cast<std::size_t>(d)].size = m - 1;
}

namespace detail {

inline std::vector<int> layer_sizes(const Network& net) {
  std::vector<int> s;
  for (const auto& l : net.layers) s.push_back(l.size);
  return s;
}

inline double reference_factor(const Network& net, std::size_t reference_params) {
  return static_cast<double>(net.parameter_count()) / static_cast<double>(reference_params);
}

inline std::size_t reference_parameters(const Network& net) {
  return net.member_parameters > 0 ? net.member_parameters : net.parameter_count();
}

inline void check_shrinkable(const Network& net, int d, int target, const char* what, bool allow_same = false) {
  if (d < 0 || d > net.output_id()) throw ShrinkError(std::string(what) + ": no layer " + std::to_string(d));
  if (!is_inner(net, d)) {
    throw ShrinkError(std::string(what) + ": layer " + std::to_string(d) + " (" + std::string(to_string(net.layer(d).kind)) +
                      ") is not an inner layer");
  }
  const int m = net.layer(d).size;
  if (target > m || (target == m && !allow_same)) {
    throw ShrinkError(std::string(what) + ": target size " + std::to_string(target) + " must be below current size " + std::to_string(m));
  }
  if (target < 1) throw ShrinkError(std::string(what) + ": target size must be at least 1");
}

}  // namespace detail

/// Data-free shrinking of layer d down to `target` neurons, one removal at a
/// time. DataFree compensates with least-squares lambda from the incoming
/// weights; SrinivasBabu adds the removed row onto the selected partner.
inline ShrinkReport shrink_layer_datafree(Network& net, int d, int target, ShrinkMethod method = ShrinkMethod::DataFree) {
  if (method != ShrinkMethod::DataFree && method != ShrinkMethod::SrinivasBabu) {
    throw ShrinkError("shrink_layer_datafree: method must be datafree or srinivas_babu");
  }
  detail::check_shrinkable(net, d, target, "shrink_layer_datafree");
  const std::size_t ref = detail::reference_parameters(net);
  ShrinkReport report;
  report.method = method;
  report.layer = d;
  report.sizes_before = detail::layer_sizes(net);
  report.size_factor_before = detail::reference_factor(net, ref);

  while (net.layer(d).size > target) {
    const Matrix u = incoming_bundle(net, d);
    const Matrix v = outgoing_bundle(net, d);
    const PairSelection sel = datafree_select(u, v);
    ShrinkRecord rec{d, sel.j, sel.i, sel.criterion, 0.0};
    Eigen::VectorXd full;
    if (method == ShrinkMethod::DataFree) {
      const LeastSquares ls = datafree_lambda(u, sel.j);
      rec.residual = ls.residual;
      full = expand_lambda(ls.x, sel.j);
    } else {
      full = Eigen::VectorXd::Zero(u.cols());
      full(sel.i) = 1.0;
      rec.residual = (u.col(sel.i) - u.col(sel.j)).norm();
    }
    remove_neuron(net, d, sel.j, full);
    report.removals.push_back(rec);
  }
  report.sizes_after = detail::layer_sizes(net);
  report.size_factor_after = detail::reference_factor(net, ref);
  return report;
}

/// Replaces a linear layer by its rank-`target` factorization: X = U V is
/// approximated by Y Z, U <- Y and V <- Z. Incoming bias rows are part of U,
/// so the layer's new bias is the matching row of Y. target == size only
/// refactorizes.
inline ShrinkReport shrink_layer_svd(Network& net, int d, int target) {
  detail::check_shrinkable(net, d, target, "shrink_layer_svd", true);
  const LayerSpec& layer = net.layer(d);
  if (layer.kind != LayerKind::Dense || layer.activation != Activation::Linear) {
    throw ShrinkError("shrink_layer_svd: layer " + std::to_string(d) + " is not a linear Dense layer");
  }
  const std::size_t ref = detail::reference_parameters(net);
  ShrinkReport report;
  report.method = ShrinkMethod::Svd;
  report.layer = d;
  report.sizes_before = detail::layer_sizes(net);
  report.size_factor_before = detail::reference_factor(net, ref);

  const auto in_idx = incoming_connections(net, d);
  const auto out_idx = outgoing_connections(net, d);
  const Matrix u = incoming_bundle(net, d);
  const Matrix v = outgoing_bundle(net, d);
  if (target > std::min(u.rows(), v.cols())) {
    throw ShrinkError("shrink_layer_svd: target " + std::to_string(target) + " exceeds min(m_in, m_out) = " +
                      std::to_string(std::min(u.rows(), v.cols())));
  }
  const Matrix x = u * v;
  const LowRankFactors f = truncated_svd(x, target);

  Eigen::Index row = 0;
  for (int idx : in_idx) {
    Matrix& w = net.connections[static_cast<std::size_t>(idx)].weights;
    const Eigen::Index rows = w.rows();
    w = f.y.middleRows(row, rows);
    row += rows;
  }
  Eigen::Index col = 0;
  for (int idx : out_idx) {
    Matrix& w = net.connections[static_cast<std::size_t>(idx)].weights;
    const Eigen::Index cols = w.cols();
    w = f.z.middleCols(col, cols);
    col += cols;
  }
  const int m = layer.size;
  net.layers[static_cast<std::size_t>(d)].size = target;

  // One record per discarded direction: criterion is its singular value,
  // residual the Frobenius error of the factorization.
  double tail = 0.0;
  for (Eigen::Index k = target; k < f.singular_values.size(); ++k) tail += f.singular_values(k) * f.singular_values(k);
  tail = std::sqrt(tail);
  for (int k = target; k < m; ++k) {
    const double sigma = k < f.singular_values.size() ? f.singular_values(k) : 0.0;
    report.removals.push_back({d, k, -1, sigma, tail});
  }
  report.sizes_after = detail::layer_sizes(net);
  report.size_factor_after = detail::reference_factor(net, ref);
  return report;
}

/// Re-executes the removals of a data-free / baseline report on `net`.
inline void replay(Network& net, const ShrinkReport& report) {
  for (const auto& r : report.removals) {
    const Matrix u = incoming_bundle(net, r.layer);
    Eigen::VectorXd full;
    if (report.method == ShrinkMethod::DataFree) {
      full = expand_lambda(datafree_lambda(u, r.j).x, r.j);
    } else if (report.method == ShrinkMethod::SrinivasBabu) {
      full = Eigen::VectorXd::Zero(u.cols());
      full(r.i) = 1.0;
    } else {
      throw ShrinkError("replay: only data-free and baseline reports can be replayed without data");
    }
    remove_neuron(net, r.layer, r.j, full);
  }
}

// ---------------------------------------------------------------------------
// Output divergence between a reference (single model or ensemble) and a
// candidate network.

struct DivergenceStats {
  double max_abs = 0.0;
  double mean_abs = 0.0;
  double agreement = 1.0;  // fraction of outputs / steps with identical argmax
  std::size_t outputs = 0;
};

enum class CompareOn { Logits, Probabilities };

namespace detail {

class DivergenceAccumulator {
 public:
  void add(const Vector& ref, const Vector& cand) {
    if (ref.size() != cand.size()) throw NetworkError("divergence: output arity mismatch");
    const Vector diff = (ref - cand).cwiseAbs();
    max_ = std::max(max_, diff.maxCoeff());
    sum_ += diff.sum();
    entries_ += static_cast<std::size_t>(diff.size());
    agree_ += argmax(ref) == argmax(cand) ? 1 : 0;
    ++outputs_;
  }
  DivergenceStats stats() const {
    DivergenceStats s;
    s.max_abs = max_;
    s.mean_abs = entries_ ? sum_ / static_cast<double>(entries_) : 0.0;
    s.agreement = outputs_ ? static_cast<double>(agree_) / static_cast<double>(outputs_) : 1.0;
    s.outputs = outputs_;
    return s;
  }

 private:
  double max_ = 0.0, sum_ = 0.0;
  std::size_t entries_ = 0, agree_ = 0, outputs_ = 0;
};

inline void check_arity(std::span<const Network* const> refs, const Network& cand) {
  if (refs.empty()) throw NetworkError("divergence: empty reference");
  for (const Network* r : refs) {
    if (r->arch != cand.arch || r->layers[1].size != cand.layers[1].size || r->layers.back().size != cand.layers.back().size) {
      throw NetworkError("divergence: reference and candidate disagree on input/output arity");
    }
  }
}

inline const Vector& pick(const StepOutput& o, CompareOn on) { return on == CompareOn::Logits ? o.logits : o.probs; }

}  // namespace detail

/// Feature-vector inputs (Feedforward). The reference output is the mean of
/// the member logits or probabilities.
inline DivergenceStats divergence(std::span<const Network* const> refs, const Network& cand, std::span<const Vector> inputs,
                                  CompareOn on = CompareOn::Probabilities) {
  detail::check_arity(refs, cand);
  detail::DivergenceAccumulator acc;
  for (const auto& x : inputs) {
    Vector ref = Vector::Zero(cand.layers.back().size);
    for (const Network* r : refs) ref += detail::pick(forward(*r, x), on);
    ref /= static_cast<double>(refs.size());
    acc.add(ref, detail::pick(forward(cand, x), on));
  }
  return acc.stats();
}

/// Token-sequence inputs. SeqClassifier compares the final output; the
/// attention decoder is compared step by step with the candidate forced along
/// the reference's greedy (ensemble) decoding.
inline DivergenceStats divergence(std::span<const Network* const> refs, const Network& cand,
                                  std::span<const std::vector<int>> inputs, CompareOn on = CompareOn::Probabilities,
                                  std::size_t max_len = 32) {
  detail::check_arity(refs, cand);
  detail::DivergenceAccumulator acc;
  for (const auto& src : inputs) {
    if (cand.arch == Arch::SeqClassifier) {
      Vector ref = Vector::Zero(cand.layers.back().size);
      for (const Network* r : refs) ref += detail::pick(forward(*r, std::span<const int>(src)), on);
      ref /= static_cast<double>(refs.size());
      acc.add(ref, detail::pick(forward(cand, std::span<const int>(src)), on));
    } else if (cand.arch == Arch::EncDecAttention) {
      const DecodeResult ref = ensemble_decode(refs, src, max_len);
      std::vector<int> path = ref.tokens;
      if (ref.distributions.size() > ref.tokens.size()) path.push_back(kEos);
      if (on == CompareOn::Probabilities) {
        const auto steps = forward(cand, src, path);
        for (std::size_t i = 0; i < steps.size(); ++i) acc.add(ref.distributions[i], steps[i].probs);
      } else {
        // mean member logits along the same path
        std::vector<Vector> mean;
        for (const Network* r : refs) {
          auto steps = forward(*r, src, path);
          if (mean.empty()) {
            for (auto& s : steps) mean.push_back(s.logits);
          } else {
            for (std::size_t i = 0; i < steps.size(); ++i) mean[i] += steps[i].logits;
          }
        }
        const auto steps = forward(cand, src, path);
        for (std::size_t i = 0; i < steps.size(); ++i) acc.add(mean[i] / static_cast<double>(refs.size()), steps[i].logits);
      }
    } else {
      throw NetworkError("divergence: token inputs need a sequence network");
    }
  }
  return acc.stats();
}

inline DivergenceStats divergence(const Network& ref, const Network& cand, std::span<const Vector> inputs,
                                  CompareOn on = CompareOn::Probabilities) {
  const Network* r[] = {&ref};
  return divergence(std::span<const Network* const>(r), cand, inputs, on);
}

inline DivergenceStats divergence(const Network& ref, const Network& cand, std::span<const std::vector<int>> inputs,
                                  CompareOn on = CompareOn::Probabilities, std::size_t max_len = 32) {
  const Network* r[] = {&ref};
  return divergence(std::span<const Network* const>(r), cand, inputs, on, max_len);
}

}  // namespace foldnet
