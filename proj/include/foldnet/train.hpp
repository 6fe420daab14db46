#pragma once

// AdaGrad training with per-component step clipping, activity recording and
// the interleaved data-bound shrinking loop.

#include "foldnet/gradients.hpp"
#include "foldnet/shrink.hpp"
#include "foldnet/tasks.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace foldnet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 0.0001;
  double step_clip = 0.05;
  int batch_size = 16;
  int iterations = 1000;
  std::uint64_t seed = 1;
  double adagrad_epsilon = 1e-8;

  void check() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (!(step_clip > 0.0)) throw std::invalid_argument("step_clip must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
    if (iterations < 0) throw std::invalid_argument("iterations must be non-negative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, learning_rate, step_clip, batch_size, iterations, seed,
                                                adagrad_epsilon)

class AdaGrad {
 public:
  AdaGrad(const Network& net, double learning_rate, double step_clip, double epsilon)
      : accum_(zero_gradients(net)), lr_(learning_rate), clip_(step_clip), eps_(epsilon) {}

  /// w -= clip(lr * g / sqrt(G + eps)) after G += g^2. Returns the largest
  /// absolute step applied.
  double step(Network& net, const Gradients& grads) {
    double largest = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Matrix& g2 = accum_[i];
      Matrix& w = net.connections[i].weights;
      const Matrix& g = grads[i];
      for (Eigen::Index k = 0; k < g.size(); ++k) {
        const double gk = g.data()[k];
        g2.data()[k] += gk * gk;
        double s = lr_ * gk / std::sqrt(g2.data()[k] + eps_);
        s = std::clamp(s, -clip_, clip_);
        w.data()[k] -= s;
        largest = std::max(largest, std::abs(s));
      }
    }
    return largest;
  }

  std::vector<Matrix>& accumulators() { return accum_; }
  const std::vector<Matrix>& accumulators() const { return accum_; }

 private:
  std::vector<Matrix> accum_;
  double lr_, clip_, eps_;
};

struct LossPoint {
  int iteration = 0;
  double loss = 0.0;  // mean per-token loss over the preceding window
};

struct TrainResult {
  std::vector<LossPoint> curve;
  double max_step = 0.0;
};

/// Called after the gradient of each iteration is computed, before the update.
using IterationHook = std::function<void(int iteration)>;

namespace detail {

/// Mean per-token cross-entropy gradient over a batch drawn with `rng`.
inline double batch_gradient(const Network& net, const Dataset& data, int batch, std::mt19937_64& rng, Gradients& grads,
                             const ActivitySink* sink) {
  std::uniform_int_distribution<std::size_t> pick(0, data.items.size() - 1);
  std::vector<std::size_t> idx(static_cast<std::size_t>(batch));
  std::size_t tokens = 0;
  for (auto& i : idx) {
    i = pick(rng);
    tokens += net.arch == Arch::EncDecAttention ? data.items[i].target.size() : 1;
  }
  const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(tokens, 1));
  double loss = 0.0;
  for (std::size_t i : idx) loss += example_gradient(net, data.items[i], grads, scale, sink);
  return loss * scale;
}

inline void check_task_fits(const Network& net, const Dataset& data) {
  if (data.items.empty()) throw std::invalid_argument("empty dataset");
  if (net.arch == Arch::Feedforward) {
    if (data.items[0].source.size() != static_cast<std::size_t>(net.layers[1].size)) {
      throw std::invalid_argument("dataset '" + data.task_name + "' does not match the feedforward input size");
    }
  } else if (data.vocab_size > net.vocab_size) {
    throw std::invalid_argument("dataset vocabulary " + std::to_string(data.vocab_size) + " exceeds network vocabulary " +
                                std::to_string(net.vocab_size));
  }
  const bool seq_task = data.task_name == "reverse" || data.task_name == "copy";
  if (seq_task != (net.arch == Arch::EncDecAttention)) {
    throw std::invalid_argument("task '" + data.task_name + "' does not fit a " + std::string(to_string(net.arch)) + " network");
  }
}

}  // namespace detail

/// Trains `net` in place. The loss curve holds one point per 10 iterations.
inline TrainResult train_adagrad(Network& net, const Dataset& data, const TrainConfig& cfg, const ActivitySink* sink = nullptr,
                                 AdaGrad* optimizer = nullptr, std::mt19937_64* rng_in = nullptr, bool update = true) {
  cfg.check();
  detail::check_task_fits(net, data);
  AdaGrad local(net, cfg.learning_rate, cfg.step_clip, cfg.adagrad_epsilon);
  AdaGrad& opt = optimizer ? *optimizer : local;
  std::mt19937_64 local_rng(cfg.seed);
  std::mt19937_64& rng = rng_in ? *rng_in : local_rng;

  TrainResult result;
  double window = 0.0;
  int window_n = 0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    Gradients grads = zero_gradients(net);
    const double loss = detail::batch_gradient(net, data, cfg.batch_size, rng, grads, sink);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite loss " << loss << " at iteration " << it << " (learning_rate " << cfg.learning_rate << ")";
      throw TrainingError(msg.str());
    }
    if (update) result.max_step = std::max(result.max_step, opt.step(net, grads));
    window += loss;
    ++window_n;
    if (it % 10 == 0) {
      result.curve.push_back({it, window / window_n});
      window = 0.0;
      window_n = 0;
    }
  }
  return result;
}

inline std::string loss_csv(const std::vector<LossPoint>& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "iteration,loss\n";
  for (const auto& p : curve) out << p.iteration << ',' << p.loss << '\n';
  return out.str();
}

/// Mean per-token loss over a dataset.
inline double mean_loss(const Network& net, const Dataset& data) {
  double loss = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : data.items) {
    loss += example_loss(net, ex);
    tokens += net.arch == Arch::EncDecAttention ? ex.target.size() : 1;
  }
  return loss / static_cast<double>(std::max<std::size_t>(tokens, 1));
}

// ---------------------------------------------------------------------------
// Activity recording

struct ActivityMatrix {
  int layer = 0;
  Matrix rows;  // samples x m
  int first_iteration = 0;
  int last_iteration = 0;
};

/// Reservoir of activity rows for one layer, capped at `cap` uniformly
/// sampled rows.
class ActivityReservoir {
 public:
  ActivityReservoir(int layer, int width, std::size_t cap, std::uint64_t seed)
      : layer_(layer), width_(width), cap_(cap), rng_(seed) {}

  void add(const Vector& row) {
    ++seen_;
    if (rows_.size() < cap_) {
      rows_.push_back(row);
      return;
    }
    std::uniform_int_distribution<std::uint64_t> pick(0, seen_ - 1);
    const std::uint64_t slot = pick(rng_);
    if (slot < cap_) rows_[slot] = row;
  }

  void drop_column(int j) {
    for (auto& r : rows_) {
      Vector shorter(r.size() - 1);
      shorter << r.head(j), r.tail(r.size() - j - 1);
      r = std::move(shorter);
    }
    --width_;
  }

  void clear() {
    rows_.clear();
    seen_ = 0;
  }

  int layer() const { return layer_; }
  std::size_t seen() const { return seen_; }
  std::size_t size() const { return rows_.size(); }

  Matrix matrix() const {
    Matrix m(static_cast<Eigen::Index>(rows_.size()), width_);
    for (std::size_t i = 0; i < rows_.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows_[i];
    return m;
  }

 private:
  int layer_;
  int width_;
  std::size_t cap_;
  std::mt19937_64 rng_;
  std::vector<Vector> rows_;
  std::uint64_t seen_ = 0;
};

struct RecordOptions {
  int batch_size = 16;
  int iterations = 1;
  std::size_t sample_cap = kDefaultSampleCap;
  std::uint64_t seed = 1;
};

/// Activities of layer d over `iterations` batches taken in dataset order.
/// Gru layers contribute one row per time step, Dense layers one per
/// evaluation.
inline ActivityMatrix record_activities(const Network& net, const Dataset& data, int d, const RecordOptions& opt) {
  if (!is_inner(net, d)) throw ShrinkError("record_activities: layer " + std::to_string(d) + " is not an inner layer");
  if (data.items.empty()) throw std::invalid_argument("record_activities: empty dataset");
  ActivityReservoir res(d, net.layer(d).size, opt.sample_cap, opt.seed);
  const ActivitySink sink = [&](int layer, const Vector& row) {
    if (layer == d) res.add(row);
  };
  std::size_t next = 0;
  for (int it = 0; it < opt.iterations; ++it) {
    for (int b = 0; b < opt.batch_size; ++b) {
      Gradients scratch = zero_gradients(net);
      example_gradient(net, data.items[next], scratch, 0.0, &sink);
      next = (next + 1) % data.items.size();
    }
  }
  return {d, res.matrix(), 1, opt.iterations};
}

// ---------------------------------------------------------------------------
// Data-bound shrinking

struct PruneSchedule {
  int remove_per_event = 40;
  int interval_iterations = 450;
  std::map<int, int> target_sizes;  // layer id -> size
  std::size_t activity_sample_cap = kDefaultSampleCap;
  int finetune_iterations = -1;  // -1: twice the interval

  void check() const {
    if (remove_per_event < 1) throw std::invalid_argument("remove_per_event must be at least 1");
    if (interval_iterations < 1) throw std::invalid_argument("interval_iterations must be at least 1");
  }
};

/// Toy-scale schedule: layers of 32-128 neurons.
inline PruneSchedule desk_schedule() {
  PruneSchedule s;
  s.remove_per_event = 4;
  s.interval_iterations = 50;
  return s;
}

enum class Compensation { Both, LinearCombinationOnly, SgdOnly, None };

inline std::string_view to_string(Compensation c) {
  switch (c) {
    case Compensation::Both: return "both";
    case Compensation::LinearCombinationOnly: return "linear_combination";
    case Compensation::SgdOnly: return "sgd";
    case Compensation::None: return "none";
  }
  return "?";
}

inline std::optional<Compensation> parse_compensation(std::string_view s) {
  using enum Compensation;
  return parse_enum(s, {Both, LinearCombinationOnly, SgdOnly, None});
}

struct DataBoundResult {
  ShrinkReport report;
  std::vector<LossPoint> curve;
};

/// Interleaves training with pruning: every interval, each target layer still
/// above its target loses up to remove_per_event neurons selected and
/// compensated from the activities recorded since the previous event.
inline DataBoundResult shrink_databound(Network& net, const Dataset& data, const PruneSchedule& schedule, const TrainConfig& cfg,
                                        Compensation mode = Compensation::Both) {
  schedule.check();
  cfg.check();
  detail::check_task_fits(net, data);
  for (const auto& [d, target] : schedule.target_sizes) {
    if (d < 0 || d > net.output_id() || !is_inner(net, d)) {
      throw ShrinkError("shrink_databound: layer " + std::to_string(d) + " is not an inner layer");
    }
    if (target < 1) throw ShrinkError("shrink_databound: target size must be at least 1");
    if (target > net.layer(d).size) {
      throw ShrinkError("shrink_databound: target " + std::to_string(target) + " exceeds size " +
                        std::to_string(net.layer(d).size) + " of layer " + std::to_string(d));
    }
  }

  const std::size_t ref = detail::reference_parameters(net);
  DataBoundResult out;
  out.report.method = ShrinkMethod::DataBound;
  out.report.layer = schedule.target_sizes.size() == 1 ? schedule.target_sizes.begin()->first : -1;
  out.report.sizes_before = detail::layer_sizes(net);
  out.report.size_factor_before = detail::reference_factor(net, ref);

  auto pending = [&] {
    for (const auto& [d, target] : schedule.target_sizes) {
      if (net.layer(d).size > target) return true;
    }
    return false;
  };
  if (!pending()) {
    out.report.sizes_after = out.report.sizes_before;
    out.report.size_factor_after = out.report.size_factor_before;
    return out;
  }

  const bool use_sgd = mode == Compensation::Both || mode == Compensation::SgdOnly;
  const bool use_lambda = mode == Compensation::Both || mode == Compensation::LinearCombinationOnly;

  AdaGrad opt(net, cfg.learning_rate, cfg.step_clip, cfg.adagrad_epsilon);
  std::mt19937_64 rng(cfg.seed);
  std::vector<ActivityReservoir> reservoirs;
  std::uint64_t salt = 0;
  for (const auto& [d, target] : schedule.target_sizes) {
    reservoirs.emplace_back(d, net.layer(d).size, schedule.activity_sample_cap, cfg.seed * 1000003ULL + (++salt));
  }
  const ActivitySink sink = [&](int layer, const Vector& row) {
    for (auto& r : reservoirs) {
      if (r.layer() == layer) r.add(row);
    }
  };

  TrainConfig interval = cfg;
  interval.iterations = schedule.interval_iterations;
  int iteration = 0;
  while (pending()) {
    TrainResult tr = train_adagrad(net, data, interval, &sink, &opt, &rng, use_sgd);
    for (auto& p : tr.curve) out.curve.push_back({p.iteration + iteration, p.loss});
    iteration += interval.iterations;

    for (auto& res : reservoirs) {
      const int d = res.layer();
      const int target = schedule.target_sizes.at(d);
      int todo = std::min(schedule.remove_per_event, net.layer(d).size - target);
      if (todo <= 0) {
        res.clear();
        continue;
      }
      // ||A x|| == ||R x|| for every x, so selection and lambda can run on R.
      Matrix act = compress_rows(res.matrix());
      while (todo-- > 0) {
        const PairSelection sel = databound_select(act);
        ShrinkRecord rec{d, sel.j, sel.i, sel.criterion, 0.0};
        Eigen::VectorXd full;
        if (use_lambda) {
          const LeastSquares ls = databound_lambda(act, sel.j, schedule.activity_sample_cap, cfg.seed);
          rec.residual = ls.residual;
          full = expand_lambda(ls.x, sel.j);
        } else {
          rec.residual = act.col(sel.j).norm();
        }
        drop_neuron(net, d, sel.j, opt.accumulators());
        remove_neuron(net, d, sel.j, full);
        act = drop_column(act, sel.j);
        res.drop_column(sel.j);
        out.report.removals.push_back(rec);
      }
      res.clear();
    }
  }

  if (use_sgd) {
    TrainConfig tail = cfg;
    tail.iterations = schedule.finetune_iterations >= 0 ? schedule.finetune_iterations : 2 * schedule.interval_iterations;
    if (tail.iterations > 0) {
      TrainResult tr = train_adagrad(net, data, tail, nullptr, &opt, &rng, true);
      for (auto& p : tr.curve) out.curve.push_back({p.iteration + iteration, p.loss});
    }
  }
  out.report.sizes_after = detail::layer_sizes(net);
  out.report.size_factor_after = detail::reference_factor(net, ref);
  return out;
}

}  // namespace foldnet
