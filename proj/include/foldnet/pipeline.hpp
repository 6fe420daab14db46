#pragma once

// Ordered shrinking pipeline. The default applies SVD to linear dense
// layers, then data-free removal to the remaining non-recurrent layers, then
// data-bound removal to recurrent layers.

#include "foldnet/shrink.hpp"
#include "foldnet/train.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace foldnet {

class PipelineError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PipelineStage {
  ShrinkMethod method = ShrinkMethod::DataFree;
  std::map<int, int> targets;  // layer id -> size
};

struct PipelineSpec {
  std::vector<PipelineStage> stages;
};

struct PipelineOptions {
  TrainConfig train;
  PruneSchedule schedule = desk_schedule();
  Compensation compensation = Compensation::Both;
  const Dataset* data = nullptr;
  std::function<void(const std::string&)> warn;
};

struct PipelineResult {
  std::vector<ShrinkReport> reports;
  std::vector<LossPoint> curve;
  double size_factor_before = 1.0;
  double size_factor_after = 1.0;
};

inline int stage_rank(ShrinkMethod m) {
  switch (m) {
    case ShrinkMethod::Svd: return 0;
    case ShrinkMethod::DataFree:
    case ShrinkMethod::SrinivasBabu: return 1;
    case ShrinkMethod::DataBound: return 2;
  }
  return 3;
}

inline ShrinkMethod default_method(const LayerSpec& l) {
  if (l.kind == LayerKind::Gru) return ShrinkMethod::DataBound;
  if (l.kind == LayerKind::Dense && l.activation == Activation::Linear) return ShrinkMethod::Svd;
  return ShrinkMethod::DataFree;
}

/// Each inner layer mapped to its size in one ensemble member.
inline std::map<int, int> member_targets(const Network& net) {
  if (net.member_sizes.empty()) {
    throw PipelineError("model carries no member sizes; 'member' targets need a model written by unfold");
  }
  std::map<int, int> t;
  for (const auto& l : net.layers) {
    if (is_inner(net, l.id)) t[l.id] = net.member_sizes[static_cast<std::size_t>(l.id)];
  }
  return t;
}

inline PipelineSpec default_pipeline(const Network& net, const std::map<int, int>& targets) {
  PipelineSpec spec;
  for (ShrinkMethod m : {ShrinkMethod::Svd, ShrinkMethod::DataFree, ShrinkMethod::DataBound}) {
    PipelineStage stage{m, {}};
    for (const auto& [d, size] : targets) {
      if (default_method(net.layer(d)) == m && size < net.layer(d).size) stage.targets[d] = size;
    }
    if (!stage.targets.empty()) spec.stages.push_back(std::move(stage));
  }
  return spec;
}

inline bool needs_data(const PipelineSpec& spec) {
  for (const auto& s : spec.stages) {
    if (s.method == ShrinkMethod::DataBound) return true;
  }
  return false;
}

/// Returns a message when the stages deviate from svd -> datafree -> databound.
inline std::optional<std::string> order_warning(const PipelineSpec& spec) {
  for (std::size_t k = 1; k < spec.stages.size(); ++k) {
    if (stage_rank(spec.stages[k].method) < stage_rank(spec.stages[k - 1].method)) {
      return "pipeline runs " + std::string(to_string(spec.stages[k - 1].method)) + " before " +
             std::string(to_string(spec.stages[k].method)) + "; the default order is svd -> datafree -> databound";
    }
  }
  return std::nullopt;
}

/// Pipeline from JSON:
///   {"stages": [{"method": "svd", "targets": {"enc_embed": 8, "dec_embed": "member"}},
///               {"method": "databound", "layers": ["enc_gru", "dec_gru"], "targets": "member"}]}
inline PipelineSpec parse_pipeline(const nlohmann::json& j, const Network& net) {
  if (!j.is_object() || !j.contains("stages") || !j["stages"].is_array()) {
    throw PipelineError("pipeline: expected an object with a 'stages' array");
  }
  std::optional<std::map<int, int>> members;
  auto member_size = [&](int d) {
    if (!members) members = member_targets(net);
    auto it = members->find(d);
    if (it == members->end()) throw PipelineError("pipeline: layer " + std::to_string(d) + " has no member size");
    return it->second;
  };
  auto resolve = [&](const std::string& key) {
    try {
      return net.layer_id(key);
    } catch (const NetworkError& e) {
      throw PipelineError(std::string("pipeline: ") + e.what());
    }
  };

  PipelineSpec spec;
  for (const auto& s : j["stages"]) {
    PipelineStage stage;
    const auto method = parse_shrink_method(s.value("method", std::string()));
    if (!method) throw PipelineError("pipeline: unknown method '" + s.value("method", std::string()) + "'");
    stage.method = *method;
    const auto& t = s.contains("targets") ? s["targets"] : nlohmann::json("member");
    if (t.is_string()) {
      if (t.get<std::string>() != "member") throw PipelineError("pipeline: targets must be an object or \"member\"");
      if (s.contains("layers")) {
        for (const auto& key : s["layers"]) {
          const int d = resolve(key.is_string() ? key.get<std::string>() : std::to_string(key.get<int>()));
          stage.targets[d] = member_size(d);
        }
      } else {
        for (const auto& [d, size] : member_targets(net)) {
          if (default_method(net.layer(d)) == stage.method) stage.targets[d] = size;
        }
      }
    } else if (t.is_object()) {
      for (const auto& [key, val] : t.items()) {
        const int d = resolve(key);
        if (val.is_string() && val.get<std::string>() == "member") {
          stage.targets[d] = member_size(d);
        } else if (val.is_number_integer()) {
          stage.targets[d] = val.get<int>();
        } else {
          throw PipelineError("pipeline: target of '" + key + "' must be an integer or \"member\"");
        }
      }
    } else {
      throw PipelineError("pipeline: targets must be an object or \"member\"");
    }
    spec.stages.push_back(std::move(stage));
  }
  return spec;
}

inline void check_pipeline(const Network& net, const PipelineSpec& spec) {
  std::map<std::pair<int, int>, int> seen;
  for (const auto& s : spec.stages) {
    for (const auto& [d, size] : s.targets) {
      if (d < 0 || d > net.output_id() || !is_inner(net, d)) {
        throw PipelineError("pipeline: layer " + std::to_string(d) + " is not an inner layer");
      }
      if (size < 1) throw PipelineError("pipeline: target size of layer " + std::to_string(d) + " must be at least 1");
      if (++seen[{static_cast<int>(s.method), d}] > 1) {
        throw PipelineError("pipeline: layer " + std::to_string(d) + " targeted twice by " + std::string(to_string(s.method)));
      }
    }
  }
}

inline PipelineResult run_pipeline(Network& net, const PipelineSpec& spec, const PipelineOptions& opt) {
  check_pipeline(net, spec);
  if (needs_data(spec) && (opt.data == nullptr || opt.data->items.empty())) {
    throw PipelineError("pipeline: data-bound shrinking needs training data");
  }
  if (auto w = order_warning(spec); w && opt.warn) opt.warn(*w);

  const std::size_t ref = detail::reference_parameters(net);
  PipelineResult out;
  out.size_factor_before = detail::reference_factor(net, ref);
  for (const auto& stage : spec.stages) {
    if (stage.method == ShrinkMethod::DataBound) {
      PruneSchedule sched = opt.schedule;
      sched.target_sizes.clear();
      for (const auto& [d, size] : stage.targets) {
        if (size > net.layer(d).size) {
          throw PipelineError("pipeline: target " + std::to_string(size) + " exceeds size " +
                              std::to_string(net.layer(d).size) + " of layer " + std::to_string(d));
        }
        if (size < net.layer(d).size) sched.target_sizes[d] = size;
      }
      if (sched.target_sizes.empty()) continue;
      DataBoundResult r = shrink_databound(net, *opt.data, sched, opt.train, opt.compensation);
      const int offset = out.curve.empty() ? 0 : out.curve.back().iteration;
      for (auto& p : r.curve) out.curve.push_back({p.iteration + offset, p.loss});
      out.reports.push_back(std::move(r.report));
      continue;
    }
    for (const auto& [d, requested] : stage.targets) {
      int size = requested;
      if (size > net.layer(d).size) {
        throw PipelineError("pipeline: target " + std::to_string(size) + " exceeds size " +
                            std::to_string(net.layer(d).size) + " of layer " + std::to_string(d));
      }
      if (stage.method == ShrinkMethod::Svd) {
        const auto rank_bound =
            static_cast<int>(std::min(incoming_bundle(net, d).rows(), outgoing_bundle(net, d).cols()));
        if (size > rank_bound) {
          if (opt.warn) {
            opt.warn("layer " + std::to_string(d) + ": svd target " + std::to_string(size) + " exceeds the rank bound " +
                     std::to_string(rank_bound) + ", using " + std::to_string(rank_bound));
          }
          size = rank_bound;
        }
      }
      if (size == net.layer(d).size) continue;
      out.reports.push_back(stage.method == ShrinkMethod::Svd ? shrink_layer_svd(net, d, size)
                                                              : shrink_layer_datafree(net, d, size, stage.method));
    }
  }
  out.size_factor_after = detail::reference_factor(net, ref);
  return out;
}

inline nlohmann::json to_json(const PipelineResult& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& rep : r.reports) stages.push_back(to_json(rep));
  return {{"stages", std::move(stages)}, {"size_factor_before", r.size_factor_before}, {"size_factor_after", r.size_factor_after}};
}

}  // namespace foldnet
