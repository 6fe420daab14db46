// foldnet command-line tool: train members, unfold, shrink, evaluate,
// benchmark and inspect models.
//
// Exit codes: 0 success, 1 data/model error, 2 usage error.

#include "foldnet/bench.hpp"
#include "foldnet/eval.hpp"
#include "foldnet/model_io.hpp"
#include "foldnet/pipeline.hpp"
#include "foldnet/unfold.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace foldnet;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 1;
  bool quiet = false;
  bool json = false;
};

Globals g;

void info(const std::string& msg) {
  if (!g.quiet && !g.json) std::cout << msg << '\n';
}

void warn(const std::string& msg) {
  if (!g.quiet) std::cerr << "warning: " << msg << '\n';
}

void emit(const json& j) {
  if (g.json) std::cout << j.dump(2) << '\n';
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

fs::path sibling(const fs::path& model, const std::string& suffix) {
  fs::path p = model;
  p.replace_extension();
  return p.string() + suffix;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// data options shared by train / shrink / eval / bench

struct DataArgs {
  std::string task;
  int vocab = 0;  // 0: take the model's vocabulary
  int min_len = 3;
  int max_len = 6;
  std::size_t train_size = 2000;
  std::size_t heldout = 500;
  std::uint64_t data_seed = 1;

  void add(CLI::App* cmd, bool required) {
    auto* t = cmd->add_option("--task", task, "toy task: reverse, copy or parity");
    if (required) t->required();
    cmd->add_option("--vocab", vocab, "vocabulary size (default: the model's, or 10)");
    cmd->add_option("--min-len", min_len, "shortest source sequence")->capture_default_str();
    cmd->add_option("--max-len", max_len, "longest source sequence")->capture_default_str();
    cmd->add_option("--train-size", train_size, "training items")->capture_default_str();
    cmd->add_option("--heldout", heldout, "held-out items")->capture_default_str();
    cmd->add_option("--data-seed", data_seed, "seed of the generated data")->capture_default_str();
  }

  TaskOptions options(int model_vocab) const {
    const auto t = parse_task(task);
    if (!t) throw UsageError("unknown task '" + task + "' (expected reverse, copy or parity)");
    if (min_len < 1 || max_len < min_len) {
      throw UsageError("empty length range [" + std::to_string(min_len) + ", " + std::to_string(max_len) + "]");
    }
    TaskOptions o;
    o.task = *t;
    o.vocab_size = vocab > 0 ? vocab : (model_vocab > 0 ? model_vocab : 10);
    o.min_length = min_len;
    o.max_length = max_len;
    o.count = train_size;
    o.seed = data_seed;
    return o;
  }

  Dataset train_set(int model_vocab) const { return make_task(options(model_vocab)); }
  Dataset heldout_set(int model_vocab) const { return make_heldout(options(model_vocab), heldout); }
};

void check_task_arch(Task task, Arch arch, const DataArgs& d) {
  const bool seq = task == Task::Reverse || task == Task::Copy;
  if (seq && arch != Arch::EncDecAttention) {
    throw UsageError("task '" + d.task + "' needs the encdec architecture");
  }
  if (!seq && arch == Arch::EncDecAttention) throw UsageError("task 'parity' needs the classifier or feedforward architecture");
  if (arch == Arch::Feedforward && d.min_len != d.max_len) {
    throw UsageError("feedforward parity needs a fixed length (--min-len equal to --max-len)");
  }
}

Network load(const std::string& path) { return load_model(path); }

std::size_t sample_cap_from_env(std::size_t fallback) {
  const char* env = std::getenv("FOLDNET_SAMPLE_CAP");
  if (!env || !*env) return fallback;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(env, &used);
    if (used != std::string(env).size() || v < 1) throw std::invalid_argument(env);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw UsageError(std::string("FOLDNET_SAMPLE_CAP must be a positive integer, got '") + env + "'");
  }
}

TrainConfig train_config(const std::string& path, TrainConfig cfg) {
  if (path.empty()) return cfg;
  const json j = read_json_file(path);
  try {
    cfg = j.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
  return cfg;
}

PruneSchedule prune_schedule(const std::string& path, PruneSchedule s, const Network& net) {
  if (!path.empty()) {
    const json j = read_json_file(path);
    s.remove_per_event = j.value("remove_per_event", s.remove_per_event);
    s.interval_iterations = j.value("interval_iterations", s.interval_iterations);
    s.activity_sample_cap = j.value("activity_sample_cap", s.activity_sample_cap);
    s.finetune_iterations = j.value("finetune_iterations", s.finetune_iterations);
    if (j.contains("target_sizes")) {
      for (const auto& [key, val] : j["target_sizes"].items()) s.target_sizes[net.layer_id(key)] = val.get<int>();
    }
  }
  s.activity_sample_cap = sample_cap_from_env(s.activity_sample_cap);
  s.check();
  return s;
}

std::vector<const Network*> pointers(const std::vector<Network>& nets) {
  std::vector<const Network*> p;
  for (const auto& n : nets) p.push_back(&n);
  return p;
}

json metrics_json(const EvalMetrics& m) {
  return {{"items", m.items}, {"accuracy", m.accuracy}, {"mean_nll", m.mean_nll}};
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  DataArgs data;
  std::string arch = "encdec";
  int hidden = 32;
  int embed = 16;
  int attention = 32;
  int iters = 3000;
  int batch = 16;
  double lr = 0.02;
  std::string config;
  std::string out;
  std::string loss_csv;
};

void cmd_train(const TrainArgs& a) {
  const auto task = parse_task(a.data.task);
  if (!task) throw UsageError("unknown task '" + a.data.task + "' (expected reverse, copy or parity)");
  std::optional<Arch> arch = parse_arch(a.arch);
  if (a.arch == "encdec") arch = Arch::EncDecAttention;
  if (a.arch == "classifier") arch = Arch::SeqClassifier;
  if (a.arch == "feedforward") arch = Arch::Feedforward;
  if (!arch) throw UsageError("unknown arch '" + a.arch + "' (expected encdec, classifier or feedforward)");
  check_task_arch(*task, *arch, a.data);
  if (a.hidden < 1 || a.embed < 1 || a.attention < 1) throw UsageError("layer sizes must be positive");

  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.iterations = a.iters;
  cfg.batch_size = a.batch;
  cfg.seed = g.seed;
  cfg = train_config(a.config, cfg);
  try {
    cfg.check();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const int vocab = a.data.vocab > 0 ? a.data.vocab : (*task == Task::Parity ? 2 : 10);
  const InitOptions init{g.seed, 1.0};
  Network net;
  switch (*arch) {
    case Arch::EncDecAttention: net = make_encdec({vocab, a.embed, a.hidden, a.attention}, init); break;
    case Arch::SeqClassifier: net = make_seq_classifier({2, a.embed, a.hidden, 2}, init); break;
    case Arch::Feedforward: {
      FeedforwardShape s;
      s.inputs = a.data.max_len;
      s.hidden = {a.hidden};
      s.outputs = 2;
      net = make_feedforward(s, init);
      break;
    }
  }
  const Dataset train = a.data.train_set(vocab);
  const Dataset held = a.data.heldout_set(vocab);
  TrainResult tr;
  if (cfg.iterations > 0) tr = train_adagrad(net, train, cfg);
  save_model(net, a.out);
  const fs::path csv = a.loss_csv.empty() ? sibling(a.out, ".loss.csv") : fs::path(a.loss_csv);
  write_text(csv, loss_csv(tr.curve));

  const EvalMetrics m = evaluate(net, held);
  info("wrote " + a.out + " (" + std::to_string(net.parameter_count()) + " parameters)");
  info("held-out accuracy " + fixed(m.accuracy) + ", mean NLL " + fixed(m.mean_nll));
  emit({{"model", a.out},
        {"loss_csv", csv.string()},
        {"parameters", net.parameter_count()},
        {"final_loss", tr.curve.empty() ? json(nullptr) : json(tr.curve.back().loss)},
        {"heldout", metrics_json(m)}});
}

// ---------------------------------------------------------------------------
// unfold

void cmd_unfold(const std::vector<std::string>& models, const std::string& out) {
  std::vector<Network> nets;
  for (const auto& p : models) nets.push_back(load(p));
  const Network u = unfold(nets);
  save_model(u, out);
  const double factor = size_factor(u, nets[0]);
  info("unfolded " + std::to_string(nets.size()) + " models into " + out + ", size factor " + fixed(factor, 3));
  emit({{"model", out}, {"members", nets.size()}, {"parameters", u.parameter_count()}, {"size_factor", factor}});
}

// ---------------------------------------------------------------------------
// shrink

struct ShrinkArgs {
  DataArgs data;
  std::string model;
  std::string out;
  std::string pipeline;
  std::string targets = "member";
  std::string method;
  std::string layer;
  int target = 0;
  std::string config;
  std::string schedule;
  std::string compensation = "both";
  double lr = 0.02;
  int batch = 16;
};

std::map<int, int> parse_targets(const std::string& text, const Network& net) {
  if (text == "member") return member_targets(net);
  std::map<int, int> t;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("--targets expects 'member' or layer=size[,layer=size...]");
    const int d = net.layer_id(item.substr(0, eq));
    const std::string v = item.substr(eq + 1);
    if (v == "member") {
      t[d] = member_targets(net).at(d);
    } else {
      try {
        t[d] = std::stoi(v);
      } catch (const std::exception&) {
        throw UsageError("--targets: bad size '" + v + "'");
      }
    }
  }
  return t;
}

void cmd_shrink(const ShrinkArgs& a) {
  Network net = load(a.model);
  const double factor_before = member_size_factor(net);

  PipelineSpec spec;
  if (!a.method.empty()) {
    if (!a.pipeline.empty()) throw UsageError("--method and --pipeline are mutually exclusive");
    const auto m = parse_shrink_method(a.method);
    if (!m) throw UsageError("unknown method '" + a.method + "' (expected svd, datafree, srinivas_babu or databound)");
    if (a.layer.empty() || a.target < 1) throw UsageError("--method needs --layer and --target");
    spec.stages.push_back({*m, {{net.layer_id(a.layer), a.target}}});
  } else if (a.pipeline.empty() || a.pipeline == "default") {
    spec = default_pipeline(net, parse_targets(a.targets, net));
  } else {
    spec = parse_pipeline(read_json_file(a.pipeline), net);
  }

  std::optional<Dataset> train;
  if (needs_data(spec)) {
    if (a.data.task.empty()) throw UsageError("data-bound shrinking needs --task");
    const auto task = parse_task(a.data.task);
    if (!task) throw UsageError("unknown task '" + a.data.task + "'");
    check_task_arch(*task, net.arch, a.data);
    train = a.data.train_set(net.vocab_size);
  }
  const auto comp = parse_compensation(a.compensation);
  if (!comp) throw UsageError("unknown compensation '" + a.compensation + "' (expected both, linear_combination, sgd or none)");

  PipelineOptions opt;
  opt.train.learning_rate = a.lr;
  opt.train.batch_size = a.batch;
  opt.train.seed = g.seed;
  opt.train = train_config(a.config, opt.train);
  opt.schedule = prune_schedule(a.schedule, desk_schedule(), net);
  opt.compensation = *comp;
  opt.data = train ? &*train : nullptr;
  opt.warn = warn;

  const PipelineResult r = run_pipeline(net, spec, opt);
  save_model(net, a.out);
  const fs::path report_path = sibling(a.out, ".report.json");
  json report = to_json(r);
  report["model"] = a.out;
  write_text(report_path, report.dump(2) + "\n");
  if (!r.curve.empty()) write_text(sibling(a.out, ".loss.csv"), loss_csv(r.curve));

  info("wrote " + a.out + " and " + report_path.string());
  info("size factor " + fixed(factor_before, 3) + " -> " + fixed(member_size_factor(net), 3));
  json j = {{"model", a.out}, {"report", report_path.string()}, {"size_factor_before", factor_before},
            {"size_factor_after", member_size_factor(net)}, {"sizes", detail::layer_sizes(net)}};
  if (a.data.task.size() && train) j["heldout"] = metrics_json(evaluate(net, a.data.heldout_set(net.vocab_size)));
  emit(j);
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  DataArgs data;
  std::vector<std::string> models;
  std::vector<std::string> reference;
  bool ensemble = false;
};

void cmd_eval(const EvalArgs& a) {
  std::vector<Network> nets;
  for (const auto& p : a.models) nets.push_back(load(p));
  const auto task = parse_task(a.data.task);
  if (!task) throw UsageError("unknown task '" + a.data.task + "'");
  for (const auto& n : nets) check_task_arch(*task, n.arch, a.data);
  const Dataset held = a.data.heldout_set(nets[0].vocab_size);

  json out = {{"task", a.data.task}, {"items", held.items.size()}};
  if (a.ensemble) {
    const auto ptrs = pointers(nets);
    const EvalMetrics m = evaluate(ptrs, held);
    info("ensemble of " + std::to_string(nets.size()) + ": accuracy " + fixed(m.accuracy) + ", mean NLL " + fixed(m.mean_nll));
    out["ensemble"] = metrics_json(m);
  } else {
    json per = json::array();
    for (std::size_t k = 0; k < nets.size(); ++k) {
      const EvalMetrics m = evaluate(nets[k], held);
      info(a.models[k] + ": accuracy " + fixed(m.accuracy) + ", mean NLL " + fixed(m.mean_nll));
      json e = metrics_json(m);
      e["model"] = a.models[k];
      per.push_back(e);
    }
    out["models"] = per;
  }
  if (!a.reference.empty()) {
    std::vector<Network> refs;
    for (const auto& p : a.reference) refs.push_back(load(p));
    const auto ptrs = pointers(refs);
    json agree = json::array();
    for (std::size_t k = 0; k < nets.size(); ++k) {
      const double r = agreement(ptrs, nets[k], held);
      info(a.models[k] + ": argmax agreement with reference " + fixed(r));
      agree.push_back({{"model", a.models[k]}, {"agreement", r}});
    }
    out["agreement"] = agree;
  }
  emit(out);
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  DataArgs data;
  std::string model;
  int reps = 5;
  int threads = 1;
};

void cmd_bench(const BenchArgs& a) {
  if (a.reps < 3) throw UsageError("--reps must be at least 3");
  if (a.threads < 1) throw UsageError("--threads must be at least 1");
  const Network net = load(a.model);
  const auto task = parse_task(a.data.task);
  if (!task) throw UsageError("unknown task '" + a.data.task + "'");
  check_task_arch(*task, net.arch, a.data);
  const Dataset held = a.data.heldout_set(net.vocab_size);
  std::vector<std::vector<int>> inputs;
  for (const auto& ex : held.items) inputs.push_back(ex.source);
  const BenchResult r = bench(net, inputs, {a.reps, a.threads});
  info(a.model + ": " + fixed(r.tokens_per_second, 1) + " tokens/s (median of " + std::to_string(r.repetitions) + ", " +
       std::to_string(r.threads) + " thread(s)), size factor " + fixed(r.size_factor, 3));
  json j = to_json(r);
  j["model"] = a.model;
  emit(j);
}

// ---------------------------------------------------------------------------
// inspect

void cmd_inspect(const std::string& path) {
  const Network net = load(path);
  json layers = json::array();
  std::ostringstream text;
  text << path << ": " << to_string(net.arch) << ", " << net.parameter_count() << " parameters, size factor "
       << fixed(member_size_factor(net), 3) << '\n';
  for (const auto& l : net.layers) {
    text << "  " << l.id << ' ' << (l.name.empty() ? std::string(to_string(l.kind)) : l.name) << " (" << to_string(l.kind)
         << ", " << to_string(l.activation) << ") size " << l.size;
    if (!net.member_sizes.empty()) text << ", member " << net.member_sizes[static_cast<std::size_t>(l.id)];
    text << '\n';
    layers.push_back({{"id", l.id}, {"name", l.name}, {"kind", to_string(l.kind)}, {"size", l.size}});
  }
  if (!g.quiet && !g.json) std::cout << text.str();
  emit({{"model", path},
        {"arch", to_string(net.arch)},
        {"parameters", net.parameter_count()},
        {"size_factor", member_size_factor(net)},
        {"layers", layers}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"foldnet: unfold network ensembles and shrink them back"};
  app.require_subcommand(1);
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_flag("--quiet", g.quiet, "suppress informational output");
  app.add_flag("--json", g.json, "machine-readable output on stdout");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train one member on a toy task");
  ta.data.add(train, true);
  train->add_option("--arch", ta.arch, "encdec, classifier or feedforward")->capture_default_str();
  train->add_option("--hidden", ta.hidden, "recurrent / hidden layer size")->capture_default_str();
  train->add_option("--embed", ta.embed, "embedding size")->capture_default_str();
  train->add_option("--attention", ta.attention, "attention layer size")->capture_default_str();
  train->add_option("--iters", ta.iters, "training iterations")->capture_default_str();
  train->add_option("--batch", ta.batch, "batch size")->capture_default_str();
  train->add_option("--lr", ta.lr, "AdaGrad learning rate")->capture_default_str();
  train->add_option("--config", ta.config, "TrainConfig JSON (overrides the flags above)");
  train->add_option("--loss-csv", ta.loss_csv, "loss curve path (default: next to the model)");
  train->add_option("-o,--out", ta.out, "output model")->required();

  std::vector<std::string> unfold_models;
  std::string unfold_out;
  auto* unf = app.add_subcommand("unfold", "merge identically shaped models into one");
  unf->add_option("models", unfold_models, "member model files")->required();
  unf->add_option("-o,--out", unfold_out, "output model")->required();

  ShrinkArgs sa;
  auto* shr = app.add_subcommand("shrink", "shrink inner layers");
  shr->add_option("model", sa.model, "model file")->required();
  shr->add_option("-o,--out", sa.out, "output model")->required();
  shr->add_option("--pipeline", sa.pipeline, "'default' or a pipeline JSON file");
  shr->add_option("--targets", sa.targets, "'member' or layer=size,...")->capture_default_str();
  shr->add_option("--method", sa.method, "single method: svd, datafree, srinivas_babu, databound");
  shr->add_option("--layer", sa.layer, "layer name or id for --method");
  shr->add_option("--target", sa.target, "target size for --method");
  shr->add_option("--config", sa.config, "TrainConfig JSON for data-bound fine-tuning");
  shr->add_option("--schedule", sa.schedule, "PruneSchedule JSON");
  shr->add_option("--compensation", sa.compensation, "both, linear_combination, sgd or none")->capture_default_str();
  shr->add_option("--lr", sa.lr, "fine-tuning learning rate")->capture_default_str();
  shr->add_option("--batch", sa.batch, "fine-tuning batch size")->capture_default_str();
  sa.data.add(shr, false);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "accuracy, NLL and agreement on held-out data");
  ev->add_option("models", ea.models, "model files")->required();
  ev->add_flag("--ensemble", ea.ensemble, "evaluate the models as a probability-averaging ensemble");
  ev->add_option("--reference", ea.reference, "reference model(s) for argmax agreement");
  ea.data.add(ev, true);

  BenchArgs ba;
  auto* bn = app.add_subcommand("bench", "decoding throughput");
  bn->add_option("model", ba.model, "model file")->required();
  bn->add_option("--reps", ba.reps, "timed repetitions (at least 3)")->capture_default_str();
  bn->add_option("--threads", ba.threads, "worker threads")->capture_default_str();
  ba.data.add(bn, true);

  std::string inspect_model;
  auto* ins = app.add_subcommand("inspect", "layer sizes and size factor");
  ins->add_option("model", inspect_model, "model file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) cmd_train(ta);
    if (*unf) cmd_unfold(unfold_models, unfold_out);
    if (*shr) cmd_shrink(sa);
    if (*ev) cmd_eval(ea);
    if (*bn) cmd_bench(ba);
    if (*ins) cmd_inspect(inspect_model);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const PipelineError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
