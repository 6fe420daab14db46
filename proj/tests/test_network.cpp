#include "foldnet/eval.hpp"
#include "foldnet/forward.hpp"
#include "foldnet/model_io.hpp"
#include "foldnet/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace foldnet;

namespace {

Vector row(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double d : v) x(k++) = d;
  return x;
}

GruCell constant_cell(int n, int m, double w, double b) {
  GruCell c;
  c.input_state = c.input_update = c.input_reset = Matrix::Constant(n, m, w);
  c.rec_state = c.rec_update = c.rec_reset = Matrix::Constant(m, m, w);
  c.bias_state = c.bias_update = c.bias_reset = Vector::Constant(m, b);
  return c;
}

// Scalar GRU written out by hand: the oracle for gru_step.
double scalar_gru(double x, double h, double w, double u, double b) {
  const double z = 1.0 / (1.0 + std::exp(-(x * w + h * u + b)));
  const double r = 1.0 / (1.0 + std::exp(-(x * w + h * u + b)));
  const double cand = std::tanh(x * w + r * h * u + b);
  return (1 - z) * h + z * cand;
}

}  // namespace

TEST(GruStep, ZeroWeightsHalveState) {
  const Vector h = gru_step(constant_cell(3, 2, 0.0, 0.0), row({0.4, -0.2}), row({1, 2, 3}));
  EXPECT_NEAR(h(0), 0.2, 1e-15);
  EXPECT_NEAR(h(1), -0.1, 1e-15);
}

TEST(GruStep, ZeroIsFixedPoint) {
  const Vector h = gru_step(constant_cell(2, 2, 0.0, 0.0), Vector::Zero(2), row({0.5, -1}));
  EXPECT_EQ(h.norm(), 0.0);
}

TEST(GruStep, ScalarUnitWeights) {
  const Vector h = gru_step(constant_cell(1, 1, 1.0, 0.0), Vector::Zero(1), row({1}));
  EXPECT_NEAR(h(0), scalar_gru(1, 0, 1, 1, 0), 1e-15);
  EXPECT_NEAR(h(0), std::tanh(1.0) / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(h(0), 0.55677, 1e-5);
}

TEST(GruStep, MatchesScalarOracleOnRandomValues) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int t = 0; t < 100; ++t) {
    const double x = u(rng), h = u(rng), w = u(rng), v = u(rng), b = u(rng);
    GruCell c = constant_cell(1, 1, w, b);
    c.rec_state = c.rec_update = c.rec_reset = Matrix::Constant(1, 1, v);
    EXPECT_NEAR(gru_step(c, row({h}), row({x}))(0), scalar_gru(x, h, w, v, b), 1e-14);
  }
}

TEST(GruStep, SaturatedUpdateGate) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  GruCell c = constant_cell(2, 3, 0.3, 0.1);
  const Vector h = row({0.3, -0.7, 0.2});
  const Vector x = row({1.0, -0.5});
  c.bias_update = Vector::Constant(3, -1e3);
  EXPECT_LE((gru_step(c, h, x) - h).cwiseAbs().maxCoeff(), 1e-9);
  c.bias_update = Vector::Constant(3, 1e3);
  const Vector r = (x * c.input_reset + h * c.rec_reset + c.bias_reset).unaryExpr([](double v) { return sigmoid(v); });
  const Vector cand = (x * c.input_state + r.cwiseProduct(h) * c.rec_state + c.bias_state).array().tanh().matrix();
  EXPECT_LE((gru_step(c, h, x) - cand).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(GruStep, ShapeMismatchThrows) {
  EXPECT_THROW(gru_step(constant_cell(2, 2, 0, 0), Vector::Zero(3), Vector::Zero(2)), NetworkError);
}

TEST(Attention, ZeroWeightsGiveUniform) {
  AttentionParams p{Matrix::Zero(2, 3), Matrix::Zero(4, 3), Vector::Zero(3), Matrix::Zero(3, 1)};
  const Vector a = attention_weights(p, row({1, 2}), Matrix::Ones(4, 4));
  for (int t = 0; t < 4; ++t) EXPECT_NEAR(a(t), 0.25, 1e-15);
}

TEST(Attention, SinglePosition) {
  std::mt19937_64 rng(1);
  AttentionParams p{Matrix::Random(2, 3), Matrix::Random(4, 3), Vector::Random(3), Matrix::Random(3, 1)};
  const Vector a = attention_weights(p, row({1, 2}), Matrix::Ones(1, 4));
  EXPECT_EQ(a.size(), 1);
  EXPECT_NEAR(a(0), 1.0, 1e-15);
}

TEST(Attention, SoftmaxOfEnergies) {
  // one attention unit whose tanh activity is atanh-inverted to give e = (0, ln 3)
  AttentionParams p{Matrix::Zero(1, 1), Matrix::Ones(1, 1), Vector::Zero(1), Matrix::Ones(1, 1)};
  Matrix ann(2, 1);
  ann << 0.0, std::atanh(std::log(3.0) / 2.0);
  p.energy(0, 0) = 2.0;
  const Vector a = attention_weights(p, Vector::Zero(1), ann);
  EXPECT_NEAR(a(0), 0.25, 1e-12);
  EXPECT_NEAR(a(1), 0.75, 1e-12);
}

TEST(Attention, EmptySourceThrows) {
  AttentionParams p{Matrix::Zero(2, 3), Matrix::Zero(4, 3), Vector::Zero(3), Matrix::Zero(3, 1)};
  EXPECT_THROW(attention_weights(p, row({1, 2}), Matrix(0, 4)), NetworkError);
}

TEST(Forward, LinearNetReproducesAffineMap) {
  FeedforwardShape s;
  s.inputs = 2;
  s.hidden = {2};
  s.hidden_activation = Activation::Linear;
  s.outputs = 2;
  s.output_activation = Activation::Linear;
  Network net = make_feedforward(s);
  net.connections[0].weights << 1, 2, 3, 4;  // 1->2
  net.connections[1].weights << 0.5, -0.5;   // bias -> 2
  net.connections[2].weights << 1, 0, 0, 1;  // 2->3
  net.connections[3].weights << 0.25, 0;     // bias -> 3
  const StepOutput o = forward(net, row({1, 0}));
  EXPECT_NEAR(o.logits(0), 1.75, 1e-15);
  EXPECT_NEAR(o.logits(1), 1.5, 1e-15);
}

TEST(Forward, ScalarTanhNeuron) {
  FeedforwardShape s;
  s.inputs = 1;
  s.hidden = {1};
  s.outputs = 1;
  s.output_activation = Activation::Linear;
  s.bias = false;
  Network net = make_feedforward(s);
  for (auto& c : net.connections) c.weights.setOnes();
  EXPECT_NEAR(forward(net, row({1})).logits(0), std::tanh(1.0), 1e-15);
  EXPECT_NEAR(forward(net, row({1})).logits(0), 0.761594, 1e-6);
}

TEST(Forward, SoftmaxOutputsAreDistributions) {
  Network net = make_encdec({10, 8, 12, 6}, {3, 1.0});
  const std::vector<int> src{2, 5, 7};
  const std::vector<int> tgt{7, 5, 2, kEos};
  for (const auto& step : forward(net, src, tgt)) {
    EXPECT_NEAR(step.probs.sum(), 1.0, 1e-12);
    EXPECT_GT(step.probs.minCoeff(), 0.0);
    EXPECT_LT(step.probs.maxCoeff(), 1.0);
  }
}

TEST(Forward, LinearNetIsScaleConsistent) {
  FeedforwardShape s;
  s.inputs = 3;
  s.hidden = {4, 2};
  s.hidden_activation = Activation::Linear;
  s.outputs = 2;
  s.output_activation = Activation::Linear;
  s.bias = false;
  const Network net = make_feedforward(s, {5, 1.0});
  const Vector x = row({0.3, -1.2, 0.8});
  const Vector base = forward(net, x).logits;
  for (double a : {0.0, 1.0, 2.5}) EXPECT_LE((forward(net, x * a).logits - base * a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, TokenOutOfVocabularyThrows) {
  const Network net = make_encdec({6, 4, 5, 5});
  const std::vector<int> bad{2, 6};
  EXPECT_THROW(greedy_decode(net, bad, 5), NetworkError);
}

TEST(GreedyDecode, EosPreferringNetEmitsNothing) {
  Network net = make_encdec({6, 4, 5, 5});
  const int out_bias = net.find_connection(0, 7, Tag::Plain);
  net.connections[static_cast<std::size_t>(out_bias)].weights(0, kEos) = 100.0;
  const DecodeResult r = greedy_decode(net, std::vector<int>{2, 3}, 10);
  EXPECT_TRUE(r.tokens.empty());
  EXPECT_EQ(r.distributions.size(), 1u);
}

TEST(GreedyDecode, ZeroMaxLenIsEmpty) {
  const Network net = make_encdec({6, 4, 5, 5});
  const DecodeResult r = greedy_decode(net, std::vector<int>{2, 3}, 0);
  EXPECT_TRUE(r.tokens.empty());
  EXPECT_TRUE(r.distributions.empty());
}

TEST(GreedyDecode, Deterministic) {
  const Network net = make_encdec({8, 4, 6, 5}, {9, 1.0});
  const std::vector<int> src{2, 7, 4, 3};
  const DecodeResult a = greedy_decode(net, src, 12);
  const DecodeResult b = greedy_decode(net, src, 12);
  EXPECT_EQ(a.tokens, b.tokens);
  ASSERT_EQ(a.distributions.size(), b.distributions.size());
  for (std::size_t i = 0; i < a.distributions.size(); ++i) EXPECT_EQ(a.distributions[i], b.distributions[i]);
}

TEST(GreedyDecode, TrainedReversalModel) {
  TaskOptions opt;
  opt.count = 2000;
  const Dataset data = make_task(opt);
  Network net = make_encdec({10, 16, 32, 32}, {1, 1.0});
  TrainConfig cfg;
  cfg.learning_rate = 0.02;
  cfg.iterations = 3000;
  cfg.seed = 1;
  train_adagrad(net, data, cfg);
  EXPECT_EQ(greedy_decode(net, std::vector<int>{3, 5, 7}, 8).tokens, (std::vector<int>{7, 5, 3}));
  EXPECT_GE(evaluate(net, make_heldout(opt, 200)).accuracy, 0.9);
}

TEST(EnsembleDecode, SingleModelEqualsGreedy) {
  const Network net = make_encdec({8, 4, 6, 5}, {4, 1.0});
  const std::vector<int> src{5, 2, 6};
  const Network* one[] = {&net};
  const DecodeResult e = ensemble_decode(std::span<const Network* const>(one), src, 10);
  const DecodeResult g = greedy_decode(net, src, 10);
  EXPECT_EQ(e.tokens, g.tokens);
  for (std::size_t i = 0; i < g.distributions.size(); ++i) EXPECT_EQ(e.distributions[i], g.distributions[i]);
}

TEST(EnsembleDecode, IdenticalCopiesEqualGreedy) {
  const Network net = make_encdec({8, 4, 6, 5}, {4, 1.0});
  const std::vector<int> src{5, 2, 6, 3};
  const DecodeResult e = ensemble_decode(std::vector<Network>{net, net, net}, src, 10);
  const DecodeResult g = greedy_decode(net, src, 10);
  EXPECT_EQ(e.tokens, g.tokens);
  for (std::size_t i = 0; i < g.distributions.size(); ++i) EXPECT_LE((e.distributions[i] - g.distributions[i]).norm(), 1e-15);
}

TEST(EnsembleDecode, TopologyMismatchThrows) {
  const std::vector<Network> nets{make_encdec({8, 4, 6, 5}), make_encdec({8, 4, 7, 5})};
  EXPECT_THROW(ensemble_decode(nets, std::vector<int>{2, 3}, 5), NetworkError);
}

TEST(Averaging, ProbabilitiesVersusLogits) {
  const Vector p1 = softmax(row({0.6, 0.4}).array().log().matrix());
  const Vector p2 = softmax(row({0.2, 0.8}).array().log().matrix());
  const Vector avg = (p1 + p2) / 2;
  EXPECT_NEAR(avg(0), 0.4, 1e-12);
  EXPECT_EQ(argmax(avg), 1);

  const Vector l1 = row({2, 0}), l2 = row({0, 1});
  const Vector prob_avg = (softmax(l1) + softmax(l2)) / 2;
  const Vector logit_avg = softmax((l1 + l2) / 2);
  // hand values: (0.8808 + 0.2689) / 2 and 1 / (1 + e^{-0.5})
  EXPECT_NEAR(prob_avg(0), 0.5 * (1 / (1 + std::exp(-2.0)) + 1 / (1 + std::exp(1.0))), 1e-15);
  EXPECT_NEAR(prob_avg(0), 0.575, 0.001);
  EXPECT_NEAR(logit_avg(0), 1 / (1 + std::exp(-0.5)), 1e-15);
  EXPECT_NEAR(logit_avg(0), 0.622, 0.001);
  EXPECT_EQ(argmax(prob_avg), 0);
  EXPECT_EQ(argmax(logit_avg), 0);
  EXPECT_GT(std::abs(prob_avg(0) - logit_avg(0)), 1e-3);
}

TEST(ModelIo, RoundTripIsBitExact) {
  for (const Network& net : {make_encdec({10, 8, 12, 6}, {7, 1.0}), make_seq_classifier({2, 3, 5, 2}, {8, 1.0}),
                             make_feedforward({}, {9, 1.0})}) {
    const Network back = parse_model(serialize(net));
    EXPECT_TRUE(back == net);
  }
}

TEST(ModelIo, SaveAndLoadFile) {
  const Network net = make_encdec({6, 4, 5, 5}, {2, 1.0});
  const std::string path = ::testing::TempDir() + "foldnet_roundtrip.json";
  save_model(net, path);
  EXPECT_TRUE(load_model(path) == net);
  EXPECT_THROW(load_model(path + ".missing"), std::exception);
}

TEST(ModelIo, ShapeMismatchNamesConnection) {
  FeedforwardShape s;
  s.inputs = 4;
  s.hidden = {3};
  nlohmann::json j = to_json(make_feedforward(s));
  for (auto& c : j["connections"]) {
    if (c["from"] == 1 && c["to"] == 2) {
      for (auto& r : c["weights"]) r.erase(r.size() - 1);
    }
  }
  try {
    from_json(j);
    FAIL() << "expected ModelFormatError";
  } catch (const ModelFormatError& e) {
    EXPECT_NE(std::string(e.what()).find("connection 1→2: expected 4×3, found 4×2"), std::string::npos) << e.what();
  }
}

TEST(ModelIo, MissingBiasLayerRejected) {
  nlohmann::json j = to_json(make_feedforward({}));
  j["layers"][0]["kind"] = "Dense";
  EXPECT_THROW(from_json(j), ModelFormatError);
}

TEST(ModelIo, MissingFieldIsNamed) {
  nlohmann::json j = to_json(make_feedforward({}));
  j["connections"][0].erase("weights");
  try {
    from_json(j);
    FAIL() << "expected ModelFormatError";
  } catch (const ModelFormatError& e) {
    EXPECT_NE(std::string(e.what()).find("weights"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_model("{not json"), ModelFormatError);
}

TEST(Validate, RejectsSelfConnectionOnDense) {
  Network net = make_feedforward({});
  net.connections.push_back({2, 2, Tag::Plain, Matrix::Zero(4, 4)});
  EXPECT_THROW(validate(net), NetworkError);
}

TEST(Tasks, ReverseCopyParity) {
  TaskOptions opt;
  opt.seed = 1;
  const Dataset rev = make_task(opt);
  for (const auto& ex : rev.items) {
    std::vector<int> expect(ex.source.rbegin(), ex.source.rend());
    expect.push_back(kEos);
    EXPECT_EQ(ex.target, expect);
    for (int t : ex.source) {
      EXPECT_GE(t, 2);
      EXPECT_LT(t, 10);
    }
  }
  EXPECT_TRUE(make_task(opt) == rev);
  opt.task = Task::Copy;
  for (const auto& ex : make_task(opt).items) EXPECT_EQ(std::vector<int>(ex.target.begin(), ex.target.end() - 1), ex.source);
  opt.task = Task::Parity;
  for (const auto& ex : make_task(opt).items) {
    int p = 0;
    for (int b : ex.source) p ^= b;
    EXPECT_EQ(ex.target, std::vector<int>{p});
  }
  opt.min_length = 5;
  opt.max_length = 4;
  EXPECT_THROW(make_task(opt), std::invalid_argument);
}
