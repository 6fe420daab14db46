#include "foldnet/gradients.hpp"
#include "foldnet/tasks.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace foldnet;

namespace {

void randomize(Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  for (auto& c : net.connections) {
    for (Eigen::Index k = 0; k < c.weights.size(); ++k) c.weights.data()[k] = u(rng);
  }
}

// Largest relative error between analytic and central-difference gradients.
double max_relative_error(Network net, const Example& ex) {
  Gradients g = zero_gradients(net);
  example_gradient(net, ex, g, 1.0);
  constexpr double h = 1e-5;
  double worst = 0.0;
  for (std::size_t ci = 0; ci < net.connections.size(); ++ci) {
    Matrix& w = net.connections[ci].weights;
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      const double keep = w.data()[k];
      w.data()[k] = keep + h;
      const double up = example_loss(net, ex);
      w.data()[k] = keep - h;
      const double down = example_loss(net, ex);
      w.data()[k] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g[ci].data()[k];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      const double rel = std::abs(numeric - analytic) / denom;
      if (rel > worst) worst = rel;
      EXPECT_LE(rel, 1e-4) << "connection " << net.connections[ci].from << "->" << net.connections[ci].to << " tag "
                           << to_string(net.connections[ci].tag) << " entry " << k << ": analytic " << analytic
                           << " numeric " << numeric;
    }
  }
  return worst;
}

}  // namespace

TEST(GradientCheck, FeedforwardTanhSigmoid) {
  FeedforwardShape s;
  s.inputs = 3;
  s.hidden = {5, 4};
  s.outputs = 3;
  Network net = make_feedforward(s);
  net.layers[3].activation = Activation::Sigmoid;
  randomize(net, 3);
  EXPECT_LE(max_relative_error(net, {{1, 0, 1}, {2}}), 1e-4);
}

TEST(GradientCheck, GruClassifier) {
  Network net = make_seq_classifier({2, 3, 5, 2});
  randomize(net, 4);
  EXPECT_LE(max_relative_error(net, {{1, 0, 1, 1}, {1}}), 1e-4);
}

TEST(GradientCheck, AttentionEncoderDecoder) {
  Network net = make_encdec({6, 4, 5, 5});
  randomize(net, 5);
  EXPECT_LE(max_relative_error(net, {{2, 5, 3}, {3, 5, 2, kEos}}), 1e-4);
}
