#include <gtest/gtest.h>

#include <cmath>

#include "subtag/nn.hpp"
#include "support/oracles.hpp"

using namespace subtag;
using namespace subtag::nn;

namespace {

Mat<double> random_matrix(Eigen::Index rows, Eigen::Index cols, Rng &rng) {
  Mat<double> m(rows, cols);
  fill_uniform(m, 1.0, rng);
  return m;
}

struct BiLstmCheck {
  double worst_param = 0.0;
  double worst_input = 0.0;
};

// Objective: sum of R .* output, so d_out = R.
BiLstmCheck check_bilstm(std::size_t input, std::size_t hidden, std::size_t layers, Eigen::Index steps,
                         double dropout, uint64_t seed) {
  Rng rng(seed);
  ParamStore<double> store;
  const auto stack = BiLstmStack::create(store, "s", input, hidden, layers, dropout);
  stack.initialize(store, rng);
  Mat<double> x = random_matrix(static_cast<Eigen::Index>(input), steps, rng);
  const Mat<double> R = random_matrix(static_cast<Eigen::Index>(2 * hidden), steps, rng);

  auto objective = [&] {
    Rng pass_rng(seed + 1);
    PassContext ctx{dropout > 0.0, &pass_rng};
    BiLstmCache<double> cache;
    return bilstm_forward(store, stack, x, ctx, cache).cwiseProduct(R).sum();
  };

  Rng pass_rng(seed + 1);
  PassContext ctx{dropout > 0.0, &pass_rng};
  BiLstmCache<double> cache;
  bilstm_forward(store, stack, x, ctx, cache);
  auto grads = store.zeros_like();
  const Mat<double> dx = bilstm_backward(store, grads, stack, cache, R);

  std::vector<double *> coords;
  std::vector<double> analytic;
  for (std::size_t p = 0; p < store.size(); ++p)
    for (Eigen::Index k = 0; k < store.values[p].size(); ++k) {
      coords.push_back(store.values[p].data() + k);
      analytic.push_back(grads[p].data()[k]);
    }
  const std::size_t n_params = coords.size();
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    coords.push_back(x.data() + k);
    analytic.push_back(dx.data()[k]);
  }
  const auto numeric = oracle::central_differences(
      objective, [&](std::size_t k) -> double & { return *coords[k]; }, coords.size(), 1e-6);
  BiLstmCheck out;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const double e = oracle::relative_error(analytic[k], numeric[k], 1e-4);
    (k < n_params ? out.worst_param : out.worst_input) = std::max(k < n_params ? out.worst_param : out.worst_input, e);
  }
  return out;
}

}  // namespace

TEST(Lstm, GradientCheckSingleLayer) {
  const auto r = check_bilstm(3, 4, 1, 5, 0.0, 1);
  EXPECT_LT(r.worst_param, 1e-5);
  EXPECT_LT(r.worst_input, 1e-5);
}

TEST(Lstm, GradientCheckStackedWithDropout) {
  const auto r = check_bilstm(2, 3, 2, 4, 0.3, 2);
  EXPECT_LT(r.worst_param, 1e-5);
  EXPECT_LT(r.worst_input, 1e-5);
}

TEST(Lstm, SingleStepSequence) {
  const auto r = check_bilstm(2, 2, 1, 1, 0.0, 3);
  EXPECT_LT(r.worst_param, 1e-5);
}

TEST(Lstm, ForgetBiasInitializedToOne) {
  Rng rng(1);
  ParamStore<float> store;
  const auto l = LstmLayer::create(store, "l", 3, 2);
  l.initialize(store, rng);
  const auto &b = store.values[l.b];
  EXPECT_EQ(b(0, 0), 0.0f);
  EXPECT_EQ(b(2, 0), 1.0f);
  EXPECT_EQ(b(3, 0), 1.0f);
  EXPECT_EQ(b(4, 0), 0.0f);
}

TEST(Lstm, ReverseDirectionReadsRightToLeft) {
  Rng rng(7);
  ParamStore<double> store;
  const auto l = LstmLayer::create(store, "l", 2, 3);
  l.initialize(store, rng);
  Mat<double> x = random_matrix(2, 4, rng);
  LstmCache<double> fwd_cache, rev_cache;
  const Mat<double> rev = lstm_forward(store, l, x, true, rev_cache);
  const Mat<double> flipped = x.rowwise().reverse();
  const Mat<double> fwd = lstm_forward(store, l, flipped, false, fwd_cache);
  EXPECT_LT((rev - Mat<double>(fwd.rowwise().reverse())).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Dropout, MaskScaleAndInactiveWithoutTraining) {
  Rng rng(4);
  const auto m = dropout_mask<double>(100, 100, 0.25, rng);
  std::size_t zeros = 0;
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    if (m.data()[k] == 0.0)
      ++zeros;
    else
      EXPECT_DOUBLE_EQ(m.data()[k], 1.0 / 0.75);
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 10000.0, 0.25, 0.02);
  EXPECT_FALSE((PassContext{false, &rng}.dropout_active(0.5)));
  EXPECT_FALSE((PassContext{true, nullptr}.dropout_active(0.5)));
  EXPECT_FALSE((PassContext{true, &rng}.dropout_active(0.0)));
}

TEST(ClipGradients, ScalesToMaxNorm) {
  Gradients<double> g{Mat<double>::Constant(1, 1, 3.0), Mat<double>::Constant(1, 1, 4.0)};
  EXPECT_DOUBLE_EQ(clip_gradients(g, 1.0), 5.0);
  EXPECT_NEAR(std::sqrt(squared_norm(g)), 1.0, 1e-15);
  Gradients<double> small{Mat<double>::Constant(1, 1, 0.1)};
  clip_gradients(small, 1.0);
  EXPECT_DOUBLE_EQ(small[0](0, 0), 0.1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore<double> store;
  store.add("p", 2, 1);
  Adam<double> adam(store, {0.01});
  Gradients<double> g{Mat<double>(2, 1)};
  g[0] << 3.0, -0.5;
  adam.step(store, g);
  EXPECT_NEAR(store.values[0](0, 0), -0.01, 1e-9);
  EXPECT_NEAR(store.values[0](1, 0), 0.01, 1e-9);
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, MinimizesQuadratic) {
  ParamStore<double> store;
  store.add("p", 3, 1);
  store.values[0] << 2.0, -1.0, 0.5;
  Adam<double> adam(store, {0.05});
  for (int i = 0; i < 2000; ++i) {
    Gradients<double> g{2.0 * store.values[0]};
    adam.step(store, g);
  }
  EXPECT_LT(store.values[0].norm(), 1e-3);
}

TEST(ParamStore, CastPreservesNamesAndValues) {
  ParamStore<float> store;
  store.add("a", 2, 3);
  store.values[0].setConstant(0.25f);
  const auto d = store.cast<double>();
  EXPECT_EQ(d.names, store.names);
  EXPECT_EQ(d.values[0](1, 2), 0.25);
  EXPECT_EQ(store.scalar_count(), 6u);
}
