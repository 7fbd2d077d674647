#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aml/relnet.hpp"
#include "fd_oracle.hpp"

using aml::Matrix;
using aml::RelationNet;
using aml::dg::Graph;
using aml::dg::Var;

namespace {

// g(x, y) = 3x + 4y, no hidden layer.
RelationNet linear_relation(double a, double b, double c = 0.0) {
  RelationNet g;
  g.net = aml::Mlp::zeros({2, 1});
  g.net.weights[0] = Matrix::from_rows({{a}, {b}});
  g.net.biases[0] = Matrix::scalar(c);
  g.normalization = aml::InputNormalization::identity(2);
  return g;
}

double base_loss_value(const RelationNet& rel, const Matrix& tau) {
  Graph g;
  Var t = g.input({aml::dg::kDynamic, rel.input_dim()}, "tau");
  auto nodes = aml::declare(g, rel, "g");
  aml::bind(g, nodes, rel);
  g.bind(t, tau);
  return g.evaluate(aml::base_loss(nodes, t));
}

}  // namespace

TEST(RelationNet, LinearRelationValue) {
  const double tau[] = {1.0, 1.0};
  EXPECT_DOUBLE_EQ(linear_relation(3, 4).value(tau), 7.0);
}

TEST(RelationNet, BaseLossOfLinearRelation) {
  // d_g = 7 / 5, -log ||grad|| = -log 5
  const double expected = 1.4 - std::log(5.0);
  EXPECT_NEAR(base_loss_value(linear_relation(3, 4), Matrix::from_rows({{1.0, 1.0}})), expected, 1e-9);
  EXPECT_NEAR(expected, -0.2094, 1e-4);
}

TEST(RelationNet, DistanceIsInvariantToOutputScale) {
  std::mt19937_64 rng(5);
  RelationNet g = RelationNet::make(3, 8, rng);
  // steeper than init so sqrt(|v|^2 + 1e-12) is |v| to well below 1e-10
  for (Matrix& w : g.net.weights)
    for (double& v : w.flat()) v *= 2.0;
  RelationNet h = g;
  for (double& v : h.net.weights.back().flat()) v *= 10.0;
  for (double& v : h.net.biases.back().flat()) v *= 10.0;
  Matrix tau = Matrix::from_rows({{0.3, -0.2, 0.9}, {1.1, 0.4, -0.7}});

  auto distances = [&](const RelationNet& rel) {
    Graph gr;
    Var t = gr.input({aml::dg::kDynamic, 3}, "tau");
    auto nodes = aml::declare(gr, rel, "g");
    aml::bind(gr, nodes, rel);
    gr.bind(t, tau);
    Var d = aml::vanishing_terms(nodes, t).distance;
    const Var roots[] = {d};
    gr.evaluate(roots);
    return gr.value(d);
  };
  const Matrix dg = distances(g), dh = distances(h);
  for (std::size_t r = 0; r < tau.rows(); ++r) EXPECT_NEAR(dh[r] / dg[r], 1.0, 1e-10);
  // the log term shifts by exactly log 10
  EXPECT_NEAR(base_loss_value(g, tau) - base_loss_value(h, tau), std::log(10.0), 1e-8);
}

TEST(RelationNet, NormalizationIsAppliedBeforeFirstLayer) {
  RelationNet g = linear_relation(1, 1);
  g.normalization.shift = {1.0, 2.0};
  g.normalization.scale = {2.0, 4.0};
  const double tau[] = {3.0, 6.0};
  EXPECT_DOUBLE_EQ(g.value(tau), 2.0);
}

TEST(RelationNet, GraphForwardMatchesPlainEvaluate) {
  std::mt19937_64 rng(9);
  Matrix data(50, 4);
  std::normal_distribution<double> nd(2.0, 3.0);
  for (double& v : data.flat()) v = nd(rng);
  RelationNet rel = RelationNet::make(4, 8, rng, aml::InputNormalization::fit(data));
  Graph g;
  Var t = g.input({aml::dg::kDynamic, 4}, "tau");
  auto nodes = aml::declare(g, rel, "g");
  aml::bind(g, nodes, rel);
  g.bind(t, data);
  Var out = nodes.forward(t);
  const Var roots[] = {out};
  g.evaluate(roots);
  const Matrix plain = rel.evaluate(data);
  for (std::size_t r = 0; r < data.rows(); ++r) EXPECT_NEAR(g.value(out)[r], plain[r], 1e-12);
}

TEST(RelationNet, InputGradientsMatchForwardModeOracle) {
  std::mt19937_64 rng(21);
  RelationNet rel = RelationNet::make(3, 6, rng);
  Matrix pts = Matrix::from_rows({{0.1, 0.2, 0.3}, {-1.0, 0.5, 2.0}});
  const RelationNet rels[] = {rel};
  auto grads = aml::relation_gradients(rels, pts);
  for (std::size_t r = 0; r < pts.rows(); ++r) {
    auto oracle = aml::testing::input_gradient_forward_mode(rel.net, pts.row(r));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(grads[0](r, c), oracle[c], 1e-12);
  }
}

TEST(RelationNet, DefaultWidthDoubles) {
  EXPECT_EQ(RelationNet::default_width(1), 4u);
  EXPECT_EQ(RelationNet::default_width(2), 8u);
  EXPECT_EQ(RelationNet::default_width(3), 16u);
  EXPECT_EQ(RelationNet::default_width(20), 256u);
  EXPECT_THROW(RelationNet::default_width(0), aml::ContractError);
}

TEST(RelationNet, DimensionMismatchIsContractError) {
  EXPECT_THROW(linear_relation(1, 1).evaluate(Matrix(2, 3)), aml::ContractError);
}

TEST(Transversality, Sin2IsSymmetricAndBounded) {
  const double a[] = {1.0, 2.0, -0.5}, b[] = {0.3, -1.0, 4.0};
  EXPECT_DOUBLE_EQ(aml::sin2_plain(a, b), aml::sin2_plain(b, a));
  const double e1[] = {1.0, 0.0}, e2[] = {0.0, 1.0}, e3[] = {2.0, 0.0};
  EXPECT_NEAR(aml::sin2_plain(e1, e2), 1.0, 1e-11);
  EXPECT_NEAR(aml::sin2_plain(e1, e3), 0.0, 1e-11);
}

TEST(Transversality, OrthogonalGradientsCostNothing) {
  Graph g;
  Var a = g.constant(Matrix::from_rows({{1.0, 0.0}, {0.0, 2.0}}));
  Var b = g.constant(Matrix::from_rows({{0.0, 3.0}, {-1.0, 0.0}}));
  const Var prev[] = {a};
  EXPECT_NEAR(g.evaluate(aml::transversality_term(b, prev)), 0.0, 1e-12);
  EXPECT_THROW(aml::transversality_term(b, {}), aml::ContractError);
}

TEST(Transversality, ParallelGradientsHitTheFloor) {
  Graph g;
  Var a = g.constant(Matrix::from_rows({{1.0, 1.0}}));
  Var b = g.constant(Matrix::from_rows({{2.0, 2.0}}));
  const Var prev[] = {a};
  EXPECT_NEAR(g.evaluate(aml::transversality_term(b, prev)), -std::log(1e-12), 1e-6);
}

TEST(Transversality, GraphSin2MatchesPlain) {
  Graph g;
  Matrix A = Matrix::from_rows({{1.0, 2.0, 0.5}}), B = Matrix::from_rows({{-0.2, 0.7, 1.5}});
  Var s = aml::sin2_between(g.constant(A), g.constant(B));
  EXPECT_NEAR(g.evaluate(g.sum(s)), aml::sin2_plain(A.row(0), B.row(0)), 1e-12);
}

TEST(AngleReport, TwoLinearRelations) {
  const RelationNet rels[] = {linear_relation(1, 0), linear_relation(1, 1)};
  auto rep = aml::angle_report(rels, Matrix::from_rows({{0.0, 0.0}, {5.0, -3.0}}));
  ASSERT_EQ(rep.pairs.size(), 1u);
  EXPECT_NEAR(rep.min_sin2, 0.5, 1e-12);
  EXPECT_NEAR(rep.mean_sin2, 0.5, 1e-12);
}

TEST(Syzygy, CombinationUsesStructuralMinusOne) {
  Matrix coeffs = Matrix::from_rows({{2.0}, {0.5}});
  Matrix y = Matrix::from_rows({{1.0, 2.0}, {4.0, 1.0}});
  Matrix s = aml::syzygy_combine(coeffs, y);
  EXPECT_DOUBLE_EQ(s[0], 0.0);
  EXPECT_DOUBLE_EQ(s[1], 1.0);
}

TEST(Syzygy, MismatchedCoefficientsAreContractError) {
  EXPECT_THROW(aml::syzygy_combine(Matrix(2, 2), Matrix(2, 2)), aml::ContractError);
  Graph g;
  Var c = g.input({aml::dg::kDynamic, 2}, "c");
  Var yp = g.input({aml::dg::kDynamic, 1}, "yp");
  Var yl = g.input({aml::dg::kDynamic, 1}, "yl");
  EXPECT_THROW(aml::syzygy_value(c, yp, yl), aml::ContractError);
}

TEST(Syzygy, NetworkHasOneFewerOutputThanRelations) {
  std::mt19937_64 rng(3);
  auto f = aml::SyzygyNet::make(4, 3, rng);
  EXPECT_EQ(f.trunk.output_dim(), 2u);
  EXPECT_EQ(f.num_relations(), 3u);
  EXPECT_THROW(aml::SyzygyNet::make(4, 1, rng), aml::ContractError);
}

TEST(Syzygy, LossIsMeanAbsolute) {
  Graph g;
  Var s = g.constant(Matrix::from_rows({{1.0}, {-3.0}}));
  EXPECT_DOUBLE_EQ(g.evaluate(aml::syzygy_loss(s)), 2.0);
}

TEST(Syzygy, AdjustedLossAddsNegativePush) {
  const RelationNet gk = linear_relation(3, 4);
  Graph g;
  Var on = g.input({aml::dg::kDynamic, 2}, "on");
  Var off = g.input({aml::dg::kDynamic, 2}, "off");
  Var comb = g.input({aml::dg::kDynamic, 1}, "comb");
  auto nodes = aml::declare(g, gk, "g");
  aml::bind(g, nodes, gk);
  g.bind(on, Matrix::from_rows({{1.0, 1.0}}));
  g.bind(off, Matrix::from_rows({{1.0, 0.0}}));
  g.bind(comb, Matrix::scalar(1.0));
  // |1 - 3| = 2 pushed with a minus sign
  EXPECT_NEAR(g.evaluate(aml::syzygy_adjusted_loss(nodes, on, off, comb)), 1.4 - std::log(5.0) - 2.0, 1e-9);
}
