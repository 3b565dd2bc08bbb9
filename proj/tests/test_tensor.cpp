#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "realign/graph.hpp"
#include "realign/tensor.hpp"

using namespace realign;
using M = RowMatrix<float>;

namespace {

M mat(Index r, Index c, std::initializer_list<float> v) {
  M m(r, c);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

}  // namespace

TEST_CASE("tensor shapes and storage") {
  Tensorf s = Tensorf::scalar(2.5f);
  CHECK(s.rank() == 0);
  CHECK(s.numel() == 1);
  CHECK(s[0] == 2.5f);

  std::vector<float> v = {1, 2, 3};
  Tensorf t = Tensorf::vector(v);
  CHECK(t.shape() == Shape{3});
  CHECK(t.matrix().rows() == 1);

  Tensorf m(Shape{2, 3});
  CHECK(m.numel() == 6);
  CHECK(shape_numel(m.shape()) == m.numel());

  CHECK_THROWS_AS(Tensorf(Shape{2, 2}, std::span<const float>(v)), DimensionError);
  CHECK_THROWS_AS(Tensorf(Shape{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(m.set_grad(M::Zero(3, 2)), DimensionError);
  m.set_grad(M::Ones(2, 3));
  CHECK(m.grad().has_value());
  m.clear_grad();
  CHECK_FALSE(m.grad().has_value());
}

TEST_CASE("matmul of 1x1") {
  Graph<float> g;
  auto c = matmul(g.constant(mat(1, 1, {2})), g.constant(mat(1, 1, {3})));
  CHECK(c.value()(0, 0) == 6.0f);
  CHECK(g.evaluate(c).shape() == Shape{1, 1});
}

TEST_CASE("matmul shape mismatch") {
  Graph<float> g;
  CHECK_THROWS_AS(matmul(g.constant(M::Ones(2, 3)), g.constant(M::Ones(2, 3))), DimensionError);
  CHECK_THROWS_AS(add(g.constant(M::Ones(2, 3)), g.constant(M::Ones(3, 2))), DimensionError);
  CHECK_THROWS_AS(mul(g.constant(M::Ones(2, 3)), g.constant(M::Ones(2, 2))), DimensionError);
}

TEST_CASE("softmax of equal logits is uniform") {
  Graph<float> g;
  auto s = softmax(g.constant(mat(1, 2, {0, 0})));
  CHECK(s.value()(0, 0) == 0.5f);
  CHECK(s.value()(0, 1) == 0.5f);
}

TEST_CASE("causal softmax masks the future exactly") {
  Graph<float> g;
  auto s = softmax(g.constant(M::Ones(3, 3)), true);
  CHECK(s.value()(0, 0) == 1.0f);
  CHECK(s.value()(0, 1) == 0.0f);
  CHECK(s.value()(1, 2) == 0.0f);
  CHECK(s.value()(2, 0) == doctest::Approx(1.0 / 3));
}

TEST_CASE("layer norm of a constant row returns the bias") {
  Graph<float> g;
  auto y = layer_norm(g.constant(M::Constant(1, 4, 3.0f)), g.constant(mat(1, 4, {2, 2, 2, 2})),
                      g.constant(mat(1, 4, {0.1f, -0.2f, 0.3f, 0})));
  CHECK(y.value()(0, 0) == doctest::Approx(0.1f));
  CHECK(y.value()(0, 1) == doctest::Approx(-0.2f));
  CHECK(y.value()(0, 3) == 0.0f);
}

TEST_CASE("backward of a product") {
  Graph<float> g;
  auto w = g.leaf(mat(1, 1, {2}), true);
  auto x = g.leaf(mat(1, 1, {3}), true);
  auto loss = sum(mul(w, x));
  g.backward(loss);
  CHECK(g.grad(w)(0, 0) == 3.0f);
  CHECK(g.grad(x)(0, 0) == 2.0f);
}

TEST_CASE("backward needs a scalar loss") {
  Graph<float> g;
  auto w = g.leaf(M::Ones(2, 2), true);
  CHECK_THROWS_AS(g.backward(tanh(w)), ContractError);
}

TEST_CASE("unreachable leaves get zero gradient") {
  Graph<float> g;
  auto a = g.leaf(M::Ones(1, 3), true);
  auto b = g.leaf(M::Ones(2, 2), true);
  g.backward(sum(a));
  CHECK(g.grad(b).isZero());
  CHECK_THROWS_AS(g.grad(g.constant(M::Ones(1, 1))), ContractError);
}

TEST_CASE("negative cosine has zero gradient at identical inputs") {
  Graph<float> g;
  auto a = g.leaf(mat(1, 3, {1, 2, 3}), true);
  auto b = g.constant(mat(1, 3, {1, 2, 3}));
  auto loss = -cosine_similarity(a, b);
  CHECK(loss.value()(0, 0) == doctest::Approx(-1.0f));
  g.backward(loss);
  CHECK(g.grad(a).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("cosine examples") {
  CHECK(cosine<float>(mat(1, 3, {1, 2, 3}), mat(1, 3, {1, 2, 3})) == doctest::Approx(1.0f));
  CHECK(cosine<float>(mat(1, 2, {1, 0}), mat(1, 2, {0, 1})) == 0.0f);
  const double oracle = 32.0 / (std::sqrt(14.0) * std::sqrt(77.0));
  CHECK(std::abs(cosine<float>(mat(1, 3, {1, 2, 3}), mat(1, 3, {4, 5, 6})) - oracle) < 1e-6);
  CHECK(oracle == doctest::Approx(0.97463).epsilon(1e-5));
  CHECK_THROWS_AS(cosine<float>(M::Zero(1, 3), mat(1, 3, {1, 2, 3})), DegenerateDirectionError);
}

TEST_CASE("cosine of scalar multiples") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    M a(1, 7);
    for (Index i = 0; i < a.size(); ++i) a(0, i) = static_cast<float>(rng.uniform(-1, 1));
    const float c = static_cast<float>(rng.uniform(0.1, 10));
    CHECK(std::abs(cosine<float>(a, (c * a).eval()) - 1.0f) <= 1e-6f);
    CHECK(std::abs(cosine<float>(a, (-c * a).eval()) + 1.0f) <= 1e-6f);
    const float v = cosine<float>(a, a);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("cross entropy masks negative targets") {
  Graph<float> g;
  M logits = mat(2, 3, {1, 2, 3, 0.5f, 0.1f, -1});
  std::vector<int> t1 = {2, -1}, t2 = {2, -7};
  auto l1 = cross_entropy(g.constant(logits), std::span<const int>(t1));
  auto l2 = cross_entropy(g.constant(logits), std::span<const int>(t2));
  CHECK(l1.value()(0, 0) == l2.value()(0, 0));
  const double oracle = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  CHECK(l1.value()(0, 0) == doctest::Approx(oracle).epsilon(1e-6));
  std::vector<int> none = {-1, -1};
  CHECK_THROWS_AS(cross_entropy(g.constant(logits), std::span<const int>(none)), ContractError);
}

TEST_CASE("non-finite values are rejected") {
  Graph<float> g;
  M bad = M::Ones(1, 2);
  bad(0, 1) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(g.leaf(bad, true), NumericError);
  auto big = g.constant(M::Constant(1, 1, 3e38f));
  CHECK_THROWS_AS(scale(big, 10.0f), NumericError);
}

TEST_CASE("embedding gathers rows") {
  Graph<float> g;
  auto table = g.leaf(mat(3, 2, {1, 2, 3, 4, 5, 6}), true);
  std::vector<int> ids = {2, 0, 2};
  auto e = embedding(table, std::span<const int>(ids));
  CHECK(e.value() == mat(3, 2, {5, 6, 1, 2, 5, 6}));
  g.backward(sum(e));
  CHECK(g.grad(table) == mat(3, 2, {1, 1, 0, 0, 2, 2}));
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(embedding(table, std::span<const int>(bad)), DimensionError);
}

TEST_CASE("random compositions match central differences") {
  std::set<OpKind> seen;
  for (std::uint64_t seed = 1000; seed < 1064; ++seed) {
    CAPTURE(seed);
    const auto r = testing::gradcheck(seed);
    CHECK(r.worst_error < 1e-3);
    seen.insert(r.ops.begin(), r.ops.end());
  }
  for (OpKind k : testing::all_primitive_ops()) CHECK(seen.count(k) == 1);
}

TEST_CASE("rebuilding a graph is bit-identical") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto a = testing::build_program<float>(seed);
    auto b = testing::build_program<float>(seed);
    a.graph->backward(a.loss);
    b.graph->backward(b.loss);
    CHECK(a.loss.value() == b.loss.value());
    for (std::size_t i = 0; i < a.leaves.size(); ++i) CHECK(a.graph->grad(a.leaves[i]) == b.graph->grad(b.leaves[i]));
  }
}
