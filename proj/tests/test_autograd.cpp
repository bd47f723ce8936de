// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "icarus/autograd.hpp"

namespace icarus {
namespace {

using T64 = Tensor64;

T64 rnd(Shape s, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, scale);
  T64 t(s);
  for (double& v : t.data()) v = d(rng);
  return t;
}

// Reduces any [n, m] node to a scalar through a fixed random weighting so
// every output element reaches the loss with a distinct coefficient.
Var weighted_sum(Tape<double>& tape, Var out) {
  const auto& v = tape.value(out);
  const size_t n = v.rows(), m = v.cols();
  Var w = tape.constant(rnd({n, m}, 777));
  Var prod = tape.mul(out, w);
  Var col = tape.matmul(prod, tape.constant(T64({m, 1}, 1.0)));
  return tape.matmul(tape.constant(T64({1, n}, 1.0)), col);
}

// Builds the graph twice per coordinate and compares the tape gradient of
// input `which` with central differences.
void check_grad(size_t which, std::vector<T64> inputs,
                const std::function<Var(Tape<double>&, const std::vector<Var>&)>& build) {
  auto loss_at = [&](const std::vector<T64>& vals) {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& v : vals) vars.push_back(tape.leaf(v, true));
    Var out = weighted_sum(tape, build(tape, vars));
    return tape.value(out)[0];
  };
  Tape<double> tape;
  std::vector<Var> vars;
  for (size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.leaf(inputs[i], i == which));
  Var loss = weighted_sum(tape, build(tape, vars));
  tape.backward(loss);
  const T64* g = tape.grad(vars[which]);
  ASSERT_NE(g, nullptr);
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (i != which) {
      EXPECT_EQ(tape.grad(vars[i]), nullptr) << "frozen input " << i << " got a buffer";
    }
  }
  T64 fd = finite_difference_grad(
      [&](const T64& p) {
        auto vals = inputs;
        vals[which] = p.reshaped(inputs[which].shape());
        return loss_at(vals);
      },
      inputs[which], 1e-6);
  EXPECT_LT(relative_error(*g, fd.reshaped(g->shape()), 1e-8), 1e-6);
}

TEST(Tape, MatmulGradients) {
  auto build = [](Tape<double>& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); };
  check_grad(0, {rnd({3, 4}, 1), rnd({4, 2}, 2)}, build);
  check_grad(1, {rnd({3, 4}, 1), rnd({4, 2}, 2)}, build);
}

TEST(Tape, ElementwiseGradients) {
  check_grad(0, {rnd({2, 5}, 3), rnd({2, 5}, 4)},
             [](Tape<double>& t, const std::vector<Var>& v) { return t.mul(t.silu(v[0]), v[1]); });
  check_grad(1, {rnd({2, 5}, 3), rnd({2, 5}, 4)},
             [](Tape<double>& t, const std::vector<Var>& v) { return t.add(t.scale(v[0], 0.5), v[1]); });
}

TEST(Tape, RmsNormGradients) {
  auto build = [](Tape<double>& t, const std::vector<Var>& v) { return t.rms_norm(v[0], v[1], 1e-6); };
  check_grad(0, {rnd({3, 8}, 5), rnd({8}, 6)}, build);
  check_grad(1, {rnd({3, 8}, 5), rnd({8}, 6)}, build);
}

TEST(Tape, RopeGradient) {
  check_grad(0, {rnd({3, 8}, 7)},
             [](Tape<double>& t, const std::vector<Var>& v) { return t.rope(v[0], 4, 5, 100.0); });
}

TEST(Tape, CausalAttentionGradients) {
  // 4 query heads over 2 kv heads, head width 2, 3 positions.
  auto build = [](Tape<double>& t, const std::vector<Var>& v) { return t.causal_gqa(v[0], v[1], v[2], 4, 2, 2); };
  std::vector<T64> in{rnd({3, 8}, 8), rnd({3, 4}, 9), rnd({3, 4}, 10)};
  for (size_t i = 0; i < 3; ++i) check_grad(i, in, build);
}

TEST(Tape, CausalAttentionForwardIsCausal) {
  Tape<double> t;
  auto q = rnd({3, 4}, 11), k = rnd({3, 4}, 12), v = rnd({3, 4}, 13);
  Var out = t.causal_gqa(t.constant(q), t.constant(k), t.constant(v), 2, 2, 2);
  // Position 0 can only see itself.
  EXPECT_NEAR(t.value(out)(0, 0), v(0, 0), 1e-15);
  EXPECT_NEAR(t.value(out)(0, 3), v(0, 3), 1e-15);
}

TEST(Tape, EmbeddingAndCrossEntropy) {
  std::vector<int32_t> ids{2, 0, 2};
  std::vector<int32_t> targets{1, 3, 0};
  check_grad(0, {rnd({4, 6}, 14)}, [&](Tape<double>& t, const std::vector<Var>& v) {
    return t.embedding(v[0], ids);
  });
  // cross_entropy_mean is already a scalar; check it directly.
  auto logits = rnd({3, 4}, 15);
  Tape<double> tape;
  Var l = tape.leaf(logits, true);
  Var loss = tape.cross_entropy_mean(l, targets);
  tape.backward(loss);
  T64 fd = finite_difference_grad(
      [&](const T64& p) {
        Tape<double> t2;
        return t2.value(t2.cross_entropy_mean(t2.constant(p.reshaped({3, 4})), targets))[0];
      },
      logits, 1e-6);
  EXPECT_LT(relative_error(*tape.grad(l), fd.reshaped({3, 4}), 1e-8), 1e-6);
}

TEST(Tape, FrozenLeavesNeverGetBuffers) {
  Tape<double> t;
  Var frozen = t.leaf(rnd({2, 2}, 16), false, "w");
  Var train = t.leaf(rnd({2, 2}, 17), true, "a");
  Var out = t.matmul(frozen, train);
  Var loss = t.cross_entropy_mean(out, std::vector<int32_t>{0, 1});
  t.backward(loss);
  EXPECT_EQ(t.grad(frozen), nullptr);
  ASSERT_NE(t.grad(train), nullptr);
  auto with = t.leaves_with_grad();
  ASSERT_EQ(with.size(), 1u);
  EXPECT_EQ(t.name(with[0]), "a");
}

TEST(Tape, BackwardNeedsScalar) {
  Tape<double> t;
  Var x = t.leaf(rnd({2, 2}, 18), true);
  EXPECT_THROW(t.backward(x), DimensionError);
}

}  // namespace
}  // namespace icarus
