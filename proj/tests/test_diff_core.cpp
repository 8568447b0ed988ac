#include <gtest/gtest.h>

#include <cmath>

#include "hybridst/optim.hpp"
#include "hybridst/rng.hpp"
#include "hybridst/tape.hpp"
#include "hybridst/tensor.hpp"

using hybridst::Error;
using hybridst::Rng;
using namespace hybridst::diff;

TEST(Primitives, ReluClampsNegatives) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 3, {-2.0, 0.0, 3.0}));
  Var y = tape.relu(x);
  EXPECT_EQ(tape.value(y)[0], 0.0);
  EXPECT_EQ(tape.value(y)[1], 0.0);
  EXPECT_EQ(tape.value(y)[2], 3.0);
}

TEST(Primitives, SoftmaxSymmetric) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 2, {0.0, 0.0}));
  Var y = tape.softmax_rows(x);
  EXPECT_DOUBLE_EQ(tape.value(y)[0], 0.5);
  EXPECT_DOUBLE_EQ(tape.value(y)[1], 0.5);
}

TEST(Primitives, SoftmaxOneToThreeRatio) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 2, {0.0, std::log(3.0)}));
  Var y = tape.softmax_rows(x);
  EXPECT_NEAR(tape.value(y)[0], 0.25, 1e-12);
  EXPECT_NEAR(tape.value(y)[1], 0.75, 1e-12);
}

TEST(Primitives, SoftmaxRowsAreProbabilityVectors) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(8);
    Tensor x({rows, cols});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-50.0, 50.0);
    Tape tape;
    Var y = tape.softmax_rows(tape.leaf(std::move(x)));
    const Tensor& out = tape.value(y);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        EXPECT_GE(out[r * cols + c], 0.0);
        sum += out[r * cols + c];
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Primitives, ShapeMismatchThrowsDimensionError) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var b = tape.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  EXPECT_THROW(tape.matmul(a, b), Error);
  EXPECT_THROW(tape.add(a, b), Error);
}

TEST(Primitives, NonFiniteInputRejected) {
  Tape tape;
  Tensor bad = Tensor::matrix(1, 2, {1.0, 0.0});
  bad[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(tape.leaf(std::move(bad)), Error);
}

TEST(Backprop, LinearGradientStructure) {
  // f = sum(W x) with x fixed: df/dW = ones * x^T.
  Tape tape;
  Var w = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}), true);
  Var x = tape.leaf(Tensor::matrix(3, 1, {0.5, -1.0, 2.0}));
  Var f = tape.sum_all(tape.matmul(w, x));
  tape.backward(f);
  const Tensor& g = tape.grad(w);
  const double expect[3] = {0.5, -1.0, 2.0};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_DOUBLE_EQ(g[r * 3 + c], expect[c]);
}

TEST(Backprop, FlatRegionHasZeroGradient) {
  // f = sum(relu(-|w|)) is identically zero around any w != 0.
  Tape tape;
  Var w = tape.leaf(Tensor::matrix(1, 3, {1.0, -2.0, 3.0}), true);
  Var neg = tape.scale(tape.relu(w), -1.0);           // -relu(w) <= 0
  Var f = tape.sum_all(tape.relu(neg));               // relu of non-positive
  tape.backward(f);
  const Tensor g = tape.grad_or_zero(w);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(Backprop, DisconnectedParameterGetsZeroGradient) {
  Tape tape;
  Var used = tape.leaf(Tensor::scalar(2.0), true);
  Var unused = tape.leaf(Tensor::scalar(5.0), true);
  Var f = tape.scale(used, 3.0);
  tape.backward(f);
  EXPECT_EQ(tape.grad_or_zero(unused)[0], 0.0);
  EXPECT_DOUBLE_EQ(tape.grad(used)[0], 3.0);
  (void)unused;
}

namespace {

// Builds a GradFn from a tape-building callable so every primitive can be
// checked against central differences.
template <typename Builder>
GradFn make_grad_fn(Builder builder) {
  return [builder](const ParamStore& params) {
    Tape tape;
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < params.count(); ++i)
      leaves.push_back(tape.leaf(params.value(i), true));
    Var out = builder(tape, leaves);
    tape.backward(out);
    std::vector<Tensor> grads;
    for (Var leaf : leaves) grads.push_back(tape.grad_or_zero(leaf));
    return std::make_pair(tape.value(out)[0], std::move(grads));
  };
}

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST(GradCheck, QuadraticMatchesAnalytic) {
  ParamStore params;
  params.add("theta", Tensor::scalar(3.0));
  GradFn fn = [](const ParamStore& p) {
    const double t = p.value(0)[0];
    return std::make_pair(t * t, std::vector<Tensor>{Tensor::scalar(2.0 * t)});
  };
  // central differences are exact for quadratics up to rounding
  EXPECT_LT(gradcheck(params, fn), 1e-8);
}

TEST(GradCheck, LinearIsExactToMachinePrecision) {
  ParamStore params;
  params.add("theta", Tensor::matrix(1, 2, {1.0, -2.0}));
  GradFn fn = [](const ParamStore& p) {
    const Tensor& t = p.value(0);
    return std::make_pair(3.0 * t[0] - 5.0 * t[1],
                          std::vector<Tensor>{Tensor::matrix(1, 2, {3.0, -5.0})});
  };
  EXPECT_LT(gradcheck(params, fn), 1e-9);
}

TEST(GradCheck, EveryPrimitiveInIsolation) {
  Rng rng(11);

  struct Case {
    const char* name;
    std::function<Var(Tape&, const std::vector<Var>&)> build;
    std::vector<Tensor> inits;
  };

  std::vector<Case> cases;
  cases.push_back({"matmul",
                   [](Tape& t, const std::vector<Var>& v) {
                     return t.sum_all(t.matmul(v[0], v[1]));
                   },
                   {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})}});
  cases.push_back({"add",
                   [](Tape& t, const std::vector<Var>& v) {
                     return t.sum_all(t.add(v[0], v[1]));
                   },
                   {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}});
  cases.push_back({"add_row_broadcast",
                   [](Tape& t, const std::vector<Var>& v) {
                     // square so the bias gradient is exercised non-trivially
                     Var s = t.add_row_broadcast(v[0], v[1]);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {3, 2}), random_tensor(rng, {2})}});
  cases.push_back({"scale_relu",
                   [](Tape& t, const std::vector<Var>& v) {
                     return t.sum_all(t.relu(t.scale(v[0], 1.7)));
                   },
                   {random_tensor(rng, {4, 3})}});
  cases.push_back({"sigmoid",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var s = t.sigmoid(v[0]);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {2, 5})}});
  cases.push_back({"softmax_rows",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var s = t.softmax_rows(v[0]);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {3, 4})}});
  cases.push_back({"layer_norm_rows",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var s = t.layer_norm_rows(v[0]);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {3, 6})}});
  cases.push_back({"concat_last_dim",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var s = t.concat_last_dim(v[0], v[1]);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 2})}});
  cases.push_back({"concat_rows",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var s = t.concat_rows({v[0], v[1]});
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {2, 3}), random_tensor(rng, {3, 3})}});
  cases.push_back({"transpose_slice",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var s = t.slice_rows(t.transpose(v[0]), 1, 3);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {2, 4})}});
  cases.push_back({"stack_take_mean",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var stacked = t.stack_node_major({v[0], v[1], v[2]});
                     Var last = t.take_rows_strided(stacked, 2, 3, 2);
                     Var mean = t.node_time_mean(stacked, 2, 3);
                     Var s = t.add(last, mean);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3}),
                    random_tensor(rng, {2, 3})}});
  cases.push_back({"rowwise_blend",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var gate = t.sigmoid(v[0]);
                     Var s = t.rowwise_blend(gate, v[1], v[2]);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {3, 1}), random_tensor(rng, {3, 4}),
                    random_tensor(rng, {3, 4})}});
  cases.push_back({"multihead_attention",
                   [](Tape& t, const std::vector<Var>& v) {
                     Var s = t.multihead_attention(v[0], v[1], v[2], 2);
                     return t.sum_all(t.matmul(s, t.transpose(s)));
                   },
                   {random_tensor(rng, {5, 4}), random_tensor(rng, {5, 4}),
                    random_tensor(rng, {5, 4})}});
  cases.push_back({"masked_sse",
                   [](Tape& t, const std::vector<Var>& v) {
                     Tensor target = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
                     Tensor mask = Tensor::matrix(2, 3, {1, 0, 1, 1, 1, 0});
                     return t.masked_sse(v[0], target, mask);
                   },
                   {random_tensor(rng, {2, 3})}});

  for (auto& c : cases) {
    ParamStore params;
    for (std::size_t i = 0; i < c.inits.size(); ++i)
      params.add(std::string("p") + std::to_string(i), c.inits[i]);
    const double err = gradcheck(params, make_grad_fn(c.build));
    EXPECT_LT(err, 1e-4) << "primitive: " << c.name;
  }
}

TEST(GradCheck, ComposedPrimitives) {
  Rng rng(23);
  ParamStore params;
  params.add("w1", random_tensor(rng, {4, 3}));
  params.add("b1", random_tensor(rng, {3}));
  params.add("w2", random_tensor(rng, {3, 2}));
  GradFn fn = make_grad_fn([](Tape& t, const std::vector<Var>& v) {
    Var x = t.leaf(Tensor::matrix(2, 4, {0.3, -0.7, 0.1, 0.9,  //
                                         -0.2, 0.5, -0.8, 0.4}));
    Var h = t.relu(t.add_row_broadcast(t.matmul(x, v[0]), v[1]));
    Var y = t.sigmoid(t.matmul(h, v[2]));
    Tensor target = Tensor::matrix(2, 2, {0.0, 1.0, 1.0, 0.0});
    Tensor mask = Tensor::matrix(2, 2, {1.0, 1.0, 1.0, 1.0});
    return t.masked_sse(y, target, mask);
  });
  EXPECT_LT(gradcheck(params, fn), 1e-4);
}

TEST(Adam, FirstStepWithUnitGradient) {
  ParamStore params;
  params.add("theta", Tensor::scalar(0.0));
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  adam_step(params, {Tensor::scalar(1.0)}, cfg);
  // bias-corrected first step: m_hat = 1, v_hat = 1
  EXPECT_NEAR(params.value(0)[0], -1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientZeroDecayIsIdentity) {
  ParamStore params;
  params.add("theta", Tensor::matrix(1, 2, {1.5, -2.5}));
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  adam_step(params, {Tensor::zeros({1, 2})}, cfg);
  EXPECT_EQ(params.value(0)[0], 1.5);
  EXPECT_EQ(params.value(0)[1], -2.5);
}

TEST(Adam, DecayOnlyStep) {
  ParamStore params;
  params.add("theta", Tensor::scalar(1.0));
  adam_step(params, {Tensor::scalar(0.0)});  // defaults: lr 1e-3, wd 1e-5
  EXPECT_DOUBLE_EQ(params.value(0)[0], 1.0 - 1e-8);
}

TEST(Adam, ConvergesOnQuadratic) {
  ParamStore params;
  params.add("theta", Tensor::scalar(0.0));
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double t = params.value(0)[0];
    adam_step(params, {Tensor::scalar(2.0 * (t - 3.0))}, cfg);
  }
  EXPECT_NEAR(params.value(0)[0], 3.0, 1e-4);
}

TEST(Tape, MultiHeadMatchesSingleHeadComposition) {
  Rng rng(5);
  Tensor q = random_tensor(rng, {4, 3}), k = random_tensor(rng, {4, 3}),
         v = random_tensor(rng, {4, 3});
  Tape tape;
  Var qv = tape.leaf(q), kv = tape.leaf(k), vv = tape.leaf(v);
  Var fused = tape.multihead_attention(qv, kv, vv, 1);
  Var scores = tape.scale(tape.matmul(qv, tape.transpose(kv)),
                          1.0 / std::sqrt(3.0));
  Var composed = tape.matmul(tape.softmax_rows(scores), vv);
  const Tensor& a = tape.value(fused);
  const Tensor& b = tape.value(composed);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}
