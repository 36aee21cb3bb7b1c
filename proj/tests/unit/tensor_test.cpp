#include "cgfuse/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cgfuse/errors.hpp"

namespace ts = cgfuse::tensor;
using ts::Tensor;

namespace {

constexpr double kTol = 1e-3;

Tensor random_param(ts::Shape shape, ts::CounterRng& rng, float scale = 1.0f) {
  return ts::randn_parameter(std::move(shape), scale, rng);
}

// Random fixed projection so every output element carries an O(1) gradient.
Tensor probe_loss(const Tensor& out, const Tensor& weights) { return ts::sum(ts::mul(out, weights)); }

Tensor weights_like(const Tensor& t, ts::CounterRng& rng) {
  std::vector<float> w(t.numel());
  for (auto& x : w) x = rng.normal();
  return Tensor::from(t.shape(), std::move(w));
}

// Runs `op` once to size the probe, then finite-difference checks all inputs.
double check_op(const std::function<Tensor()>& op, std::vector<Tensor> inputs, std::uint64_t seed = 1) {
  ts::CounterRng rng(seed, 99);
  Tensor w = weights_like(op(), rng);
  auto r = ts::grad_check([&] { return probe_loss(op(), w); }, inputs);
  EXPECT_GT(r.checked, 0u);
  return r.max_rel_error;
}

}  // namespace

TEST(Tensor, IdentityMatmul) {
  auto I = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto A = Tensor::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto C = ts::matmul(I, A);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(C.data()[i], A.data()[i]);
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    ts::matmul(a, b);
    FAIL();
  } catch (const cgfuse::ShapeMismatch& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("and [2, 3]"), std::string::npos);
  }
  EXPECT_THROW(ts::add(Tensor::zeros({2, 3}), Tensor::zeros({4})), cgfuse::ShapeMismatch);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), cgfuse::ShapeMismatch);
}

TEST(Tensor, SoftmaxOfConstantIsUniform) {
  auto s = ts::softmax(Tensor::full({2, 5}, 3.0f));
  for (float x : s.data()) EXPECT_FLOAT_EQ(x, 0.2f);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  ts::CounterRng rng(3);
  auto x = random_param({6, 9}, rng, 4.0f);
  auto s = ts::softmax(x, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    double t = 0.0;
    for (std::size_t j = 0; j < 9; ++j) t += s.at(i, j);
    EXPECT_NEAR(t, 1.0, 1e-6);
  }
  auto c = ts::softmax(x, 0);
  for (std::size_t j = 0; j < 9; ++j) {
    double t = 0.0;
    for (std::size_t i = 0; i < 6; ++i) t += c.at(i, j);
    EXPECT_NEAR(t, 1.0, 1e-6);
  }
}

TEST(Tensor, LayerNormNormalizesRows) {
  ts::CounterRng rng(4);
  auto x = random_param({5, 32}, rng, 3.0f);
  auto y = ts::layer_norm(x, Tensor::full({32}, 1.0f), Tensor::zeros({32}));
  for (std::size_t i = 0; i < 5; ++i) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 32; ++j) m += y.at(i, j);
    m /= 32;
    for (std::size_t j = 0; j < 32; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
    v /= 32;
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
}

TEST(Tensor, CrossEntropyAtUniformLogitsIsLogV) {
  std::vector<std::int64_t> t = {1, 3, -100};
  auto l = ts::cross_entropy(Tensor::zeros({3, 7}), t);
  EXPECT_NEAR(l.item(), std::log(7.0), 1e-6);
  std::vector<std::int64_t> none = {-100, -100, -100};
  EXPECT_EQ(ts::cross_entropy(Tensor::zeros({3, 7}), none).item(), 0.0f);
}

TEST(Backward, SumGivesOnes) {
  auto w = Tensor::parameter({2, 3}, {1, 2, 3, 4, 5, 6});
  ts::Tape tape;
  tape.backward(ts::sum(w));
  for (float g : w.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, HalfSquaredNormGivesW) {
  auto w = Tensor::parameter({4}, {0.5f, -1.0f, 2.0f, 3.0f});
  ts::Tape tape;
  tape.backward(ts::mul_scalar(ts::sum(ts::mul(w, w)), 0.5f));
  auto g = w.grad();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(g[i], w.data()[i]);
}

TEST(Backward, UnreachableParameterGetsZero) {
  auto a = Tensor::parameter({2}, {1, 2});
  auto b = Tensor::parameter({2}, {3, 4});
  ts::Tape tape;
  tape.backward(ts::sum(a));
  for (float g : b.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, NonScalarLossThrows) {
  auto a = Tensor::parameter({2}, {1, 2});
  ts::Tape tape;
  auto y = ts::mul_scalar(a, 2.0f);
  EXPECT_THROW(tape.backward(y), cgfuse::NotScalar);
}

TEST(Backward, NoTapeRecordsNothing) {
  auto a = Tensor::parameter({2}, {1, 2});
  auto y = ts::mul_scalar(a, 2.0f);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, Matmul) {
  ts::CounterRng rng(10);
  auto a = random_param({3, 4}, rng), b = random_param({4, 5}, rng);
  auto at = random_param({4, 3}, rng), bt = random_param({5, 4}, rng);
  EXPECT_LT(check_op([&] { return ts::matmul(a, b); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { return ts::matmul(at, b, true, false); }, {at, b}), kTol);
  EXPECT_LT(check_op([&] { return ts::matmul(a, bt, false, true); }, {a, bt}), kTol);
  EXPECT_LT(check_op([&] { return ts::matmul(at, bt, true, true); }, {at, bt}), kTol);
}

TEST(GradCheck, ElementwiseAndBias) {
  ts::CounterRng rng(11);
  auto a = random_param({3, 4}, rng), b = random_param({3, 4}, rng), bias = random_param({4}, rng);
  EXPECT_LT(check_op([&] { return ts::add(a, b); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { return ts::sub(a, b); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { return ts::add(a, bias); }, {a, bias}), kTol);
  EXPECT_LT(check_op([&] { return ts::mul(a, b); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { return ts::mul_scalar(a, -1.7f); }, {a}), kTol);
  std::vector<float> f = {0.5f, 2.0f, -1.0f};
  EXPECT_LT(check_op([&] { return ts::scale_rows(a, f); }, {a}), kTol);
}

TEST(GradCheck, ShapeOps) {
  ts::CounterRng rng(12);
  auto a = random_param({3, 4}, rng), b = random_param({2, 4}, rng), c = random_param({3, 2}, rng);
  EXPECT_LT(check_op([&] { std::vector<Tensor> p{a, b}; return ts::concat(p, 0); }, {a, b}), kTol);
  EXPECT_LT(check_op([&] { std::vector<Tensor> p{a, c}; return ts::concat(p, 1); }, {a, c}), kTol);
  EXPECT_LT(check_op([&] { return ts::slice(a, 0, 1, 3); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ts::slice(a, 1, 1, 3); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ts::transpose(a); }, {a}), kTol);
}

TEST(GradCheck, GatherScatter) {
  ts::CounterRng rng(13);
  auto table = random_param({5, 3}, rng), src = random_param({4, 3}, rng), rows = random_param({2, 3}, rng);
  std::vector<std::size_t> ids = {4, 0, 4, 2};
  std::vector<std::size_t> into = {1, 1, 0, 2};
  std::vector<std::size_t> repl = {3, 0};
  EXPECT_LT(check_op([&] { return ts::embedding_lookup(table, ids); }, {table}), kTol);
  EXPECT_LT(check_op([&] { return ts::scatter_add_rows(src, into, 3); }, {src}), kTol);
  EXPECT_LT(check_op([&] { return ts::replace_rows(table, repl, rows); }, {table, rows}), kTol);
}

TEST(GradCheck, Activations) {
  ts::CounterRng rng(14);
  auto a = random_param({4, 5}, rng);
  // keep inputs off the ReLU kink
  for (auto& x : a.data())
    if (std::abs(x) < 0.05f) x += 0.1f;
  EXPECT_LT(check_op([&] { return ts::relu(a); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ts::gelu(a); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ts::softmax(a, 1); }, {a}), kTol);
  EXPECT_LT(check_op([&] { return ts::softmax(a, 0); }, {a}), kTol);
}

TEST(GradCheck, LayerNorm) {
  ts::CounterRng rng(15);
  auto x = random_param({3, 6}, rng), g = random_param({6}, rng), b = random_param({6}, rng);
  EXPECT_LT(check_op([&] { return ts::layer_norm(x, g, b); }, {x, g, b}), kTol);
}

TEST(GradCheck, Reductions) {
  ts::CounterRng rng(16);
  auto a = random_param({3, 4}, rng);
  auto r1 = ts::grad_check([&] { return ts::sum(a); }, std::span<Tensor>(&a, 1));
  EXPECT_LT(r1.max_rel_error, kTol);
  auto r2 = ts::grad_check([&] { return ts::mean(a); }, std::span<Tensor>(&a, 1));
  EXPECT_LT(r2.max_rel_error, kTol);
}

TEST(GradCheck, CrossEntropyWithIgnore) {
  ts::CounterRng rng(17);
  auto logits = random_param({4, 6}, rng);
  std::vector<std::int64_t> t = {2, -100, 5, 0};
  auto r = ts::grad_check([&] { return ts::cross_entropy(logits, t); }, std::span<Tensor>(&logits, 1));
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_EQ(logits.grad()[6], 0.0f);  // ignored row
}

TEST(GradCheck, Dropout) {
  ts::CounterRng rng(18);
  auto a = random_param({3, 4}, rng);
  std::vector<std::uint8_t> keep = {1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1};
  EXPECT_LT(check_op([&] { return ts::dropout(a, keep, 0.25f); }, {a}), kTol);
}

TEST(GradCheck, AttentionSegmentsAndCausal) {
  ts::CounterRng rng(19);
  auto q = random_param({7, 8}, rng), k = random_param({9, 8}, rng), v = random_param({9, 8}, rng);
  std::vector<ts::AttentionSegment> cross = {{0, 3, 0, 4}, {3, 4, 4, 5}};
  EXPECT_LT(check_op([&] { return ts::attention(q, k, v, cross, 2, false); }, {q, k, v}), kTol);
  auto kq = random_param({7, 8}, rng), vq = random_param({7, 8}, rng);
  std::vector<ts::AttentionSegment> self = {{0, 3, 0, 3}, {3, 4, 3, 4}};
  EXPECT_LT(check_op([&] { return ts::attention(q, kq, vq, self, 4, true); }, {q, kq, vq}), kTol);
}

TEST(GradCheck, ThreeLayerMlp) {
  ts::CounterRng rng(20);
  auto x = Tensor::from({5, 4}, std::vector<float>(20, 0.3f));
  for (auto& e : x.data()) e = rng.normal();
  auto w1 = random_param({4, 8}, rng, 0.5f), b1 = random_param({8}, rng, 0.1f);
  auto w2 = random_param({8, 8}, rng, 0.5f), b2 = random_param({8}, rng, 0.1f);
  auto w3 = random_param({8, 3}, rng, 0.5f);
  std::vector<std::int64_t> t = {0, 2, 1, 1, 0};
  auto f = [&] {
    auto h = ts::gelu(ts::add(ts::matmul(x, w1), b1));
    h = ts::gelu(ts::add(ts::matmul(h, w2), b2));
    return ts::cross_entropy(ts::matmul(h, w3), t);
  };
  std::vector<Tensor> ps = {w1, b1, w2, b2, w3};
  EXPECT_LT(ts::grad_check(f, ps).max_rel_error, kTol);
}

TEST(Causality, AttentionIgnoresFutureKeys) {
  ts::CounterRng rng(21);
  auto q = random_param({5, 4}, rng), k = random_param({5, 4}, rng), v = random_param({5, 4}, rng);
  std::vector<ts::AttentionSegment> seg = {{0, 5, 0, 5}};
  auto base = ts::attention(q, k, v, seg, 2, true);
  k.data()[4 * 4 + 1] += 3.0f;
  v.data()[4 * 4 + 2] -= 3.0f;
  auto pert = ts::attention(q, k, v, seg, 2, true);
  for (std::size_t i = 0; i < 4 * 4; ++i) EXPECT_EQ(base.data()[i], pert.data()[i]);
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto w = Tensor::parameter({3}, {1, 2, 3});
  {
    ts::Tape tape;
    tape.backward(ts::mul_scalar(ts::sum(w), 0.0f));
  }
  ts::AdamState st;
  std::vector<Tensor> ps = {w};
  ts::adam_step(ps, st, {});
  EXPECT_EQ(w.data()[0], 1.0f);
  EXPECT_EQ(w.data()[2], 3.0f);
}

TEST(Adam, FirstStepHandValue) {
  auto w = Tensor::parameter({1}, {0.0f});
  {
    ts::Tape tape;
    tape.backward(ts::sum(w));  // g = 1
  }
  ts::AdamState st;
  std::vector<Tensor> ps = {w};
  ts::AdamConfig cfg;
  cfg.lr = 0.1f;
  ts::adam_step(ps, st, cfg);
  // m = 0.1, v = 0.001, mhat = vhat = 1 -> step = -0.1 / (1 + 1e-8)
  EXPECT_NEAR(w.data()[0], -0.1f, 1e-6);
}

TEST(Adam, Deterministic) {
  auto run = [] {
    auto w = Tensor::parameter({2}, {0.3f, -0.7f});
    ts::AdamState st;
    std::vector<Tensor> ps = {w};
    for (int i = 0; i < 2; ++i) {
      w.zero_grad();
      ts::Tape tape;
      tape.backward(ts::sum(ts::mul(w, w)));
      ts::adam_step(ps, st, {});
    }
    return std::vector<float>(w.data().begin(), w.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Rng, CounterStreamsAreReproducibleAndDistinct) {
  ts::CounterRng a(7), b(7), c(8);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(ts::CounterRng(7).next_u64(), c.next_u64());
  auto f1 = ts::CounterRng(7).fork("gnn");
  auto f2 = ts::CounterRng(7).fork("plm");
  EXPECT_NE(f1.next_u64(), f2.next_u64());
  double m = 0.0;
  ts::CounterRng n(1);
  for (int i = 0; i < 20000; ++i) m += n.normal();
  EXPECT_NEAR(m / 20000, 0.0, 0.03);
}

TEST(Checkpoint, RoundTripAndErrors) {
  std::vector<std::pair<std::string, Tensor>> ts_in = {
      {"plm.embed", Tensor::from({2, 3}, {1, 2, 3, 4, 5, -6.5f})},
      {"gnn.bias", Tensor::from({3}, {0.25f, 0, 1})},
      {"scalar", Tensor::scalar(9.0f)}};
  std::stringstream buf;
  ts::write_checkpoint(buf, ts_in);
  auto back = ts::read_checkpoint(buf);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].first, ts_in[i].first);
    EXPECT_EQ(back[i].second.shape(), ts_in[i].second.shape());
    EXPECT_TRUE(std::equal(back[i].second.data().begin(), back[i].second.data().end(),
                           ts_in[i].second.data().begin()));
  }
  std::stringstream bad("XXXX");
  EXPECT_THROW(ts::read_checkpoint(bad), cgfuse::FormatError);
  std::string s = buf.str();
  std::stringstream trunc;
  ts::write_checkpoint(trunc, ts_in);
  std::string t = trunc.str();
  std::stringstream cut(t.substr(0, t.size() - 3));
  EXPECT_THROW(ts::read_checkpoint(cut), cgfuse::FormatError);
}
