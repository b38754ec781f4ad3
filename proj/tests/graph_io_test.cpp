#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "msiseg/gradcheck.hpp"
#include "msiseg/optim.hpp"

namespace msiseg {
namespace {

namespace fs = std::filesystem;

class GraphIoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("msiseg_graphio_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

// Small conv->bn->relu->dense classifier used across these tests.
Graph<float> make_net(uint64_t seed) {
  Rng rng(seed);
  Graph<float> g;
  const int in = g.add_input();
  auto& w1 = g.params().create("encoder.c1.w", {4, 3, 3, 3}, true);
  for (auto& v : w1.values) v = static_cast<float>(rng.normal() * 0.2);
  auto& gm = g.params().create("encoder.bn1.gamma", {4}, true);
  for (auto& v : gm.values) v = 1.0f;
  g.params().create("encoder.bn1.beta", {4}, true);
  g.params().create("encoder.bn1.rmean", {4}, false);
  auto& rv = g.params().create("encoder.bn1.rvar", {4}, false);
  for (auto& v : rv.values) v = 1.0f;
  auto& w2 = g.params().create("head.fc.w", {5, 4}, true);
  for (auto& v : w2.values) v = static_cast<float>(rng.normal() * 0.3);
  g.params().create("head.fc.b", {5}, true);

  NodeSpec conv;
  conv.kind = OpKind::Conv2d;
  conv.in0 = in;
  conv.stride = 1;
  conv.pad = 1;
  conv.w = "encoder.c1.w";  // bias-free: the conv output feeds a batch norm
  const int c1 = g.add(conv);
  NodeSpec bn;
  bn.kind = OpKind::BatchNorm;
  bn.in0 = c1;
  bn.gamma = "encoder.bn1.gamma";
  bn.beta = "encoder.bn1.beta";
  bn.rmean = "encoder.bn1.rmean";
  bn.rvar = "encoder.bn1.rvar";
  const int b2 = g.add(bn);
  NodeSpec relu;
  relu.kind = OpKind::Relu;
  relu.in0 = b2;
  const int r = g.add(relu);
  NodeSpec pool;
  pool.kind = OpKind::MeanPool;
  pool.in0 = r;
  pool.window = 0;  // global
  const int p = g.add(pool);
  NodeSpec fc;
  fc.kind = OpKind::Dense;
  fc.in0 = p;
  fc.w = "head.fc.w";
  fc.b = "head.fc.b";
  g.add(fc);
  return g;
}

Tensor<float> make_batch(uint64_t seed, int n = 4) {
  Rng rng(seed);
  Tensor<float> x({n, 3, 6, 6});
  for (auto& v : x.values) v = static_cast<float>(rng.normal());
  return x;
}

// one supervised step against fixed labels
double train_step(Graph<float>& g, Nadam<float>& opt, const Tensor<float>& x) {
  const Tensor<float>& logits = g.forward(x, true);
  std::vector<uint8_t> targets(static_cast<size_t>(x.n()), 0);
  std::vector<double> weights(targets.size(), 1.0);
  for (size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<uint8_t>(1 + i % 5);
  Tensor<float> grad;
  const double loss = weighted_softmax_ce(logits, targets, weights, &grad);
  g.params().zero_grad();
  g.backward(grad);
  opt.step(g.params());
  return loss;
}

TEST_F(GraphIoTest, CheckpointRoundTripIsExact) {
  Graph<float> g = make_net(31);
  save_params(g.params(), path("net.mpk"));
  Graph<float> h = make_net(99);  // different init, will be overwritten
  load_params(path("net.mpk"), h.params());
  for (const std::string& name : g.params().names()) {
    const auto& a = g.params().get(name).tensor;
    const auto& b = h.params().get(name).tensor;
    ASSERT_EQ(a.shape, b.shape) << name;
    for (size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.values[i], b.values[i]) << name;
  }
  // loaded net computes the same function
  Tensor<float> x = make_batch(4);
  const Tensor<float> ya = g.forward(x, false);
  const Tensor<float>& yb = h.forward(x, false);
  for (size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya.values[i], yb.values[i]);
}

TEST_F(GraphIoTest, CheckpointRejectsMismatchedStores) {
  Graph<float> g = make_net(31);
  save_params(g.params(), path("net.mpk"));

  auto records = read_checkpoint(path("net.mpk"));
  // unknown parameter name
  {
    auto bad = records;
    bad[0].name = "nonexistent.w";
    Graph<float> h = make_net(1);
    EXPECT_THROW(records_to_params(bad, h.params()), FormatError);
  }
  // missing parameter
  {
    auto bad = records;
    bad.pop_back();
    Graph<float> h = make_net(1);
    EXPECT_THROW(records_to_params(bad, h.params()), FormatError);
  }
  // shape mismatch
  {
    auto bad = records;
    bad[0].shape = {1, 1, 1, 1};
    bad[0].values.assign(1, 0.0f);
    Graph<float> h = make_net(1);
    EXPECT_THROW(records_to_params(bad, h.params()), ShapeError);
  }
}

TEST_F(GraphIoTest, CheckpointRejectsCorruptFiles) {
  Graph<float> g = make_net(31);
  save_params(g.params(), path("net.mpk"));

  // bad magic
  {
    std::ofstream f(path("bad_magic.mpk"), std::ios::binary);
    f << "NOPE" << std::string(16, '\0');
  }
  EXPECT_THROW(read_checkpoint(path("bad_magic.mpk")), FormatError);

  // truncation at several byte lengths
  std::ifstream src(path("net.mpk"), std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(src)), std::istreambuf_iterator<char>());
  for (size_t cut : {size_t(2), size_t(9), bytes.size() / 2, bytes.size() - 3}) {
    std::ofstream f(path("trunc.mpk"), std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(cut));
    f.close();
    EXPECT_THROW(read_checkpoint(path("trunc.mpk")), Error) << "cut at " << cut;
  }

  // trailing garbage
  {
    std::ofstream f(path("trailing.mpk"), std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f << "x";
  }
  EXPECT_THROW(read_checkpoint(path("trailing.mpk")), FormatError);

  EXPECT_THROW(read_checkpoint(path("does_not_exist.mpk")), IoError);
}

TEST_F(GraphIoTest, SeededTrainingIsBitIdentical) {
  Graph<float> a = make_net(7);
  Graph<float> b = make_net(7);
  Nadam<float> oa, ob;
  for (int step = 0; step < 6; ++step) {
    Tensor<float> x = make_batch(1000 + step);
    const double la = train_step(a, oa, x);
    const double lb = train_step(b, ob, x);
    ASSERT_EQ(la, lb) << "step " << step;
  }
  for (const std::string& name : a.params().names()) {
    const auto& ta = a.params().get(name).tensor;
    const auto& tb = b.params().get(name).tensor;
    for (size_t i = 0; i < ta.numel(); ++i)
      ASSERT_EQ(ta.values[i], tb.values[i]) << name << "[" << i << "]";
  }
}

TEST_F(GraphIoTest, FrozenPrefixKeepsParamsAndRunningStatsBitIdentical) {
  Graph<float> g = make_net(7);
  // capture every encoder value (weights AND running stats) before training
  std::map<std::string, std::vector<float>> before;
  for (const std::string& name : g.params().names())
    if (name.rfind("encoder.", 0) == 0) before[name] = g.params().get(name).tensor.values;

  g.set_frozen("encoder.", true);
  Nadam<float> opt;
  for (int step = 0; step < 5; ++step) train_step(g, opt, make_batch(50 + step));

  for (const auto& [name, values] : before) {
    const auto& now = g.params().get(name).tensor.values;
    ASSERT_EQ(values.size(), now.size());
    for (size_t i = 0; i < values.size(); ++i)
      ASSERT_EQ(values[i], now[i]) << name << " drifted at " << i;
  }
  // heads must still have moved
  bool head_moved = false;
  Graph<float> fresh = make_net(7);
  const auto& w_now = g.params().get("head.fc.w").tensor.values;
  const auto& w_then = fresh.params().get("head.fc.w").tensor.values;
  for (size_t i = 0; i < w_now.size(); ++i) head_moved |= (w_now[i] != w_then[i]);
  EXPECT_TRUE(head_moved);
}

TEST_F(GraphIoTest, FrozenBatchNormUsesRunningStatsEvenInTrainMode) {
  Graph<float> g = make_net(7);
  Tensor<float> x = make_batch(3);
  // unfrozen: train mode and eval mode disagree (batch stats vs running)
  const Tensor<float> train_out = g.forward(x, true);
  const Tensor<float> eval_out = g.forward(x, false);
  double diff = 0.0;
  for (size_t i = 0; i < train_out.numel(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(train_out.values[i]) - eval_out.values[i]));
  EXPECT_GT(diff, 1e-4);
  // frozen: train-mode forward must equal eval-mode forward exactly
  g.set_frozen("encoder.", true);
  const Tensor<float> frozen_train = g.forward(x, true);
  const Tensor<float>& frozen_eval = g.forward(x, false);
  for (size_t i = 0; i < frozen_train.numel(); ++i)
    ASSERT_EQ(frozen_train.values[i], frozen_eval.values[i]);
}

TEST_F(GraphIoTest, DoubleCastMatchesFloatForward) {
  Graph<float> g = make_net(13);
  Tensor<float> x = make_batch(21);
  const Tensor<float> yf = g.forward(x, true);
  Graph<double> gd = g.cast<double>();
  const Tensor<double>& yd = gd.forward(x.cast<double>(), true);
  ASSERT_EQ(yf.numel(), yd.numel());
  for (size_t i = 0; i < yf.numel(); ++i) EXPECT_NEAR(yf.values[i], yd.values[i], 1e-4);
}

TEST_F(GraphIoTest, TrainedFloatGraphPassesDoubleGradCheck) {
  // the acceptance-style path: train a few steps in float, cast to double,
  // and verify analytic gradients against finite differences
  Graph<float> g = make_net(7);
  Nadam<float> opt;
  for (int step = 0; step < 4; ++step) train_step(g, opt, make_batch(300 + step));
  Graph<double> gd = g.cast<double>();
  Tensor<double> x = make_batch(4).cast<double>();
  auto report = grad_check(gd, x, 1e-3, 16, 11);
  EXPECT_TRUE(report.pass) << "worst rel err " << report.worst;
}

TEST_F(GraphIoTest, GraphValidationRejectsMalformedSpecs) {
  Graph<float> g;
  EXPECT_THROW(g.add(NodeSpec{}), StateError);  // no input yet
  g.add_input();
  EXPECT_THROW(g.add_input(), StateError);  // second input
  NodeSpec relu;
  relu.kind = OpKind::Relu;
  relu.in0 = 5;  // out of range
  EXPECT_THROW(g.add(relu), ArgumentError);
  NodeSpec conv;
  conv.kind = OpKind::Conv2d;
  conv.in0 = 0;
  EXPECT_THROW(g.add(conv), ArgumentError);  // missing params
  NodeSpec pool;
  pool.kind = OpKind::MaxPool;
  pool.in0 = 0;
  pool.window = 0;
  EXPECT_THROW(g.add(pool), ArgumentError);
  NodeSpec add;
  add.kind = OpKind::Add;
  add.in0 = 0;
  add.in1 = 3;
  EXPECT_THROW(g.add(add), ArgumentError);
}

}  // namespace
}  // namespace msiseg
