// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "advlm/advsoft.hpp"
#include "advlm/model.hpp"
#include "fd.hpp"

using namespace advlm;
using advlm::testing::numeric_grad;
using advlm::testing::rel_err;

namespace {

LMConfig small_config(std::size_t vocab = 8, std::size_t dim = 4, std::size_t layers = 1, std::size_t hidden = 4) {
  LMConfig c;
  c.vocab_size = vocab;
  c.embed_dim = dim;
  c.hidden_dim = hidden;
  c.num_layers = layers;
  c.init_range = 0.5;
  return c;
}

double mle_loss(const LMConfig& c, const LMParams& p, const std::vector<TokenId>& in,
                const std::vector<TokenId>& tgt, std::size_t len, std::size_t batch, bool record,
                Tape* out_tape = nullptr) {
  Tape local(record);
  Tape& tape = out_tape ? *out_tape : local;
  std::mt19937_64 rng(0);
  auto fwd = forward(tape, c, p, in, len, batch, zero_state(c, batch), 0.0, rng);
  auto loss = adv_nll_loss(tape, p.embedding, fwd.contexts, tgt, AdvConfig::off());
  if (out_tape) tape.backward(loss.total_nll);
  return loss.total_nll.item();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(InitParams, SameSeedBitwiseIdentical) {
  auto c = small_config();
  auto a = init_params(c, 42), b = init_params(c, 42);
  auto ta = a.tensors(), tb = b.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t k = 0; k < ta.size(); ++k)
    for (std::size_t i = 0; i < ta[k].size(); ++i) ASSERT_EQ(ta[k][i], tb[k][i]);
  auto other = init_params(c, 43);
  EXPECT_NE(other.embedding[0], a.embedding[0]);
}

TEST(InitParams, ZeroRangeGivesZeroParameters) {
  auto c = small_config();
  c.init_range = 0.0;
  for (const auto& t : init_params(c, 1).tensors())
    for (double v : t.values()) EXPECT_EQ(v, 0.0);
}

TEST(InitParams, EmpiricalMeanWithinThreeSigma) {
  LMConfig c;
  c.vocab_size = 1000;
  c.embed_dim = 100;
  c.hidden_dim = 100;
  c.init_range = 0.1;
  auto p = init_params(c, 5);
  double s = 0.0;
  for (double v : p.embedding.values()) s += v;
  const double n = static_cast<double>(p.embedding.size());
  const double sigma_of_mean = (0.1 / std::sqrt(3.0)) / std::sqrt(n);
  EXPECT_LT(std::abs(s / n), 3 * sigma_of_mean);
  for (double v : p.embedding.values()) ASSERT_LE(std::abs(v), 0.1);
}

TEST(InitParams, ForgetGateBiasStartsAtOne) {
  auto c = small_config();
  auto p = init_params(c, 3);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(p.layers[0].bias[j] == 1.0, j >= 4 && j < 8);
}

TEST(LMConfig, Validation) {
  auto c = small_config();
  c.hidden_dim = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c.num_layers = 2;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.layer_hidden(0), 5u);
  EXPECT_EQ(c.layer_hidden(1), 4u);
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Forward, ZeroModelGivesZeroContexts) {
  auto c = small_config();
  c.init_range = 0.0;
  auto p = init_params(c, 0);
  Tape tape;
  std::mt19937_64 rng(1);
  std::vector<TokenId> ids{1, 2, 3, 4, 5, 6};
  auto out = forward(tape, c, p, ids, 3, 2, zero_state(c, 2), 0.0, rng);
  EXPECT_EQ(out.contexts.shape(), (Shape{6, 4}));
  for (double v : out.contexts.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, NoNoiseIsDeterministic) {
  auto c = small_config();
  auto p = init_params(c, 9);
  std::vector<TokenId> ids{1, 2, 3, 4, 5, 6};
  std::mt19937_64 r1(3), r2(3);
  Tape t1, t2;
  auto a = forward(t1, c, p, ids, 3, 2, zero_state(c, 2), 0.0, r1);
  auto b = forward(t2, c, p, ids, 3, 2, zero_state(c, 2), 0.0, r2);
  for (std::size_t i = 0; i < a.contexts.size(); ++i) ASSERT_EQ(a.contexts[i], b.contexts[i]);
}

TEST(Forward, NoiseTouchesInputsOnly) {
  auto c = small_config();
  auto p = init_params(c, 9);
  auto before = p.embedding.clone();
  std::vector<TokenId> ids{1, 2};
  std::mt19937_64 r1(3), r2(4);
  Tape t1, t2;
  auto a = forward(t1, c, p, ids, 1, 2, zero_state(c, 2), 0.2, r1);
  auto b = forward(t2, c, p, ids, 1, 2, zero_state(c, 2), 0.2, r2);
  EXPECT_NE(a.contexts[0], b.contexts[0]);
  for (std::size_t i = 0; i < before.size(); ++i) ASSERT_EQ(before[i], p.embedding[i]);
}

TEST(Forward, ShapeErrors) {
  auto c = small_config();
  auto p = init_params(c, 1);
  Tape tape;
  std::mt19937_64 rng(1);
  std::vector<TokenId> ids{1, 2, 3};
  EXPECT_THROW(forward(tape, c, p, ids, 2, 2, zero_state(c, 2), 0.0, rng), DimensionError);
  std::vector<TokenId> four{1, 2, 3, 4};
  EXPECT_THROW(forward(tape, c, p, four, 2, 2, zero_state(c, 3), 0.0, rng), DimensionError);
  std::vector<TokenId> bad{1, 2, 3, 99};
  EXPECT_THROW(forward(tape, c, p, bad, 2, 2, zero_state(c, 2), 0.0, rng), IndexError);
}

// Oracle: the LSTM gate equations evaluated by hand for one step of a
// two-unit cell.
TEST(Forward, SingleStepMatchesHandEvaluatedGates) {
  auto c = small_config(3, 2, 1, 2);
  auto p = init_params(c, 17);
  const TokenId tok = 2;
  std::vector<double> h0{0.3, -0.2}, c0{0.1, 0.4};
  HiddenState s{{Tensor::matrix(1, 2, h0)}, {Tensor::matrix(1, 2, c0)}};
  Tape tape;
  std::mt19937_64 rng(0);
  std::vector<TokenId> ids{tok};
  auto out = forward(tape, c, p, ids, 1, 1, s, 0.0, rng);

  const auto& L = p.layers[0];
  const double x[2] = {p.embedding.at(tok, 0), p.embedding.at(tok, 1)};
  double pre[8];
  for (int j = 0; j < 8; ++j) {
    pre[j] = L.bias[j];
    for (int k = 0; k < 2; ++k) pre[j] += x[k] * L.w_input.at(k, j) + h0[k] * L.w_recurrent.at(k, j);
  }
  for (int u = 0; u < 2; ++u) {
    const double ig = sigmoid(pre[u]), fg = sigmoid(pre[2 + u]);
    const double g = std::tanh(pre[4 + u]), og = sigmoid(pre[6 + u]);
    const double cell = fg * c0[u] + ig * g;
    const double h = og * std::tanh(cell);
    EXPECT_NEAR(out.state.c[0][u], cell, 1e-12);
    EXPECT_NEAR(out.contexts[u], h, 1e-12);
  }
}

TEST(Model, WeightTyingSharesInputAndOutputEmbedding) {
  auto c = small_config();
  auto p = init_params(c, 2);
  std::vector<TokenId> ids{3, 5};
  std::vector<TokenId> tgt{5, 3};
  auto logits_and_ctx = [&] {
    Tape tape(false);
    std::mt19937_64 rng(0);
    auto f = forward(tape, c, p, ids, 1, 2, zero_state(c, 2), 0.0, rng);
    auto z = tape.matmul_bt(f.contexts, p.embedding);
    return std::pair{f.contexts.clone(), z.clone()};
  };
  auto [ctx0, z0] = logits_and_ctx();
  // Perturb row 3 only: it is an input at (0,0) and an output column everywhere.
  p.embedding.mutable_values()[3 * 4 + 1] += 0.25;
  auto [ctx1, z1] = logits_and_ctx();
  EXPECT_NE(ctx0[1], ctx1[1]);  // input lookup changed
  EXPECT_NE(z0.at(1, 3), z1.at(1, 3));
  // Context row 1 (input word 5) is untouched, yet its logit for word 3 moves
  // by exactly 0.25 * h[1] through the output side of the same matrix.
  for (std::size_t k = 0; k < 4; ++k) ASSERT_EQ(ctx0.at(1, k), ctx1.at(1, k));
  EXPECT_NEAR(z1.at(1, 3) - z0.at(1, 3), 0.25 * ctx0.at(1, 1), 1e-15);
}

TEST(Model, FullLossGradientMatchesFiniteDifferences) {
  auto c = small_config(8, 4, 1, 4);
  auto p = init_params(c, 31);
  std::vector<TokenId> in{1, 2, 3, 4, 5, 6}, tgt{2, 7, 4, 0, 6, 1};
  Tape tape;
  mle_loss(c, p, in, tgt, 3, 2, true, &tape);
  auto names = p.tensor_names();
  auto ts = p.tensors();
  for (std::size_t k = 0; k < ts.size(); ++k) {
    auto g = numeric_grad(ts[k], [&] { return mle_loss(c, p, in, tgt, 3, 2, false); });
    EXPECT_LT(rel_err(ts[k].grad(), g), 1e-3) << names[k];
  }
}

TEST(Model, TwoLayerGradientMatchesFiniteDifferences) {
  auto c = small_config(6, 3, 2, 5);
  auto p = init_params(c, 32);
  std::vector<TokenId> in{1, 2, 3, 4}, tgt{2, 5, 4, 0};
  Tape tape;
  mle_loss(c, p, in, tgt, 2, 2, true, &tape);
  auto ts = p.tensors();
  auto names = p.tensor_names();
  for (std::size_t k = 0; k < ts.size(); ++k) {
    auto g = numeric_grad(ts[k], [&] { return mle_loss(c, p, in, tgt, 2, 2, false); });
    EXPECT_LT(rel_err(ts[k].grad(), g), 1e-3) << names[k];
  }
}

// Composite loss of a single step of a 4-unit cell with random state.
TEST(Model, LstmStepGradientOverAllParameters) {
  auto c = small_config(5, 4, 1, 4);
  auto p = init_params(c, 33);
  std::mt19937_64 srng(8);
  auto h0 = advlm::testing::random_tensor({1, 4}, srng, -1, 1, false);
  auto c0 = advlm::testing::random_tensor({1, 4}, srng, -1, 1, false);
  std::vector<TokenId> in{3}, tgt{1};
  auto loss = [&](Tape& tape) {
    std::mt19937_64 rng(0);
    auto f = forward(tape, c, p, in, 1, 1, HiddenState{{h0}, {c0}}, 0.0, rng);
    return adv_nll_loss(tape, p.embedding, f.contexts, tgt, AdvConfig::off()).total_nll;
  };
  Tape tape;
  tape.backward(loss(tape));
  for (auto& t : p.tensors()) {
    auto g = numeric_grad(t, [&] {
      Tape tt(false);
      return loss(tt).item();
    });
    EXPECT_LT(rel_err(t.grad(), g), 1e-3);
  }
}

TEST(DetachState, ValuesUnchangedAndGradientSevered) {
  auto c = small_config();
  auto p = init_params(c, 4);
  std::vector<TokenId> w1{1, 2, 3, 4}, t1{2, 3, 4, 5}, w2{5, 6, 7, 1}, t2{6, 7, 1, 2};
  std::mt19937_64 rng(0);

  Tape first;
  auto f1 = forward(first, c, p, w1, 2, 2, zero_state(c, 2), 0.0, rng);
  auto carried = detach_state(f1.state);
  for (std::size_t i = 0; i < carried.h[0].size(); ++i) EXPECT_EQ(carried.h[0][i], f1.state.h[0][i]);
  EXPECT_FALSE(carried.h[0].requires_grad());

  // Second window from the detached state.
  Tape second;
  auto f2 = forward(second, c, p, w2, 2, 2, carried, 0.0, rng);
  second.backward(adv_nll_loss(second, p.embedding, f2.contexts, t2, AdvConfig::off()).total_nll);
  std::vector<std::vector<double>> grads;
  for (auto& t : p.tensors()) grads.emplace_back(t.grad().begin(), t.grad().end());
  p.zero_grad();

  // Oracle: restart with the same values injected as plain constants.
  HiddenState constant{{Tensor::from(carried.h[0].shape(), {carried.h[0].values().begin(), carried.h[0].values().end()})},
                       {Tensor::from(carried.c[0].shape(), {carried.c[0].values().begin(), carried.c[0].values().end()})}};
  Tape fresh;
  auto f3 = forward(fresh, c, p, w2, 2, 2, constant, 0.0, rng);
  fresh.backward(adv_nll_loss(fresh, p.embedding, f3.contexts, t2, AdvConfig::off()).total_nll);
  auto ts = p.tensors();
  for (std::size_t k = 0; k < ts.size(); ++k)
    for (std::size_t i = 0; i < ts[k].size(); ++i) ASSERT_EQ(ts[k].grad()[i], grads[k][i]);

  // The first window's ops never receive gradient from the second loss.
  EXPECT_FALSE(f1.contexts.has_grad());
}

TEST(Checkpoint, RoundTripIsExact) {
  auto c = small_config(7, 3, 2, 5);
  auto p = init_params(c, 12);
  auto ck = parse_checkpoint(serialize_checkpoint(c, p));
  EXPECT_EQ(ck.config, c);
  auto a = p.tensors(), b = ck.params.tensors();
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) ASSERT_EQ(a[k][i], b[k][i]);
}

TEST(Checkpoint, LayoutStartsWithMagicAndLittleEndianConfig) {
  auto c = small_config(7, 3, 1, 3);
  auto bytes = serialize_checkpoint(c, init_params(c, 1));
  EXPECT_EQ(bytes.substr(0, 8), "ADVLM001");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 7u);
  for (int i = 9; i < 16; ++i) EXPECT_EQ(bytes[i], 0);
  // magic + 5 config words + embedding (rank, 2 dims, 21 values) + 3 layer tensors
  const std::size_t want = 8 + 5 * 8 + (1 + 2 + 21) * 8 + (1 + 2 + 36) * 8 + (1 + 2 + 36) * 8 + (1 + 1 + 12) * 8;
  EXPECT_EQ(bytes.size(), want);
}

TEST(Checkpoint, CorruptionNamesSection) {
  auto c = small_config(7, 3, 1, 3);
  auto good = serialize_checkpoint(c, init_params(c, 1));
  auto expect_section = [](const std::string& bytes, const std::string& section) {
    try {
      parse_checkpoint(bytes);
      FAIL() << "expected FormatError for " << section;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(section), std::string::npos) << e.what();
    }
  };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  expect_section(bad_magic, "magic");
  auto bad_config = good;
  bad_config[8 + 8] = 0;  // embed_dim low byte -> 0
  expect_section(bad_config, "config");
  expect_section(good.substr(0, good.size() - 4), "layer0.bias");
  expect_section(good + "x", "trailing");
  auto bad_shape = good;
  bad_shape[8 + 40 + 8] = 9;  // embedding dim 0
  expect_section(bad_shape, "tensor embedding");
}
