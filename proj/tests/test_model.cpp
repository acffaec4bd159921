#include <cmath>
#include <random>

#include "doctest.h"
#include "evosam/lora/lora.hpp"
#include "evosam/model/model.hpp"
#include "support.hpp"

using namespace evosam;
using nk::Tape;
using nk::Tensor;
using nk::Var;
using testsupport::random_tensor;

namespace {

Tensor eye(int d) {
  Tensor t({d, d});
  for (int i = 0; i < d; ++i) t.at(i, i) = 1;
  return t;
}

// Scalar-by-scalar single-head attention in double.
std::vector<std::vector<double>> brute_attention(const Tensor& qi, const Tensor& ki, const Tensor& vi, const Tensor& wq,
                                                 const Tensor& wk, const Tensor& wv, const Tensor& wo) {
  const int n = qi.shape()[0], m = ki.shape()[0], d = qi.shape()[1];
  auto proj = [&](const Tensor& x, const Tensor& w, int rows) {
    std::vector<std::vector<double>> out(rows, std::vector<double>(d, 0.0));
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k) out[i][j] += double(x.at(i, k)) * w.at(k, j);
    return out;
  };
  auto q = proj(qi, wq, n), k = proj(ki, wk, m), v = proj(vi, wv, m);
  std::vector<std::vector<double>> ctx(n, std::vector<double>(d, 0.0)), out(n, std::vector<double>(d, 0.0));
  for (int i = 0; i < n; ++i) {
    std::vector<double> s(m);
    double mx = -1e300, z = 0;
    for (int j = 0; j < m; ++j) {
      for (int c = 0; c < d; ++c) s[j] += q[i][c] * k[j][c];
      s[j] /= std::sqrt(double(d));
      mx = std::max(mx, s[j]);
    }
    for (int j = 0; j < m; ++j) z += (s[j] = std::exp(s[j] - mx));
    for (int j = 0; j < m; ++j)
      for (int c = 0; c < d; ++c) ctx[i][c] += s[j] / z * v[j][c];
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k) out[i][j] += ctx[i][k] * wo.at(k, j);
  return out;
}

model::AttentionWeights bind(Tape& t, const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& o) {
  return {t.constant(q), t.constant(k), t.constant(v), t.constant(o)};
}

}  // namespace

TEST_CASE("attention: one token with identity weights returns the token") {
  Tape t;
  const Tensor x({1, 4}, {0.3f, -1.2f, 2.0f, 0.5f});
  Var in = t.constant(x);
  const auto w = bind(t, eye(4), eye(4), eye(4), eye(4));
  const Tensor y = model::attention(in, in, in, w, nullptr, nullptr, 2).value();
  for (int j = 0; j < 4; ++j) CHECK(y.at(0, j) == doctest::Approx(x.at(0, j)).epsilon(1e-6));
}

TEST_CASE("attention: two tokens, d=2 against a scalar evaluation") {
  const Tensor x({2, 2}, {1.0f, 0.5f, -0.3f, 2.0f});
  const Tensor wq({2, 2}, {0.7f, -0.2f, 0.4f, 1.1f}), wk({2, 2}, {1.3f, 0.1f, -0.6f, 0.9f}),
      wv({2, 2}, {0.2f, 0.8f, 1.5f, -0.4f}), wo({2, 2}, {1.0f, 0.3f, -0.7f, 0.6f});
  Tape t;
  Var in = t.constant(x);
  const Tensor y = model::attention(in, in, in, bind(t, wq, wk, wv, wo), nullptr, nullptr, 1).value();
  const auto ref = brute_attention(x, x, x, wq, wk, wv, wo);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(y.at(i, j) == doctest::Approx(ref[i][j]).epsilon(1e-5));
}

TEST_CASE("attention: LoRA pair equals attention with merged weights; zero B is a no-op") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({3, 4}, rng), kv = random_tensor({5, 4}, rng);
  const Tensor wq = random_tensor({4, 4}, rng), wk = random_tensor({4, 4}, rng), wv = random_tensor({4, 4}, rng),
               wo = random_tensor({4, 4}, rng);
  const Tensor qa = random_tensor({4, 2}, rng), qb = random_tensor({2, 4}, rng), va = random_tensor({4, 2}, rng),
               vb = random_tensor({2, 4}, rng);
  Tape t;
  model::LoraVars ql{t.constant(qa), t.constant(qb)}, vl{t.constant(va), t.constant(vb)};
  const Tensor adapted =
      model::attention(t.constant(x), t.constant(kv), t.constant(kv), bind(t, wq, wk, wv, wo), &ql, &vl, 2).value();
  const Tensor merged = model::attention(t.constant(x), t.constant(kv), t.constant(kv),
                                         bind(t, lora::merged_weight(wq, qa, qb), wk, lora::merged_weight(wv, va, vb), wo),
                                         nullptr, nullptr, 2)
                            .value();
  for (std::size_t i = 0; i < adapted.size(); ++i) CHECK(adapted[i] == doctest::Approx(merged[i]).epsilon(1e-5));

  model::LoraVars zq{t.constant(qa), t.constant(Tensor({2, 4}))}, zv{t.constant(va), t.constant(Tensor({2, 4}))};
  const Tensor with_zero =
      model::attention(t.constant(x), t.constant(kv), t.constant(kv), bind(t, wq, wk, wv, wo), &zq, &zv, 2).value();
  const Tensor plain =
      model::attention(t.constant(x), t.constant(kv), t.constant(kv), bind(t, wq, wk, wv, wo), nullptr, nullptr, 2).value();
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(std::abs(with_zero[i] - plain[i]) <= 1e-6);
}

TEST_CASE("attention rejects a token dimension mismatch") {
  Tape t;
  Var x = t.constant(Tensor({2, 3}));
  CHECK_THROWS(model::attention(x, x, x, bind(t, eye(4), eye(4), eye(4), eye(4)), nullptr, nullptr, 2));
}

TEST_CASE("default config shapes") {
  const ModelConfig cfg;
  const model::MiniSam m(cfg);
  const auto base = m.init_params(1);
  CHECK(base.all_finite());
  std::mt19937_64 rng(1);
  const Image img = testsupport::random_image(64, rng);
  const auto emb = m.encode_image(base, img, nullptr);
  CHECK(emb.tokens.shape() == nk::Shape{64, 64});
  const auto logits = m.decode_mask(base, emb, m.encode_prompt(base, {10, 12, 40, 50}), nullptr);
  CHECK(logits.logits.shape() == nk::Shape{64, 64});
  const Mask bin = logits.binarize();
  CHECK(bin.width == 64);
  CHECK(bin.height == 64);
  for (std::size_t i = 0; i < bin.px.size(); ++i) CHECK_EQ(bin.px[i], logits.logits[i] > 0 ? 1 : 0);
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.lora_rank = c.d_model;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.image_size = 60;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("encode_prompt") {
  const ModelConfig cfg = testsupport::tiny_config();
  const model::MiniSam m(cfg);
  const auto base = m.init_params(4);
  const int d = cfg.d_model, half = d / 2;
  const Tensor& freq = base.get("pr.freq");
  const Tensor& corner = base.get("pr.corner");

  SUBCASE("full-image box gives the features of (0,0) and (1,1)") {
    const auto pe = m.encode_prompt(base, {0, 0, cfg.image_size, cfg.image_size});
    for (int j = 0; j < half; ++j) {
      const double ang = 2 * std::numbers::pi * (freq.at(0, j) + freq.at(1, j));
      CHECK(pe.tokens.at(0, j) - corner.at(0, j) == doctest::Approx(0.0).epsilon(1e-6));
      CHECK(pe.tokens.at(0, j + half) - corner.at(0, j + half) == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(pe.tokens.at(1, j) - corner.at(1, j) == doctest::Approx(std::sin(ang)).epsilon(1e-5));
      CHECK(pe.tokens.at(1, j + half) - corner.at(1, j + half) == doctest::Approx(std::cos(ang)).epsilon(1e-5));
    }
    CHECK(pe.dense.shape() == nk::Shape{cfg.pixels(), 1});
  }
  SUBCASE("same box gives the same tokens; corner roles are distinguished") {
    const BoxPrompt b{4, 4, 12, 12};
    CHECK(m.encode_prompt(base, b).tokens == m.encode_prompt(base, b).tokens);
    // A box whose two corners coincide in normalized features only differ by corner type.
    const auto pe = m.encode_prompt(base, {0, 0, cfg.image_size, cfg.image_size});
    bool differs = false;
    for (int j = 0; j < d; ++j) differs |= pe.tokens.at(0, j) != pe.tokens.at(1, j);
    CHECK(differs);
    CHECK(corner.at(0, 0) != corner.at(1, 0));
  }
  SUBCASE("invalid boxes") {
    CHECK_THROWS_AS(m.encode_prompt(base, {4, 4, 4, 10}), InvalidBox);
    CHECK_THROWS_AS(m.encode_prompt(base, {-1, 0, 5, 5}), InvalidBox);
    CHECK_THROWS_AS(m.encode_prompt(base, {0, 0, 5, cfg.image_size + 1}), InvalidBox);
  }
}

TEST_CASE("fresh experts leave outputs unchanged and inference is deterministic") {
  const ModelConfig cfg = testsupport::tiny_config();
  const model::MiniSam m(cfg);
  const auto base = m.init_params(8);
  std::mt19937_64 rng(8);
  const Image img = testsupport::random_image(cfg.image_size, rng);
  const BoxPrompt box{2, 3, 13, 11};
  const auto enc = lora::Expert::init(cfg, lora::ExpertKind::encoder, 1, 11);
  const auto dec = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 12);

  const auto e0 = m.encode_image(base, img, nullptr);
  const auto e1 = m.encode_image(base, img, &enc.params());
  CHECK(e0.tokens == m.encode_image(base, img, nullptr).tokens);
  for (std::size_t i = 0; i < e0.tokens.size(); ++i) CHECK(std::abs(e0.tokens[i] - e1.tokens[i]) <= 1e-6);

  const auto pe = m.encode_prompt(base, box);
  const auto l0 = m.decode_mask(base, e0, pe, nullptr);
  const auto l1 = m.decode_mask(base, e0, pe, &dec.params());
  const auto full = m.predict(base, img, box, &enc.params(), &dec.params());
  CHECK(l0.logits == m.decode_mask(base, e0, pe, nullptr).logits);
  for (std::size_t i = 0; i < l0.logits.size(); ++i) {
    CHECK(std::abs(l0.logits[i] - l1.logits[i]) <= 1e-6);
    CHECK(std::abs(l0.logits[i] - full.logits[i]) <= 1e-6);
  }
  CHECK(full.binarize() == m.predict(base, img, box, &enc.params(), &dec.params()).binarize());
}

TEST_CASE("trained-looking experts do change the output") {
  const ModelConfig cfg = testsupport::tiny_config();
  const model::MiniSam m(cfg);
  const auto base = m.init_params(8);
  std::mt19937_64 rng(9);
  const Image img = testsupport::random_image(cfg.image_size, rng);
  auto dec = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 12);
  auto& p = dec.trainable_params();
  for (int i = 0; i < p.size(); ++i) p[i] = random_tensor(p[i].shape(), rng, 0.5);
  const auto a = m.predict(base, img, {1, 1, 15, 15}, nullptr, nullptr);
  const auto b = m.predict(base, img, {1, 1, 15, 15}, nullptr, &dec.params());
  CHECK_FALSE(a.logits == b.logits);
}

TEST_CASE("size and layout errors") {
  const ModelConfig cfg = testsupport::tiny_config();
  const model::MiniSam m(cfg);
  const auto base = m.init_params(1);
  CHECK_THROWS_AS(m.encode_image(base, Image(8, 8), nullptr), std::invalid_argument);
  const model::MiniSam other(ModelConfig{});
  CHECK_THROWS_AS(other.check_params(base), model::ConfigMismatch);
  const auto enc = lora::Expert::init(cfg, lora::ExpertKind::encoder, 1, 1);
  CHECK_THROWS_AS(m.check_adapter(enc.params(), false), model::ConfigMismatch);
  const auto emb = m.encode_image(base, Image(16, 16), nullptr);
  model::PromptEmbedding bad{Tensor({2, 4}), Tensor({cfg.pixels(), 1})};
  CHECK_THROWS_AS(m.decode_mask(base, emb, bad, nullptr), model::ConfigMismatch);
}
