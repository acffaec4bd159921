#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "evosam/lora/lora.hpp"
#include "evosam/model/model.hpp"
#include "support.hpp"

using namespace evosam;
using nk::Tensor;

namespace {

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("init: A is N(0, 0.02^2), B is zero, seeded") {
  const ModelConfig cfg;
  const auto e = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 77);
  CHECK(e.params() == lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 77).params());
  CHECK_FALSE(e.params() == lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 78).params());
  double sum = 0, sq = 0;
  std::size_t n = 0;
  // Several experts, so at least 10^4 A entries.
  for (std::uint64_t seed = 100; seed < 104; ++seed) {
    const auto x = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, seed);
    for (int i = 0; i < x.params().size(); ++i) {
      const auto& t = x.params()[i];
      if (x.params().name(i).back() == 'B') {
        for (auto v : t.data()) CHECK(v == 0);
        continue;
      }
      for (auto v : t.data()) {
        sum += v;
        sq += double(v) * v;
        ++n;
      }
    }
  }
  REQUIRE(n >= 10000);
  const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
  // Standard error of the mean is sigma / sqrt(n).
  CHECK(std::abs(mean) < 3 * lora::kInitStd / std::sqrt(double(n)));
  CHECK(sd == doctest::Approx(lora::kInitStd).epsilon(0.05));
}

TEST_CASE("layout: Q and V pairs for every attention slot") {
  const ModelConfig cfg;
  CHECK(lora::attention_slots(cfg, lora::ExpertKind::encoder) == cfg.enc_layers);
  CHECK(lora::attention_slots(cfg, lora::ExpertKind::decoder) == 3 * cfg.dec_layers);
  const auto e = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 1);
  REQUIRE(e.params().size() == 4 * 3 * cfg.dec_layers);
  for (int s = 0; s < 3 * cfg.dec_layers; ++s) {
    const auto ix = lora::slot_index(s);
    CHECK(e.params()[ix.q_a].shape() == nk::Shape{cfg.d_model, cfg.lora_rank});
    CHECK(e.params()[ix.q_b].shape() == nk::Shape{cfg.lora_rank, cfg.d_model});
    CHECK(e.params()[ix.v_a].shape() == nk::Shape{cfg.d_model, cfg.lora_rank});
    CHECK(e.params()[ix.v_b].shape() == nk::Shape{cfg.lora_rank, cfg.d_model});
  }
}

TEST_CASE("parameter count of one decoder expert") {
  const ModelConfig cfg;
  const auto e = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 1);
  const std::size_t expected = std::size_t(3 * cfg.dec_layers) * 2 * 2 * cfg.d_model * cfg.lora_rank;
  CHECK(e.parameter_count() == expected);
  const std::size_t total = model::MiniSam(cfg).init_params(1).total_elements();
  CHECK(double(expected) / double(total) < 0.02);
}

TEST_CASE("merged_weight") {
  const Tensor w({2, 2}, {1, 0, 0, 1});
  const Tensor a({2, 1}, {1, 1});
  const Tensor b({1, 2}, {1, 0});
  CHECK(lora::merged_weight(w, a, b) == Tensor({2, 2}, {2, 0, 1, 1}));
  CHECK(lora::merged_weight(w, a, Tensor({1, 2})) == w);

  std::mt19937_64 rng(5);
  const Tensor W = testsupport::random_tensor({4, 4}, rng), A = testsupport::random_tensor({4, 2}, rng),
               B = testsupport::random_tensor({2, 4}, rng);
  Tensor B2 = B;
  for (auto& v : B2.data()) v *= 2;
  const Tensor m1 = lora::merged_weight(W, A, B), m2 = lora::merged_weight(W, A, B2);
  for (std::size_t i = 0; i < W.size(); ++i) CHECK(m2[i] - W[i] == doctest::Approx(2 * (m1[i] - W[i])).epsilon(1e-5));

  CHECK_THROWS_AS(lora::merged_weight(W, A, Tensor({2, 3})), nk::ShapeError);
}

TEST_CASE("freezing and cloning") {
  const ModelConfig cfg = testsupport::tiny_config();
  auto e1 = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 3);
  CHECK_THROWS_AS(e1.clone_for_task(2), std::logic_error);
  e1.freeze();
  CHECK_THROWS_AS(e1.trainable_params(), lora::FrozenExpertError);
  const auto before = nk::to_bytes(e1.params());

  auto e2 = e1.clone_for_task(2);
  CHECK(e2.task_index() == 2);
  CHECK_FALSE(e2.frozen());
  CHECK(e2.params() == e1.params());
  e2.trainable_params()[0][0] += 1.0f;
  CHECK(nk::to_bytes(e1.params()) == before);

  lora::ExpertPool pool;
  pool.push_decoder(std::move(e1));
  CHECK_THROWS_AS(pool.push_decoder(lora::Expert::init(cfg, lora::ExpertKind::decoder, 3, 1)), std::invalid_argument);
  pool.push_decoder(std::move(e2));
  CHECK(pool.size() == 2);
  CHECK_THROWS_AS(pool.decoder(3), std::out_of_range);
  CHECK_THROWS_AS(pool.encoder(), std::logic_error);
  CHECK_THROWS_AS(pool.set_encoder(lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 1)), std::invalid_argument);
}

TEST_CASE("pool save/load keeps bytes, indices and freeze flags") {
  const ModelConfig cfg = testsupport::tiny_config();
  lora::ExpertPool pool;
  auto enc = lora::Expert::init(cfg, lora::ExpertKind::encoder, 1, 1);
  enc.freeze();
  pool.set_encoder(std::move(enc));
  auto d1 = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, 2);
  d1.freeze();
  auto d2 = d1.clone_for_task(2);
  d2.trainable_params()[1][0] = 0.25f;
  pool.push_decoder(std::move(d1));
  pool.push_decoder(std::move(d2));

  testsupport::TempDir dir("pool");
  pool.save(dir.path / "a");
  const auto back = lora::ExpertPool::load(dir.path / "a");
  REQUIRE(back.size() == 2);
  CHECK(back.encoder().frozen());
  CHECK(back.decoder(1).frozen());
  CHECK_FALSE(back.decoder(2).frozen());
  CHECK(back.decoder(2).task_index() == 2);
  CHECK(back.encoder().params() == pool.encoder().params());
  CHECK(back.decoder(2).params() == pool.decoder(2).params());
  back.save(dir.path / "b");
  for (const char* f : {"encoder.bin", "decoder_1.bin", "decoder_2.bin"})
    CHECK(file_bytes(dir.path / "a" / f) == file_bytes(dir.path / "b" / f));

  CHECK_THROWS(lora::ExpertPool::load(dir.path / "missing"));
}
