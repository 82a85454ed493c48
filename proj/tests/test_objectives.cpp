#include "mamo/objectives.hpp"
#include "mamo/pretraining.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <stdexcept>

using namespace mamo;
using testing::random_const;

namespace {

Tensor<double> tau(double v) { return Tensor<double>::scalar(v); }

SimilarityMatrix sim_of(std::size_t n, std::vector<double> s, double t = 1.0) {
  SimilarityMatrix m;
  m.n = n;
  m.s = std::move(s);
  m.tau = t;
  return m;
}

}  // namespace

TEST_CASE("mrm loss") {
  std::mt19937_64 rng(1);
  const auto t = random_const({5, 6}, rng);
  CHECK(mrm_loss(t, t).item() == 0.0);
  CHECK(mrm_loss(add(t, Tensor<double>::scalar(1.0)), t).item() == doctest::Approx(1.0).epsilon(1e-14));
  const auto pred = Tensor<double>::constant({1, 2}, {1, 2});
  CHECK(mrm_loss(pred, Tensor<double>::zeros({1, 2})).item() == 2.5);
  CHECK(mrm_loss(Tensor<double>::zeros({0, 4}), Tensor<double>::zeros({0, 4})).item() == 0.0);
  CHECK_THROWS_AS(mrm_loss(pred, Tensor<double>::zeros({2, 1})), ShapeError);
}

TEST_CASE("mim loss") {
  std::mt19937_64 rng(2);
  const auto t = random_const({4, 3}, rng);
  CHECK(mim_loss(t, t).item() == 0.0);
  CHECK(mim_loss(sub(t, Tensor<double>::scalar(0.3)), t).item() == doctest::Approx(0.3).epsilon(1e-14));
  CHECK(mim_loss(Tensor<double>::constant({1, 2}, {1, -1}), Tensor<double>::constant({1, 2}, {0, 1})).item() == 1.5);
  CHECK(mim_loss(Tensor<double>::zeros({0, 4}), Tensor<double>::zeros({0, 4})).item() == 0.0);
}

TEST_CASE("masked regression losses ignore the enumeration order of positions") {
  std::mt19937_64 rng(3);
  const auto p = random_const({6, 4}, rng);
  const auto t = random_const({6, 4}, rng);
  const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  const auto pp = gather_rows(p, perm), tp = gather_rows(t, perm);
  CHECK(mrm_loss(pp, tp).item() == doctest::Approx(mrm_loss(p, t).item()).epsilon(1e-15));
  CHECK(mim_loss(pp, tp).item() == doctest::Approx(mim_loss(p, t).item()).epsilon(1e-15));
}

TEST_CASE("mlm loss") {
  const std::vector<std::int32_t> ids{7, 0, 39};
  CHECK(std::abs(mlm_loss(Tensor<double>::zeros({3, 40}), ids).item() - std::log(40.0)) < 1e-9);
  std::vector<double> confident(3 * 40, 0.0);
  for (std::size_t r = 0; r < 3; ++r) confident[r * 40 + static_cast<std::size_t>(ids[r])] = 30;
  CHECK(mlm_loss(Tensor<double>::constant({3, 40}, confident), ids).item() < 1e-9);
  const std::vector<std::int32_t> two{2};
  CHECK(mlm_loss(Tensor<double>::constant({1, 3}, {1, 2, 3}), two).item() == doctest::Approx(0.40761).epsilon(1e-5));
  CHECK(mlm_loss(Tensor<double>::zeros({0, 40}), std::span<const std::int32_t>{}).item() == 0.0);
}

TEST_CASE("itc loss on uniform similarities is ln N") {
  for (std::size_t n : {2u, 4u, 8u}) {
    const double got = itc_loss_from_similarity(Tensor<double>::zeros({n, n}), tau(0.07)).item();
    CHECK(std::abs(got - std::log(static_cast<double>(n))) < 1e-10);
  }
  CHECK(itc_loss_from_similarity(Tensor<double>::full({1, 1}, 0.3), tau(0.5)).item() == 0.0);
}

TEST_CASE("itc loss hand evaluation") {
  const auto s = Tensor<double>::constant({2, 2}, {2, 0, 0, 2});
  CHECK(itc_loss_from_similarity(s, tau(1.0)).item() ==
        doctest::Approx(-std::log(std::exp(2.0) / (std::exp(2.0) + 1))).epsilon(1e-14));
  CHECK(itc_loss_from_similarity(s, tau(1.0)).item() == doctest::Approx(0.1269).epsilon(1e-3));
}

TEST_CASE("itc loss depends on similarity over temperature only") {
  std::mt19937_64 rng(4);
  const auto s = random_const({5, 5}, rng);
  for (double c : {0.5, 2.0, 7.0}) {
    const double a = itc_loss_from_similarity(scale(s, c), tau(0.1)).item();
    const double b = itc_loss_from_similarity(s, tau(0.1 / c)).item();
    CHECK(std::abs(a - b) < 1e-10);
  }
}

TEST_CASE("itc loss errors") {
  CHECK_THROWS_AS(itc_loss_from_similarity(Tensor<double>::zeros({2, 3}), tau(1)), ShapeError);
  CHECK_THROWS_AS(itc_loss_from_similarity(Tensor<double>::zeros({2, 2}), tau(0)), std::invalid_argument);
  CHECK_THROWS_AS(itc_loss_from_similarity(Tensor<double>::zeros({2, 2}), tau(-1)), std::invalid_argument);
}

TEST_CASE("itc loss from embeddings uses the dot product") {
  const auto img = Tensor<double>::constant({2, 2}, {1, 0, 0, 1});
  const auto txt = Tensor<double>::constant({2, 2}, {1, 0, 0, 1});
  CHECK(itc_loss(img, txt, tau(0.5)).item() == doctest::Approx(-std::log(std::exp(2.0) / (std::exp(2.0) + 1))));
}

TEST_CASE("itm loss") {
  const std::vector<std::int32_t> labels{kItmMatch, kItmNoMatch, kItmNoMatch};
  CHECK(itm_loss(Tensor<double>::zeros({3, 2}), labels).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(itm_loss(Tensor<double>::constant({3, 2}, {-40, 40, 40, -40, 40, -40}), labels).item() < 1e-15);
  const std::vector<std::int32_t> pos{kItmMatch};
  CHECK(itm_loss(Tensor<double>::constant({1, 2}, {0, 2}), pos).item() ==
        doctest::Approx(-std::log(std::exp(2.0) / (std::exp(2.0) + 1))).epsilon(1e-14));
  CHECK_THROWS_AS(itm_loss(Tensor<double>::zeros({2, 2}), labels), ShapeError);
}

TEST_CASE("total loss is the unit-weight sum") {
  CHECK(total_loss(0, 0, 0, 0, 0).total == 0.0);
  CHECK(total_loss(1, 2, 3, 4, 5).total == 15.0);
  const auto b = total_loss(0.1, 0.2, 0.3, 0.4, 0.5);
  CHECK(b.total == 0.1 + 0.2 + 0.3 + 0.4 + 0.5);
  try {
    total_loss(0, 0, std::nan(""), 0, 0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("mlm") != std::string::npos);
  }
}

TEST_CASE("hard negative mining") {
  Rng rng(5);
  SUBCASE("two pairs leave one choice") {
    const auto neg = mine_hard_negatives(sim_of(2, {1, 5, -3, 1}), rng);
    CHECK(neg.text_for_image == std::vector<std::size_t>{1, 0});
    CHECK(neg.image_for_text == std::vector<std::size_t>{1, 0});
  }
  SUBCASE("argmax picks the most similar non-matching entry") {
    const auto neg = mine_hard_negatives(sim_of(3, {9, 0.9, 0.1, 0.2, 9, 0.3, 0.5, 0.1, 9}), rng, MiningMode::argmax);
    CHECK(neg.text_for_image == std::vector<std::size_t>{1, 2, 0});
    CHECK(neg.image_for_text == std::vector<std::size_t>{2, 0, 1});
  }
  SUBCASE("never the diagonal") {
    std::mt19937_64 g(6);
    for (int trial = 0; trial < 200; ++trial) {
      const auto s = testing::random_values(25, g, -1, 1);
      const auto neg = mine_hard_negatives(sim_of(5, s, 0.05), rng);
      for (std::size_t i = 0; i < 5; ++i) {
        CHECK(neg.text_for_image[i] != i);
        CHECK(neg.image_for_text[i] != i);
      }
    }
  }
  SUBCASE("sampling frequencies follow the masked softmax") {
    const auto m = sim_of(4, {0.9, 0.5, 0.1, -0.2, 0.3, 0.8, 0.7, 0.0, 0.2, 0.6, 0.5, 0.4, 0.1, -0.1, 0.35, 0.6}, 0.2);
    const auto p_img = negative_distribution(m, 0, true);
    const auto p_txt = negative_distribution(m, 2, false);
    CHECK(p_img[0] == 0.0);
    CHECK(std::accumulate(p_img.begin(), p_img.end(), 0.0) == doctest::Approx(1.0));
    std::vector<double> hi(4, 0), ht(4, 0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
      const auto neg = mine_hard_negatives(m, rng);
      hi[neg.text_for_image[0]] += 1.0 / draws;
      ht[neg.image_for_text[2]] += 1.0 / draws;
    }
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(std::abs(hi[j] - p_img[j]) < 0.01);
      CHECK(std::abs(ht[j] - p_txt[j]) < 0.01);
    }
  }
  CHECK_THROWS_AS(mine_hard_negatives(sim_of(1, {1}), rng), std::invalid_argument);
}

TEST_CASE("every online parameter receives gradient from the full objective, no target entry does") {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.img_layers = 1;
  cfg.txt_layers = 1;
  cfg.fusion_layers = 1;
  cfg.proj_hidden_dim = 8;
  cfg.itc_proj_dim = 4;
  cfg.mlp_ratio = 2;
  Encoders<double> enc(cfg);
  auto pair = init_target(init_parameters<double>(cfg, 7));
  const auto batch = make_batch(std::vector<std::uint64_t>{1, 2, 3, 4}, MaskingConfig{}, cfg, 0, 0);
  Rng rng(8);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  const auto losses = pretraining_losses(enc, pair, batch, LossOptions{}, rng);
  CHECK(losses.bundle.total ==
        losses.bundle.mrm + losses.bundle.mim + losses.bundle.mlm + losses.bundle.itc + losses.bundle.itm);
  tape.backward(losses.total);
  for (const auto& [name, t] : pair.online) {
    INFO(name);
    CHECK(t.has_grad());
  }
  for (const auto& [name, t] : pair.target) CHECK_FALSE(t.has_grad());
}

TEST_CASE("disabled tasks drop out of the objective") {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.img_layers = 1;
  cfg.txt_layers = 1;
  cfg.fusion_layers = 1;
  cfg.proj_hidden_dim = 8;
  cfg.itc_proj_dim = 4;
  cfg.mlp_ratio = 2;
  Encoders<double> enc(cfg);
  auto pair = init_target(init_parameters<double>(cfg, 7));
  const auto batch = make_batch(std::vector<std::uint64_t>{1, 2, 3}, MaskingConfig{}, cfg, 0, 0);
  LossOptions opts;
  opts.tasks = TaskSet::parse("itc,itm");
  Rng rng(8);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  const auto losses = pretraining_losses(enc, pair, batch, opts, rng);
  CHECK(losses.bundle.mrm == 0.0);
  CHECK(losses.bundle.mim == 0.0);
  CHECK(losses.bundle.mlm == 0.0);
  CHECK_FALSE(losses.mrm.defined());
  CHECK(losses.bundle.total == losses.bundle.itc + losses.bundle.itm);
  tape.backward(losses.total);
  CHECK_FALSE(pair.online.at("head.mlm.w").has_grad());
  CHECK_FALSE(pair.online.at("img.mask_token").has_grad());
  CHECK(pair.online.at("head.itm.w").has_grad());
}
