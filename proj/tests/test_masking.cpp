#include "mamo/masking.hpp"

#include <doctest.h>

#include <array>
#include <cmath>
#include <set>
#include <stdexcept>

using namespace mamo;

namespace {

TextMaskOptions options() {
  TextMaskOptions o;
  o.random_id_end = 40;
  return o;
}

// [CLS] w w ... [PAD] ... with `words` maskable tokens.
std::vector<std::int32_t> sequence(std::size_t words, std::size_t pads) {
  std::vector<std::int32_t> ids{1};
  for (std::size_t i = 0; i < words; ++i) ids.push_back(static_cast<std::int32_t>(5 + i % 30));
  ids.insert(ids.end(), pads, 0);
  return ids;
}

}  // namespace

TEST_CASE("text mask counts use round, image counts use floor") {
  CHECK(text_mask_count(16, 0.25) == 4);
  CHECK(text_mask_count(6, 0.25) == 2);   // 1.5 rounds up
  CHECK(text_mask_count(5, 0.25) == 1);   // 1.25
  CHECK(text_mask_count(2, 0.25) == 1);   // 0.5 rounds away from zero
  CHECK(text_mask_count(3, 1.0) == 3);
  CHECK(image_mask_count(16, 0.75) == 12);
  CHECK(image_mask_count(10, 0.75) == 7);
  CHECK(image_mask_count(100, 0.29) == 29);
  CHECK(image_mask_count(16, 0.0) == 0);
}

TEST_CASE("sixteen maskable tokens at ratio 0.25 select exactly four") {
  Rng rng(1);
  const auto ids = sequence(16, 3);
  for (int i = 0; i < 100; ++i) {
    const auto m = mask_text(ids, 0.25, rng, options());
    REQUIRE(m.plan.selected_positions.size() == 4);
    CHECK(m.plan.actions.size() == 4);
    CHECK(m.plan.original_ids.size() == 4);
  }
}

TEST_CASE("text masking never selects specials and reflects actions") {
  Rng rng(2);
  const auto ids = sequence(9, 2);
  for (int i = 0; i < 2000; ++i) {
    const auto m = mask_text(ids, 0.5, rng, options());
    const auto& plan = m.plan;
    CHECK(std::is_sorted(plan.selected_positions.begin(), plan.selected_positions.end()));
    for (std::size_t k = 0; k < plan.selected_positions.size(); ++k) {
      const std::size_t pos = plan.selected_positions[k];
      REQUIRE(ids[pos] >= 5);
      CHECK(plan.original_ids[k] == ids[pos]);
      switch (plan.actions[k]) {
        case TextAction::mask: CHECK(m.ids[pos] == 3); break;
        case TextAction::keep: CHECK(m.ids[pos] == ids[pos]); break;
        case TextAction::random: CHECK((m.ids[pos] >= 5 && m.ids[pos] < 40)); break;
      }
    }
    for (std::size_t pos = 0; pos < ids.size(); ++pos)
      if (!std::binary_search(plan.selected_positions.begin(), plan.selected_positions.end(), pos))
        CHECK(m.ids[pos] == ids[pos]);
  }
}

TEST_CASE("ratio zero leaves text untouched") {
  Rng rng(3);
  const auto ids = sequence(8, 3);
  const auto m = mask_text(ids, 0.0, rng, options());
  CHECK(m.ids == ids);
  CHECK(m.plan.empty());
  CHECK_FALSE(m.plan.no_maskable_positions);
}

TEST_CASE("a caption without words yields a flagged empty plan") {
  Rng rng(4);
  const std::vector<std::int32_t> ids{1, 0, 0};
  const auto m = mask_text(ids, 0.25, rng, options());
  CHECK(m.plan.empty());
  CHECK(m.plan.no_maskable_positions);
  CHECK(m.ids == ids);
}

TEST_CASE("invalid ratios are rejected") {
  Rng rng(5);
  const auto ids = sequence(4, 0);
  CHECK_THROWS_AS(mask_text(ids, 1.5, rng, options()), std::invalid_argument);
  CHECK_THROWS_AS(mask_image(16, -0.1, rng), std::invalid_argument);
}

TEST_CASE("text action frequencies over 1e5 draws") {
  const auto ids = sequence(16, 0);
  std::array<double, 3> counts{};
  double total = 0;
  for (std::uint64_t i = 0; i < 100000; ++i) {
    Rng rng = derive_rng(7, i, 1);
    const auto m = mask_text(ids, 0.25, rng, options());
    for (auto a : m.plan.actions) {
      counts[static_cast<std::size_t>(a)] += 1;
      total += 1;
    }
  }
  CHECK(std::abs(counts[0] / total - 0.8) < 0.005);
  CHECK(std::abs(counts[1] / total - 0.1) < 0.005);
  CHECK(std::abs(counts[2] / total - 0.1) < 0.005);
}

TEST_CASE("per-patch image masking frequency over 1e5 draws") {
  std::array<double, 16> hits{};
  for (std::uint64_t i = 0; i < 100000; ++i) {
    Rng rng = derive_rng(8, i, 2);
    const auto plan = mask_image(16, 0.75, rng);
    REQUIRE(plan.masked_positions.size() == 12);
    for (auto p : plan.masked_positions) hits[p] += 1;
  }
  for (double h : hits) CHECK(std::abs(h / 100000 - 0.75) < 0.01);
}

TEST_CASE("image plans are unique, in range and complement the visible set") {
  Rng rng(9);
  for (int i = 0; i < 500; ++i) {
    const auto plan = mask_image(16, 0.75, rng);
    const std::set<std::size_t> uniq(plan.masked_positions.begin(), plan.masked_positions.end());
    CHECK(uniq.size() == 12);
    CHECK(*uniq.rbegin() < 16);
    const auto vis = plan.visible_positions();
    CHECK(vis.size() == 4);
    for (auto v : vis) CHECK(uniq.count(v) == 0);
  }
  CHECK(mask_image(16, 0.0, rng).masked_positions.empty());
}

TEST_CASE("same seed gives identical plans, streams are independent of order") {
  const auto ids = sequence(10, 1);
  auto a = derive_rng(11, 5, 1), b = derive_rng(11, 5, 1);
  const auto ma = mask_text(ids, 0.25, a, options());
  const auto mb = mask_text(ids, 0.25, b, options());
  CHECK(ma.ids == mb.ids);
  CHECK(ma.plan.selected_positions == mb.plan.selected_positions);
  CHECK(derive_rng(11, 5, 1)() == derive_rng(11, 5, 1)());
  CHECK(derive_rng(11, 5, 1)() != derive_rng(11, 6, 1)());
  CHECK(derive_rng(11, 5, 1)() != derive_rng(11, 5, 2)());
  CHECK(derive_rng(11, 5, 1)() != derive_rng(12, 5, 1)());
}
