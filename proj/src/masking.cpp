#include "mamo/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mamo {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

Rng derive_rng(std::uint64_t global_seed, std::uint64_t index, std::uint64_t stream) {
  const std::uint64_t s = splitmix64(splitmix64(splitmix64(global_seed) ^ index) ^ (stream * 0xD6E8FEB86659FD93ull));
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
  return Rng(seq);
}

std::vector<std::size_t> ImageMaskPlan::visible_positions() const {
  std::vector<std::size_t> out;
  out.reserve(num_patches - masked_positions.size());
  std::size_t j = 0;
  for (std::size_t i = 0; i < num_patches; ++i) {
    if (j < masked_positions.size() && masked_positions[j] == i) {
      ++j;
      continue;
    }
    out.push_back(i);
  }
  return out;
}

std::size_t text_mask_count(std::size_t maskable, double ratio) {
  return std::min(maskable, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(maskable))));
}

std::size_t image_mask_count(std::size_t num_patches, double ratio) {
  // The epsilon keeps products like 0.29 * 100 from flooring one short.
  return std::min(num_patches, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(num_patches) + 1e-9)));
}

namespace {

void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("mask ratio must lie in [0, 1]");
}

// First k entries of a partial Fisher-Yates shuffle.
std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

MaskedText mask_text(std::span<const std::int32_t> ids, double ratio, Rng& rng, const TextMaskOptions& opts) {
  check_ratio(ratio);
  if (opts.random_id_end <= opts.first_word_id)
    throw std::invalid_argument("mask_text: random_id_end must exceed first_word_id");
  MaskedText out{std::vector<std::int32_t>(ids.begin(), ids.end()), {}};
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] >= opts.first_word_id) maskable.push_back(i);
  if (maskable.empty()) {
    out.plan.no_maskable_positions = ratio > 0.0;
    return out;
  }
  const std::size_t k = text_mask_count(maskable.size(), ratio);
  out.plan.selected_positions = sample_without_replacement(std::move(maskable), k, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> word(opts.first_word_id, opts.random_id_end - 1);
  for (std::size_t pos : out.plan.selected_positions) {
    const double r = u(rng);
    out.plan.original_ids.push_back(ids[pos]);
    if (r < opts.p_mask) {
      out.plan.actions.push_back(TextAction::mask);
      out.ids[pos] = opts.mask_id;
    } else if (r < opts.p_mask + opts.p_random) {
      out.plan.actions.push_back(TextAction::random);
      out.ids[pos] = word(rng);
    } else {
      out.plan.actions.push_back(TextAction::keep);
    }
  }
  return out;
}

ImageMaskPlan mask_image(std::size_t num_patches, double ratio, Rng& rng) {
  check_ratio(ratio);
  ImageMaskPlan plan;
  plan.num_patches = num_patches;
  std::vector<std::size_t> pool(num_patches);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  plan.masked_positions = sample_without_replacement(std::move(pool), image_mask_count(num_patches, ratio), rng);
  return plan;
}

}  // namespace mamo
