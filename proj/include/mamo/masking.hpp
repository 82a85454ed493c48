#pragma once

// Construction of the masked views: BERT-style 80/10/10 corruption for text
// and uniform patch dropping for images. Counts are exact per sample.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace mamo {

using Rng = std::mt19937_64;

// Independent stream for (global_seed, index, stream); order-independent.
Rng derive_rng(std::uint64_t global_seed, std::uint64_t index, std::uint64_t stream = 0);
std::uint64_t splitmix64(std::uint64_t x);

enum class TextAction : std::uint8_t { mask, random, keep };

struct TextMaskPlan {
  std::vector<std::size_t> selected_positions;  // ascending
  std::vector<TextAction> actions;
  std::vector<std::int32_t> original_ids;
  bool no_maskable_positions = false;  // set when ratio > 0 but nothing could be selected
  bool empty() const { return selected_positions.empty(); }
};

struct ImageMaskPlan {
  std::size_t num_patches = 0;
  std::vector<std::size_t> masked_positions;  // ascending, unique
  std::vector<std::size_t> visible_positions() const;
};

struct TextMaskOptions {
  std::int32_t mask_id = 3;
  std::int32_t first_word_id = 5;   // ids below are special and never selected
  std::int32_t random_id_end = 0;   // RANDOM draws from [first_word_id, random_id_end)
  double p_mask = 0.8;
  double p_random = 0.1;
};

struct MaskedText {
  std::vector<std::int32_t> ids;
  TextMaskPlan plan;
};

// Selects round(ratio * maskable) positions uniformly without replacement.
MaskedText mask_text(std::span<const std::int32_t> ids, double ratio, Rng& rng, const TextMaskOptions& opts);

// Selects floor(ratio * num_patches) unique patch indices uniformly.
ImageMaskPlan mask_image(std::size_t num_patches, double ratio, Rng& rng);

std::size_t text_mask_count(std::size_t maskable, double ratio);
std::size_t image_mask_count(std::size_t num_patches, double ratio);

}  // namespace mamo
