#pragma once

// Pretraining losses: masked representation modeling (MSE against projected
// target-network features), masked image modeling (L1 against momentum
// image-encoder features), masked language modeling, image-text contrastive
// InfoNCE and image-text matching with in-batch hard negatives.

#include "mamo/masking.hpp"
#include "mamo/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mamo {

// Row stacks [R, D]. An empty stack contributes 0 and logs a warning.
template <typename T> Tensor<T> mrm_loss(const Tensor<T>& predictions, const Tensor<T>& targets);
template <typename T> Tensor<T> mim_loss(const Tensor<T>& predictions, const Tensor<T>& targets);
template <typename T> Tensor<T> mlm_loss(const Tensor<T>& logits, std::span<const std::int32_t> original_ids);

// Symmetric InfoNCE over logits sim / tau with diagonal targets.
template <typename T> Tensor<T> itc_loss_from_similarity(const Tensor<T>& sim, const Tensor<T>& tau);
// image_embeds, text_embeds: [N, e], unit rows.
template <typename T>
Tensor<T> itc_loss(const Tensor<T>& image_embeds, const Tensor<T>& text_embeds, const Tensor<T>& tau);

inline constexpr std::int32_t kItmNoMatch = 0;
inline constexpr std::int32_t kItmMatch = 1;

// Mean two-class cross-entropy; logits [3N, 2].
template <typename T> Tensor<T> itm_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels);

struct SimilarityMatrix {
  std::size_t n = 0;
  std::vector<double> s;  // row-major, s[i * n + j] = s(I_i, T_j)
  double tau = 1.0;
  double at(std::size_t i, std::size_t j) const { return s[i * n + j]; }
};

enum class MiningMode { sample, argmax };

struct HardNegatives {
  std::vector<std::size_t> text_for_image;
  std::vector<std::size_t> image_for_text;
};

// Negative probabilities: softmax of s / tau over the row (texts for an image)
// or column (images for a text) with the matched pair excluded.
std::vector<double> negative_distribution(const SimilarityMatrix& sim, std::size_t index, bool image_query);
HardNegatives mine_hard_negatives(const SimilarityMatrix& sim, Rng& rng, MiningMode mode = MiningMode::sample);

struct LossBundle {
  double mrm = 0;
  double mim = 0;
  double mlm = 0;
  double itc = 0;
  double itm = 0;
  double total = 0;
  bool operator==(const LossBundle&) const = default;
};

// Unit-weight sum. Throws NumericError naming the first non-finite component.
LossBundle total_loss(double mrm, double mim, double mlm, double itc, double itm);

}  // namespace mamo
