#pragma once

// The joint pretraining objective evaluated on one masked batch.
//
// Four network evaluations per step: the target network on (I, T) and the
// online network on (I, T), (I-hat, T) and (I, T-hat). The online unmasked
// image and text encodings are shared by the masked views that leave that
// modality intact, and every fused sequence of the step (ITM positives, ITM
// negatives, both masked views) goes through one batched fusion call.

#include "mamo/config.hpp"
#include "mamo/distillation.hpp"
#include "mamo/encoders.hpp"
#include "mamo/objectives.hpp"
#include "mamo/synthdata.hpp"

#include <optional>

namespace mamo {

struct LossOptions {
  TaskSet tasks;
  bool use_predictor = true;
  MiningMode mining = MiningMode::sample;
  std::optional<HardNegatives> fixed_negatives;  // bypasses mining when set
};

template <typename T>
struct StepLosses {
  // Undefined tensors for disabled tasks; total is always defined.
  Tensor<T> mrm, mim, mlm, itc, itm, total;
  LossBundle bundle;
  std::optional<HardNegatives> negatives;
  double target_variance = 0;  // mean per-dimension variance of the MRM targets
};

template <typename T>
Tensor<T> batch_images(const MaskedBatch& batch, const ModelConfig& cfg);

// Fused-sequence slots of each entry's masked patches / selected text positions.
std::vector<std::vector<std::size_t>> masked_patch_slots(const MaskedBatch& batch);
std::vector<std::vector<std::size_t>> masked_text_slots(const MaskedBatch& batch, std::size_t num_patches);

// Records on the active tape (if any). Call Tape::backward on `total`.
template <typename T>
StepLosses<T> pretraining_losses(const Encoders<T>& enc, const ParameterPair<T>& pair, const MaskedBatch& batch,
                                 const LossOptions& opts, Rng& rng);

}  // namespace mamo
