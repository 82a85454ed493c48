#include "mamo/pretraining.hpp"

#include <stdexcept>

namespace mamo {

template <typename T>
Tensor<T> batch_images(const MaskedBatch& batch, const ModelConfig& cfg) {
  const std::size_t S = cfg.image_size;
  const std::size_t C = cfg.channels;
  if (batch.images.size() != batch.size * S * S * C)
    throw ShapeError("batch_images: pixel buffer does not match " + std::to_string(batch.size) + " images of " +
                     std::to_string(S) + "x" + std::to_string(S) + "x" + std::to_string(C));
  return Tensor<T>::constant({batch.size, S, S, C}, std::vector<T>(batch.images.begin(), batch.images.end()));
}

std::vector<std::vector<std::size_t>> masked_patch_slots(const MaskedBatch& batch) {
  std::vector<std::vector<std::size_t>> out(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t pos : batch.image_plans[b].masked_positions) out[b].push_back(1 + pos);
  return out;
}

std::vector<std::vector<std::size_t>> masked_text_slots(const MaskedBatch& batch, std::size_t num_patches) {
  std::vector<std::vector<std::size_t>> out(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t pos : batch.text_plans[b].selected_positions) out[b].push_back(1 + num_patches + pos);
  return out;
}

namespace {

// Entries of a [B, S, d] stack picked along the batch axis.
template <typename T>
Tensor<T> select_entries(const Tensor<T>& x, const std::vector<std::size_t>& entries) {
  const std::size_t B = x.dim(0);
  const std::size_t S = x.dim(1);
  const std::size_t d = x.dim(2);
  return reshape(gather_rows(reshape(x, {B, S * d}), entries), {entries.size(), S, d});
}

std::vector<std::uint8_t> select_valid(const std::vector<std::uint8_t>& valid, std::size_t len,
                                       const std::vector<std::size_t>& entries) {
  std::vector<std::uint8_t> out;
  for (std::size_t e : entries) out.insert(out.end(), valid.begin() + e * len, valid.begin() + (e + 1) * len);
  return out;
}

// Slot lists for a stacked batch of `total` entries where entries
// [offset, offset + slots.size()) take the given slots and the rest none.
std::vector<std::vector<std::size_t>> place_slots(std::size_t total, std::size_t offset,
                                                  const std::vector<std::vector<std::size_t>>& slots) {
  std::vector<std::vector<std::size_t>> out(total);
  for (std::size_t i = 0; i < slots.size(); ++i) out[offset + i] = slots[i];
  return out;
}

template <typename T>
double mean_feature_variance(const std::vector<Tensor<T>>& parts) {
  std::size_t rows = 0;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (!p.defined() || p.size() == 0) continue;
    rows += p.dim(0);
    cols = p.dim(1);
  }
  if (rows < 2) return 0.0;
  std::vector<double> mean(cols, 0.0), sq(cols, 0.0);
  for (const auto& p : parts) {
    if (!p.defined() || p.size() == 0) continue;
    auto v = p.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      mean[i % cols] += v[i];
      sq[i % cols] += static_cast<double>(v[i]) * v[i];
    }
  }
  double total = 0;
  for (std::size_t c = 0; c < cols; ++c) {
    const double m = mean[c] / rows;
    total += sq[c] / rows - m * m;
  }
  return total / cols;
}

}  // namespace

template <typename T>
StepLosses<T> pretraining_losses(const Encoders<T>& enc, const ParameterPair<T>& pair, const MaskedBatch& batch,
                                 const LossOptions& opts, Rng& rng) {
  const ModelConfig& cfg = enc.config();
  const TaskSet& tasks = opts.tasks;
  const std::size_t B = batch.size;
  const std::size_t P = cfg.num_patches();
  if (B < 2) throw std::invalid_argument("pretraining_losses: batch size must be at least 2");
  if (!(tasks.mrm || tasks.mim || tasks.mlm || tasks.itc || tasks.itm))
    throw std::invalid_argument("pretraining_losses: no task enabled");

  const ParamMap<T>& theta = pair.online;
  const auto images = batch_images<T>(batch, cfg);
  const auto patch_slots = masked_patch_slots(batch);
  const auto text_slots = masked_text_slots(batch, P);
  const bool image_view = tasks.needs_image_masked_view();
  const bool text_view = tasks.needs_text_masked_view();
  const bool momentum_mim = tasks.mim && cfg.mim_target == MimTarget::momentum;
  StepLosses<T> out;

  // (a) target network on the unmasked pair; constants to the loss.
  Tensor<T> mrm_target_img, mrm_target_txt, mim_target;
  if (tasks.mrm || momentum_mim) {
    target_forward(pair, [&](const ParamMap<T>& tp) {
      auto vis = enc.encode_image(tp, images);
      if (momentum_mim) mim_target = rows_at(vis.features, patch_slots);
      if (tasks.mrm) {
        auto txt = enc.encode_text(tp, batch.ids, B);
        auto fused = enc.fuse(tp, enc.insert_mask_tokens(tp, vis), txt);
        mrm_target_img = enc.head_g(tp, rows_at(fused.features, patch_slots));
        mrm_target_txt = enc.head_g(tp, rows_at(fused.features, text_slots));
      }
      return 0;
    });
  }
  if (tasks.mim && cfg.mim_target == MimTarget::pixels) {
    std::vector<std::vector<std::size_t>> positions;
    for (const auto& plan : batch.image_plans) positions.push_back(plan.masked_positions);
    mim_target = enc.patch_pixel_targets(images, positions);
  }
  out.target_variance = mean_feature_variance<T>({mrm_target_img, mrm_target_txt});

  // (b) online unmasked encodings, shared by ITC, ITM and the untouched side of each masked view.
  const bool need_vis = tasks.itc || tasks.itm || text_view;
  const bool need_txt = tasks.itc || tasks.itm || image_view;
  VisualSequence<T> vis;
  TextSequence<T> txt;
  if (need_vis) vis = enc.encode_image(theta, images);
  if (need_txt) txt = enc.encode_text(theta, batch.ids, B);
  const std::vector<std::vector<std::size_t>> cls_slots(B, std::vector<std::size_t>{0});

  Tensor<T> img_emb, txt_emb;
  if (tasks.itc || (tasks.itm && !opts.fixed_negatives)) {
    img_emb = enc.head_itc_v(theta, rows_at(vis.features, cls_slots));
    txt_emb = enc.head_itc_t(theta, rows_at(txt.features, cls_slots));
  }
  if (tasks.itc) out.itc = itc_loss(img_emb, txt_emb, enc.temperature(theta));

  // Fusion inputs of the step, stacked along the batch axis.
  std::vector<Tensor<T>> image_parts, text_parts;
  std::vector<std::uint8_t> text_valid;
  auto push = [&](const Tensor<T>& img, const Tensor<T>& t, const std::vector<std::uint8_t>& valid) {
    image_parts.push_back(img);
    text_parts.push_back(t);
    text_valid.insert(text_valid.end(), valid.begin(), valid.end());
    return (image_parts.size() - 1) * B;
  };
  const std::size_t L = batch.text_len;

  std::size_t itm_offset = 0;
  if (tasks.itm) {
    if (opts.fixed_negatives) {
      out.negatives = opts.fixed_negatives;
    } else {
      SimilarityMatrix sim;
      sim.n = B;
      auto sim_t = matmul(img_emb, txt_emb, true);
      sim.s.assign(sim_t.values().begin(), sim_t.values().end());
      sim.tau = static_cast<double>(enc.temperature(theta).item());
      out.negatives = mine_hard_negatives(sim, rng, opts.mining);
    }
    const HardNegatives& neg = *out.negatives;
    if (neg.text_for_image.size() != B || neg.image_for_text.size() != B)
      throw std::invalid_argument("pretraining_losses: negatives do not match the batch");
    itm_offset = push(vis.features, txt.features, txt.key_valid);
    push(vis.features, select_entries(txt.features, neg.text_for_image),
         select_valid(txt.key_valid, L, neg.text_for_image));
    push(select_entries(vis.features, neg.image_for_text), txt.features, txt.key_valid);
  }
  std::size_t image_view_offset = 0;
  if (image_view) {
    std::vector<std::vector<std::size_t>> visible;
    for (const auto& plan : batch.image_plans) visible.push_back(plan.visible_positions());
    auto masked_vis = enc.encode_image(theta, images, visible);
    image_view_offset = push(enc.insert_mask_tokens(theta, masked_vis), txt.features, txt.key_valid);
  }
  std::size_t text_view_offset = 0;
  if (text_view) {
    auto masked_txt = enc.encode_text(theta, batch.masked_ids, B);
    text_view_offset = push(vis.features, masked_txt.features, masked_txt.key_valid);
  }

  if (!image_parts.empty()) {
    const std::size_t total = image_parts.size() * B;
    TextSequence<T> stacked_text{image_parts.size() == 1 ? text_parts.front() : concat(text_parts, 0), text_valid};
    auto fused = enc.fuse(theta, image_parts.size() == 1 ? image_parts.front() : concat(image_parts, 0),
                          stacked_text);

    if (tasks.itm) {
      std::vector<std::vector<std::size_t>> slots(total);
      for (std::size_t e = 0; e < 3 * B; ++e) slots[itm_offset + e] = {0};
      auto logits = enc.head_itm(theta, rows_at(fused.features, slots));
      std::vector<std::int32_t> labels(3 * B, kItmNoMatch);
      std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(B), kItmMatch);
      out.itm = itm_loss(logits, labels);
    }
    auto mrm_pred = [&](const Tensor<T>& rows) {
      auto g = enc.head_g(theta, rows);
      return opts.use_predictor ? enc.head_mrm(theta, g) : g;
    };
    if (image_view) {
      const auto slots = place_slots(total, image_view_offset, patch_slots);
      if (tasks.mrm) out.mrm = mrm_loss(mrm_pred(rows_at(fused.features, slots)), mrm_target_img);
      if (tasks.mim) {
        Tensor<T> decoded = fused.features;
        if (cfg.mim_decoder_depth > 0) {
          std::vector<std::size_t> entries(B);
          for (std::size_t b = 0; b < B; ++b) entries[b] = image_view_offset + b;
          const std::size_t S = fused.features.dim(1);
          FusedSequence<T> view{select_entries(fused.features, entries), select_valid(fused.key_valid, S, entries),
                                std::nullopt};
          decoded = enc.mim_decode(theta, view);
          out.mim = mim_loss(enc.head_mim(theta, rows_at(decoded, patch_slots)), mim_target);
        } else {
          out.mim = mim_loss(enc.head_mim(theta, rows_at(decoded, slots)), mim_target);
        }
      }
    }
    if (text_view) {
      const auto slots = place_slots(total, text_view_offset, text_slots);
      if (tasks.mrm) {
        auto mrm_text = mrm_loss(mrm_pred(rows_at(fused.features, slots)), mrm_target_txt);
        out.mrm = out.mrm.defined() ? add(out.mrm, mrm_text) : mrm_text;
      }
      if (tasks.mlm) {
        std::vector<std::int32_t> original;
        for (const auto& plan : batch.text_plans)
          original.insert(original.end(), plan.original_ids.begin(), plan.original_ids.end());
        out.mlm = mlm_loss(enc.head_mlm(theta, rows_at(fused.features, slots)), original);
      }
    }
  }

  // Unit-weight sum of the enabled components.
  auto value = [](const Tensor<T>& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; };
  for (const Tensor<T>* t : {&out.mrm, &out.mim, &out.mlm, &out.itc, &out.itm}) {
    if (!t->defined()) continue;
    out.total = out.total.defined() ? add(out.total, *t) : *t;
  }
  out.bundle = total_loss(value(out.mrm), value(out.mim), value(out.mlm), value(out.itc), value(out.itm));
  return out;
}

#define MAMO_INSTANTIATE(T)                                                                  \
  template Tensor<T> batch_images(const MaskedBatch&, const ModelConfig&);                  \
  template StepLosses<T> pretraining_losses(const Encoders<T>&, const ParameterPair<T>&,    \
                                            const MaskedBatch&, const LossOptions&, Rng&);

MAMO_INSTANTIATE(float)
MAMO_INSTANTIATE(double)

}  // namespace mamo
