#pragma once

// Image encoder, text encoder, fusion encoder and prediction heads.
//
// The network is stateless apart from its configuration: every forward
// function takes the parameter map to evaluate, so the same code computes the
// online network (theta) and the EMA target network (theta-bar).
//
// Fused layout for a batch entry: [image CLS, patch slot 0 .. P-1, text slots],
// where text slot 0 is the text [CLS]. Patch slots follow raster order.

#include "mamo/config.hpp"
#include "mamo/tensor.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mamo {

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <typename T>
const Tensor<T>& param(const ParamMap<T>& params, const std::string& name);

// Every parameter the network owns, initialised deterministically from seed.
template <typename T>
ParamMap<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed);

std::size_t parameter_count(const ModelConfig& cfg);

// Biases, normalisation gains/shifts and the temperature skip weight decay.
bool excluded_from_weight_decay(const std::string& name);

template <typename T>
struct VisualSequence {
  Tensor<T> features;                                     // [B, 1 + visible, d]; slot 0 is v_cls
  std::vector<std::vector<std::size_t>> visible_positions;  // ascending, one list per entry
  std::size_t length() const { return features.dim(1); }
};

template <typename T>
struct TextSequence {
  Tensor<T> features;                // [B, L, d]; slot 0 is w_cls
  std::vector<std::uint8_t> key_valid;  // B * L, zero at [PAD]
};

// Per-layer attention probabilities [B, heads, S, S] before head averaging.
template <typename T>
struct AttentionTrace {
  std::vector<Tensor<T>> layers;
};

template <typename T>
struct FusedSequence {
  Tensor<T> features;  // [B, 1 + P + L, d]
  std::vector<std::uint8_t> key_valid;
  std::optional<AttentionTrace<T>> trace;
};

template <typename T>
class Encoders {
 public:
  explicit Encoders(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  // images: [H, W, C] or [B, H, W, C]. Only visible patches are embedded.
  VisualSequence<T> encode_image(const ParamMap<T>& params, const Tensor<T>& images,
                                 const std::vector<std::vector<std::size_t>>& visible) const;
  // Convenience: every patch visible.
  VisualSequence<T> encode_image(const ParamMap<T>& params, const Tensor<T>& images) const;

  // Scatters the encoder outputs onto the full patch grid; masked slots hold
  // mask_token + positional embedding. Returns [B, 1 + P, d].
  Tensor<T> insert_mask_tokens(const ParamMap<T>& params, const VisualSequence<T>& vis) const;

  // ids: B rows of equal length L <= max_text_len, row-major.
  TextSequence<T> encode_text(const ParamMap<T>& params, std::span<const std::int32_t> ids,
                              std::size_t batch) const;

  FusedSequence<T> fuse(const ParamMap<T>& params, const Tensor<T>& image_slots, const TextSequence<T>& text,
                        bool capture_attention = false) const;

  // Extra transformer blocks ahead of h_mim (identity when mim_decoder_depth == 0).
  Tensor<T> mim_decode(const ParamMap<T>& params, const FusedSequence<T>& fused) const;

  // Heads operate on row stacks [R, d].
  Tensor<T> head_g(const ParamMap<T>& params, const Tensor<T>& x) const;
  Tensor<T> head_mrm(const ParamMap<T>& params, const Tensor<T>& x) const;
  Tensor<T> head_mim(const ParamMap<T>& params, const Tensor<T>& x) const;
  Tensor<T> head_mlm(const ParamMap<T>& params, const Tensor<T>& x) const;
  Tensor<T> head_itc_v(const ParamMap<T>& params, const Tensor<T>& v_cls) const;
  Tensor<T> head_itc_t(const ParamMap<T>& params, const Tensor<T>& w_cls) const;
  Tensor<T> head_itm(const ParamMap<T>& params, const Tensor<T>& fused_cls) const;

  // exp(log_tau), as a differentiable scalar.
  Tensor<T> temperature(const ParamMap<T>& params) const;

  // Flattened pixels of the given patches, each normalised to zero mean and
  // unit variance: [B * positions, patch_dim]. Used by the raw-pixel MIM target.
  Tensor<T> patch_pixel_targets(const Tensor<T>& images,
                                const std::vector<std::vector<std::size_t>>& positions) const;

 private:
  Tensor<T> block(const ParamMap<T>& params, const std::string& prefix, const Tensor<T>& x,
                  std::span<const std::uint8_t> key_valid, AttentionTrace<T>* trace) const;
  Tensor<T> mlp(const ParamMap<T>& params, const std::string& prefix, const Tensor<T>& x) const;

  ModelConfig cfg_;
};

// Rows of a [B, S, d] sequence at the given per-entry slots, entry-major: [R, d].
template <typename T>
Tensor<T> rows_at(const Tensor<T>& seq, const std::vector<std::vector<std::size_t>>& slots);

}  // namespace mamo
