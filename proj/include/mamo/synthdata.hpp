#pragma once

// Procedural image-caption corpus: coloured shapes on a 2x2 grid with truthful
// captions, a closed whitespace vocabulary, and masked batch assembly.

#include "mamo/config.hpp"
#include "mamo/masking.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mamo {

enum class ShapeKind : std::uint8_t { circle, square, triangle, cross };
enum class Color : std::uint8_t { red, green, blue, yellow };

inline constexpr std::array<const char*, 4> kShapeNames{"circle", "square", "triangle", "cross"};
inline constexpr std::array<const char*, 4> kColorNames{"red", "green", "blue", "yellow"};

inline constexpr std::size_t kSynthImageSize = 32;
inline constexpr std::size_t kSynthChannels = 3;
inline constexpr std::size_t kCellSize = kSynthImageSize / 2;

struct SceneObject {
  ShapeKind shape;
  Color color;
  std::uint8_t cell;  // row * 2 + col on the 2x2 grid
  float dx = 0;       // sub-cell placement jitter, pixels
  float dy = 0;
  float radius = 6;
  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;  // 1..3, distinct cells
  std::uint64_t seed = 0;
  // Content identity: (cell, shape, color) triples, ignoring jitter and seed.
  std::uint64_t content_hash() const;
  bool operator==(const SceneSpec&) const = default;
};

enum class Split { train, heldout };

// Held-out scenes are those whose content hash falls in one tenth of the
// hash space, so train and held-out contents never coincide.
Split split_of(const SceneSpec& spec);

struct ScenePair {
  std::vector<float> image;  // [32, 32, 3] in [0, 1]
  std::string caption;
  SceneSpec spec;
};

// object_count 0 draws 1..3 uniformly.
SceneSpec sample_scene(std::uint64_t seed, std::size_t object_count = 0);
std::vector<float> render(const SceneSpec& spec);
std::string describe(const SceneSpec& spec);
ScenePair generate_pair(std::uint64_t seed, std::size_t object_count = 0);

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kCls = 1;
  static constexpr std::int32_t kSep = 2;
  static constexpr std::int32_t kMask = 3;
  static constexpr std::int32_t kUnk = 4;
  static constexpr std::int32_t kFirstWord = 5;

  Vocabulary();
  std::size_t size() const { return tokens_.size(); }
  std::int32_t id(const std::string& token) const;  // kUnk when absent
  const std::string& token(std::int32_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
};

const Vocabulary& vocabulary();

// [CLS] w1 .. wn [PAD]...; words beyond max_len - 1 are dropped.
std::vector<std::int32_t> tokenize(const std::string& caption, std::size_t max_len);
std::string detokenize(std::span<const std::int32_t> ids);

struct Example {
  std::vector<float> image;
  std::vector<std::int32_t> ids;
  std::string caption;
  SceneSpec spec;
};

Example make_example(const ScenePair& pair, std::size_t max_len);

// The first `count` seeds (scanning upward from `first_seed`) whose scene falls in `split`.
std::vector<std::uint64_t> split_seeds(Split split, std::size_t count, std::uint64_t first_seed = 0,
                                       std::size_t object_count = 0);
std::vector<Example> build_corpus(const std::vector<std::uint64_t>& seeds, std::size_t max_len,
                                  std::size_t object_count = 0);

struct MaskedBatch {
  std::size_t size = 0;
  std::size_t text_len = 0;
  std::vector<float> images;               // [B, 32, 32, 3]
  std::vector<std::int32_t> ids;           // [B, L] original tokens
  std::vector<std::int32_t> masked_ids;    // [B, L] text-masked view
  std::vector<TextMaskPlan> text_plans;
  std::vector<ImageMaskPlan> image_plans;
  std::vector<std::uint64_t> sample_indices;
};

inline constexpr std::uint64_t kTextMaskStream = 1;
inline constexpr std::uint64_t kImageMaskStream = 2;

// Mask plans for entry i come from derive_rng(global_seed, first_sample_index + i).
MaskedBatch make_batch(const std::vector<const Example*>& examples, const MaskingConfig& masking,
                       std::size_t num_patches, std::uint64_t global_seed, std::uint64_t first_sample_index);
MaskedBatch make_batch(const std::vector<std::uint64_t>& seeds, const MaskingConfig& masking,
                       const ModelConfig& model, std::uint64_t global_seed, std::uint64_t first_sample_index);

// Writes <dir>/<id>.ppm per pair and <dir>/index.tsv (id, caption, seed).
void export_corpus(const std::vector<Example>& corpus, const std::filesystem::path& dir);

}  // namespace mamo
