#include "mamo/synthdata.hpp"

#include "mamo/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace mamo {

namespace {

constexpr std::array<std::array<float, 3>, 4> kRgb{{
    {0.90f, 0.12f, 0.10f},  // red
    {0.10f, 0.75f, 0.15f},  // green
    {0.12f, 0.25f, 0.92f},  // blue
    {0.95f, 0.88f, 0.10f},  // yellow
}};
constexpr float kBackground = 0.5f;
constexpr int kSupersample = 4;

std::uint64_t fnv1a(std::uint64_t h, std::uint8_t byte) {
  return (h ^ byte) * 0x100000001B3ull;
}

bool inside(ShapeKind shape, float x, float y, float r) {
  switch (shape) {
    case ShapeKind::circle:
      return x * x + y * y <= r * r;
    case ShapeKind::square:
      return std::abs(x) <= 0.85f * r && std::abs(y) <= 0.85f * r;
    case ShapeKind::triangle:
      // Apex up; image y grows downward.
      return y >= -r && y <= r && std::abs(x) <= 0.5f * (y + r);
    case ShapeKind::cross: {
      const float arm = 0.3f * r;
      return (std::abs(x) <= arm && std::abs(y) <= r) || (std::abs(y) <= arm && std::abs(x) <= r);
    }
  }
  return false;
}

std::string phrase(const SceneObject& o, bool article = true) {
  return std::string(article ? "a " : "") + kColorNames[static_cast<int>(o.color)] + " " +
         kShapeNames[static_cast<int>(o.shape)];
}

int row_of(const SceneObject& o) { return o.cell / 2; }
int col_of(const SceneObject& o) { return o.cell % 2; }

}  // namespace

std::uint64_t SceneSpec::content_hash() const {
  std::vector<std::tuple<int, int, int>> content;
  for (const auto& o : objects) content.emplace_back(o.cell, static_cast<int>(o.shape), static_cast<int>(o.color));
  std::sort(content.begin(), content.end());
  std::uint64_t h = 0xCBF29CE484222325ull;
  h = fnv1a(h, static_cast<std::uint8_t>(content.size()));
  for (auto [c, s, col] : content) {
    h = fnv1a(h, static_cast<std::uint8_t>(c));
    h = fnv1a(h, static_cast<std::uint8_t>(s));
    h = fnv1a(h, static_cast<std::uint8_t>(col));
  }
  return splitmix64(h);
}

Split split_of(const SceneSpec& spec) {
  return spec.content_hash() % 10 == 0 ? Split::heldout : Split::train;
}

SceneSpec sample_scene(std::uint64_t seed, std::size_t object_count) {
  if (object_count > 3) throw std::invalid_argument("sample_scene: at most 3 objects fit the grid");
  Rng rng = derive_rng(seed, 0, 0x5CE7E);
  SceneSpec spec;
  spec.seed = seed;
  std::uniform_int_distribution<int> count_dist(1, 3);
  const std::size_t n = object_count ? object_count : static_cast<std::size_t>(count_dist(rng));
  std::array<std::uint8_t, 4> cells{0, 1, 2, 3};
  std::shuffle(cells.begin(), cells.end(), rng);
  std::uniform_int_distribution<int> kind(0, 3);
  std::uniform_real_distribution<float> jitter(-1.5f, 1.5f);
  std::uniform_real_distribution<float> radius(5.0f, 6.5f);
  for (std::size_t i = 0; i < n; ++i) {
    SceneObject o{static_cast<ShapeKind>(kind(rng)), static_cast<Color>(kind(rng)), cells[i]};
    o.dx = jitter(rng);
    o.dy = jitter(rng);
    o.radius = radius(rng);
    spec.objects.push_back(o);
  }
  std::sort(spec.objects.begin(), spec.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  return spec;
}

std::vector<float> render(const SceneSpec& spec) {
  const std::size_t S = kSynthImageSize;
  std::vector<float> img(S * S * kSynthChannels, kBackground);
  for (const auto& o : spec.objects) {
    const float cx = static_cast<float>(col_of(o) * kCellSize) + kCellSize / 2.0f + o.dx;
    const float cy = static_cast<float>(row_of(o) * kCellSize) + kCellSize / 2.0f + o.dy;
    const auto& rgb = kRgb[static_cast<int>(o.color)];
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSupersample; ++sy)
          for (int sx = 0; sx < kSupersample; ++sx) {
            const float px = static_cast<float>(x) + (static_cast<float>(sx) + 0.5f) / kSupersample - cx;
            const float py = static_cast<float>(y) + (static_cast<float>(sy) + 0.5f) / kSupersample - cy;
            hits += inside(o.shape, px, py, o.radius);
          }
        if (hits == 0) continue;
        const float a = static_cast<float>(hits) / (kSupersample * kSupersample);
        for (std::size_t c = 0; c < kSynthChannels; ++c) {
          float& v = img[(y * S + x) * kSynthChannels + c];
          v = (1.0f - a) * v + a * rgb[c];
        }
      }
    }
  }
  return img;
}

std::string describe(const SceneSpec& spec) {
  const auto& objs = spec.objects;
  if (objs.empty() || objs.size() > 3) throw std::invalid_argument("describe: scene needs 1..3 objects");
  if (objs.size() == 1) return phrase(objs[0]);
  // Every true (subject, relation, object) statement over ordered pairs.
  struct Statement {
    std::size_t subject, object;
    const char* relation;
  };
  std::vector<Statement> candidates;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    for (std::size_t j = 0; j < objs.size(); ++j) {
      if (i == j) continue;
      if (row_of(objs[i]) < row_of(objs[j])) candidates.push_back({i, j, "above"});
      if (col_of(objs[i]) < col_of(objs[j])) candidates.push_back({i, j, "left of"});
    }
  }
  Rng rng = derive_rng(spec.seed, 1, 0xCA9710);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  const Statement st = candidates[pick(rng)];
  std::string out = phrase(objs[st.subject]) + " " + st.relation + " " + phrase(objs[st.object]);
  for (std::size_t k = 0; k < objs.size(); ++k)
    if (k != st.subject && k != st.object) out += " and " + phrase(objs[k], false);
  return out;
}

ScenePair generate_pair(std::uint64_t seed, std::size_t object_count) {
  SceneSpec spec = sample_scene(seed, object_count);
  return {render(spec), describe(spec), std::move(spec)};
}

Vocabulary::Vocabulary()
    : tokens_{"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "a",      "red",   "green", "blue",
              "yellow", "circle", "square", "triangle", "cross", "above", "left", "of",    "and"} {}

std::int32_t Vocabulary::id(const std::string& token) const {
  for (std::size_t i = kFirstWord; i < tokens_.size(); ++i)
    if (tokens_[i] == token) return static_cast<std::int32_t>(i);
  return kUnk;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

const Vocabulary& vocabulary() {
  static const Vocabulary vocab;
  return vocab;
}

std::vector<std::int32_t> tokenize(const std::string& caption, std::size_t max_len) {
  if (max_len < 1) throw std::invalid_argument("tokenize: max_len must hold [CLS]");
  std::vector<std::int32_t> ids{Vocabulary::kCls};
  std::istringstream in(caption);
  std::string word;
  while (in >> word && ids.size() < max_len) ids.push_back(vocabulary().id(word));
  ids.resize(max_len, Vocabulary::kPad);
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  for (auto id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kCls || id == Vocabulary::kSep) continue;
    if (!out.empty()) out += ' ';
    out += vocabulary().token(id);
  }
  return out;
}

Example make_example(const ScenePair& pair, std::size_t max_len) {
  return {pair.image, tokenize(pair.caption, max_len), pair.caption, pair.spec};
}

std::vector<std::uint64_t> split_seeds(Split split, std::size_t count, std::uint64_t first_seed,
                                       std::size_t object_count) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t s = first_seed; out.size() < count; ++s)
    if (split_of(sample_scene(s, object_count)) == split) out.push_back(s);
  return out;
}

std::vector<Example> build_corpus(const std::vector<std::uint64_t>& seeds, std::size_t max_len,
                                  std::size_t object_count) {
  std::vector<Example> out;
  out.reserve(seeds.size());
  for (auto s : seeds) out.push_back(make_example(generate_pair(s, object_count), max_len));
  return out;
}

MaskedBatch make_batch(const std::vector<const Example*>& examples, const MaskingConfig& masking,
                       std::size_t num_patches, std::uint64_t global_seed, std::uint64_t first_sample_index) {
  if (examples.size() < 2) throw std::invalid_argument("make_batch: need at least 2 pairs for in-batch negatives");
  MaskedBatch batch;
  batch.size = examples.size();
  batch.text_len = examples.front()->ids.size();
  TextMaskOptions opts;
  opts.random_id_end = static_cast<std::int32_t>(vocabulary().size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& ex = *examples[i];
    if (ex.ids.size() != batch.text_len) throw std::invalid_argument("make_batch: token sequences differ in length");
    const std::uint64_t index = first_sample_index + i;
    batch.images.insert(batch.images.end(), ex.image.begin(), ex.image.end());
    batch.ids.insert(batch.ids.end(), ex.ids.begin(), ex.ids.end());
    Rng text_rng = derive_rng(global_seed, index, kTextMaskStream);
    MaskedText mt = mask_text(ex.ids, masking.text_ratio, text_rng, opts);
    batch.masked_ids.insert(batch.masked_ids.end(), mt.ids.begin(), mt.ids.end());
    batch.text_plans.push_back(std::move(mt.plan));
    Rng image_rng = derive_rng(global_seed, index, kImageMaskStream);
    batch.image_plans.push_back(mask_image(num_patches, masking.image_ratio, image_rng));
    batch.sample_indices.push_back(index);
  }
  return batch;
}

MaskedBatch make_batch(const std::vector<std::uint64_t>& seeds, const MaskingConfig& masking,
                       const ModelConfig& model, std::uint64_t global_seed, std::uint64_t first_sample_index) {
  const auto corpus = build_corpus(seeds, model.max_text_len);
  std::vector<const Example*> ptrs;
  for (const auto& ex : corpus) ptrs.push_back(&ex);
  return make_batch(ptrs, masking, model.num_patches(), global_seed, first_sample_index);
}

void export_corpus(const std::vector<Example>& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.tsv");
  if (!index) throw std::runtime_error("cannot write " + (dir / "index.tsv").string());
  index << "id\tcaption\tseed\n";
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    write_ppm(dir / (std::to_string(i) + ".ppm"), corpus[i].image, kSynthImageSize, kSynthImageSize);
    index << i << '\t' << corpus[i].caption << '\t' << corpus[i].spec.seed << '\n';
  }
}

}  // namespace mamo
