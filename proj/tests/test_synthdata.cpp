#include "mamo/imageio.hpp"
#include "mamo/synthdata.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

using namespace mamo;

namespace {

struct Mention {
  std::string color, shape;
};

std::vector<std::size_t> matches(const SceneSpec& spec, const Mention& m) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < spec.objects.size(); ++k) {
    const auto& o = spec.objects[k];
    if (kColorNames[static_cast<int>(o.color)] == m.color && kShapeNames[static_cast<int>(o.shape)] == m.shape)
      out.push_back(k);
  }
  return out;
}

// Independent reading of the caption grammar
//   a C S | a C S (above | left of) a C S [and C S]
// true when some one-to-one assignment of mentions to objects covers the
// scene and satisfies the relation.
bool caption_is_true(const std::string& caption, const SceneSpec& spec) {
  std::istringstream in(caption);
  std::vector<std::string> w;
  for (std::string s; in >> s;) w.push_back(s);
  std::size_t i = 0;
  auto take = [&](const std::string& expect) { return i < w.size() && w[i++] == expect; };
  auto mention = [&](bool article) -> std::optional<Mention> {
    if (article && !take("a")) return std::nullopt;
    if (i + 2 > w.size()) return std::nullopt;
    Mention m{w[i], w[i + 1]};
    i += 2;
    return m;
  };
  std::vector<Mention> mentions;
  std::string relation;
  auto first = mention(true);
  if (!first) return false;
  mentions.push_back(*first);
  if (i < w.size()) {
    if (w[i] == "above") {
      relation = "above";
      ++i;
    } else if (take("left") && take("of")) {
      relation = "left of";
    } else {
      return false;
    }
    auto second = mention(true);
    if (!second) return false;
    mentions.push_back(*second);
    if (i < w.size()) {
      if (!take("and")) return false;
      auto third = mention(false);
      if (!third) return false;
      mentions.push_back(*third);
    }
  }
  if (i != w.size() || mentions.size() != spec.objects.size()) return false;
  std::vector<std::vector<std::size_t>> cand;
  for (const auto& m : mentions) cand.push_back(matches(spec, m));
  std::vector<std::size_t> pick(mentions.size());
  std::function<bool(std::size_t)> search = [&](std::size_t k) -> bool {
    if (k == mentions.size()) {
      if (relation.empty()) return true;
      const auto& a = spec.objects[pick[0]];
      const auto& b = spec.objects[pick[1]];
      return relation == "above" ? a.cell / 2 < b.cell / 2 : a.cell % 2 < b.cell % 2;
    }
    for (std::size_t c : cand[k]) {
      if (std::find(pick.begin(), pick.begin() + k, c) != pick.begin() + k) continue;
      pick[k] = c;
      if (search(k + 1)) return true;
    }
    return false;
  };
  return search(0);
}

}  // namespace

TEST_CASE("same seed renders the same pair") {
  const auto a = generate_pair(42), b = generate_pair(42);
  CHECK(a.image == b.image);
  CHECK(a.caption == b.caption);
  CHECK(a.spec == b.spec);
  CHECK(a.image.size() == 32 * 32 * 3);
  for (float v : a.image) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("scenes hold one to three objects in distinct cells") {
  std::map<std::size_t, int> counts;
  for (std::uint64_t s = 0; s < 3000; ++s) {
    const auto spec = sample_scene(s);
    REQUIRE((spec.objects.size() >= 1 && spec.objects.size() <= 3));
    std::set<int> cells;
    for (const auto& o : spec.objects) cells.insert(o.cell);
    CHECK(cells.size() == spec.objects.size());
    ++counts[spec.objects.size()];
  }
  CHECK(counts.size() == 3);
  CHECK(sample_scene(7, 2).objects.size() == 2);
  CHECK_THROWS(sample_scene(7, 4));
}

TEST_CASE("captions are truthful and inside the vocabulary") {
  for (std::uint64_t s = 0; s < 5000; ++s) {
    const auto p = generate_pair(s);
    INFO(p.caption);
    CHECK(caption_is_true(p.caption, p.spec));
    std::istringstream in(p.caption);
    for (std::string w; in >> w;) CHECK(vocabulary().id(w) != Vocabulary::kUnk);
  }
}

TEST_CASE("the truth oracle rejects false captions") {
  SceneSpec spec;
  spec.objects = {{ShapeKind::circle, Color::red, 0}, {ShapeKind::square, Color::blue, 2}};
  CHECK(caption_is_true("a red circle above a blue square", spec));
  CHECK_FALSE(caption_is_true("a blue square above a red circle", spec));
  CHECK_FALSE(caption_is_true("a red circle left of a blue square", spec));
  CHECK_FALSE(caption_is_true("a green circle above a blue square", spec));
}

TEST_CASE("vocabulary specials and size") {
  const auto& v = vocabulary();
  CHECK(v.token(0) == "[PAD]");
  CHECK(v.token(1) == "[CLS]");
  CHECK(v.token(2) == "[SEP]");
  CHECK(v.token(3) == "[MASK]");
  CHECK(v.token(4) == "[UNK]");
  CHECK(v.size() <= ModelConfig{}.vocab_size);
  CHECK(v.id("zebra") == Vocabulary::kUnk);
  CHECK(v.id("[PAD]") == Vocabulary::kUnk);
}

TEST_CASE("tokenize pads to the maximum length") {
  const auto ids = tokenize("a red circle", 12);
  REQUIRE(ids.size() == 12);
  const auto& v = vocabulary();
  CHECK(ids[0] == Vocabulary::kCls);
  CHECK(ids[1] == v.id("a"));
  CHECK(ids[2] == v.id("red"));
  CHECK(ids[3] == v.id("circle"));
  for (std::size_t i = 4; i < 12; ++i) CHECK(ids[i] == Vocabulary::kPad);
  CHECK(tokenize("a purple circle", 12)[2] == Vocabulary::kUnk);
  CHECK(tokenize("a a a a a", 3).size() == 3);
}

TEST_CASE("detokenize inverts tokenize across the template space") {
  std::set<std::string> seen;
  for (std::uint64_t s = 0; s < 10000; ++s) seen.insert(generate_pair(s).caption);
  for (const char* c : kColorNames)
    for (const char* sh : kShapeNames) seen.insert(std::string("a ") + c + " " + sh);
  for (const auto& c : seen) {
    INFO(c);
    CHECK(detokenize(tokenize(c, 12)) == c);
  }
}

TEST_CASE("held-out contents never occur in training") {
  std::set<std::uint64_t> train, heldout;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const auto spec = sample_scene(s);
    (split_of(spec) == Split::train ? train : heldout).insert(spec.content_hash());
  }
  CHECK(!heldout.empty());
  for (auto h : heldout) CHECK(train.count(h) == 0);
  const auto seeds = split_seeds(Split::heldout, 50);
  CHECK(seeds.size() == 50);
  for (auto s : seeds) CHECK(split_of(sample_scene(s)) == Split::heldout);
}

TEST_CASE("content hash ignores jitter and seed") {
  auto a = sample_scene(3);
  auto b = a;
  b.seed = 99;
  for (auto& o : b.objects) o.dx += 0.5f;
  CHECK(a.content_hash() == b.content_hash());
  b.objects[0].color = b.objects[0].color == Color::red ? Color::blue : Color::red;
  CHECK(a.content_hash() != b.content_hash());
}

TEST_CASE("shape and colour combinations are balanced") {
  std::map<std::pair<int, int>, double> freq;
  double objects = 0;
  for (std::uint64_t s = 0; s < 10000; ++s)
    for (const auto& o : sample_scene(s).objects) {
      freq[{static_cast<int>(o.shape), static_cast<int>(o.color)}] += 1;
      objects += 1;
    }
  REQUIRE(freq.size() == 16);
  for (const auto& [k, n] : freq) CHECK(std::abs(n / objects - 1.0 / 16) < 0.2 / 16);
}

TEST_CASE("different content gives different pixels") {
  SceneSpec a;
  a.objects = {{ShapeKind::circle, Color::red, 1}};
  auto b = a;
  b.objects[0].color = Color::green;
  auto c = a;
  c.objects[0].shape = ShapeKind::square;
  double dab = 0, dac = 0;
  const auto ia = render(a), ib = render(b), ic = render(c);
  for (std::size_t i = 0; i < ia.size(); ++i) {
    dab += (ia[i] - ib[i]) * (ia[i] - ib[i]);
    dac += (ia[i] - ic[i]) * (ia[i] - ic[i]);
  }
  CHECK(dab > 0);
  CHECK(dac > 0);
}

TEST_CASE("objects are drawn inside their grid cell") {
  SceneSpec spec;
  spec.objects = {{ShapeKind::square, Color::blue, 3}};
  const auto img = render(spec);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      if (y < 16 || x < 16) CHECK(img[(y * 32 + x) * 3] == 0.5f);
}

TEST_CASE("make_batch stacks pairs and attaches per-sample plans") {
  const ModelConfig model;
  const MaskingConfig masking;
  const std::vector<std::uint64_t> seeds{3, 5, 8, 13};
  const auto batch = make_batch(seeds, masking, model, 77, 100);
  CHECK(batch.size == 4);
  CHECK(batch.text_len == 12);
  CHECK(batch.images.size() == 4 * 32 * 32 * 3);
  CHECK(batch.ids.size() == 48);
  CHECK(batch.text_plans.size() == 4);
  CHECK(batch.image_plans.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(batch.image_plans[i].masked_positions.size() == image_mask_count(16, 0.75));
    std::size_t words = 0;
    for (std::size_t t = 0; t < 12; ++t) words += batch.ids[i * 12 + t] >= Vocabulary::kFirstWord;
    CHECK(batch.text_plans[i].selected_positions.size() == text_mask_count(words, 0.25));
    CHECK(batch.sample_indices[i] == 100 + i);
  }
  // Plans depend on (global seed, sample index) only, not on batch composition.
  const auto shifted = make_batch(std::vector<std::uint64_t>{5, 8}, masking, model, 77, 101);
  CHECK(shifted.image_plans[0].masked_positions == batch.image_plans[1].masked_positions);
  CHECK(shifted.text_plans[1].selected_positions == batch.text_plans[2].selected_positions);
  CHECK_THROWS_AS(make_batch(std::vector<std::uint64_t>{3}, masking, model, 77, 0), std::invalid_argument);
}

TEST_CASE("corpus export writes images and an index") {
  const auto dir = std::filesystem::temp_directory_path() / "mamo_export_test";
  std::filesystem::remove_all(dir);
  const auto corpus = build_corpus({1, 2, 3}, 12);
  export_corpus(corpus, dir);
  CHECK(std::filesystem::exists(dir / "0.ppm"));
  CHECK(std::filesystem::exists(dir / "2.ppm"));
  std::ifstream index(dir / "index.tsv");
  std::string header, line;
  std::getline(index, header);
  CHECK(header == "id\tcaption\tseed");
  std::getline(index, line);
  CHECK(line == "0\t" + corpus[0].caption + "\t1");
  std::filesystem::remove_all(dir);
}
