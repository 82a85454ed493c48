#include "mamo/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace mamo {

template <typename T>
const Tensor<T>& param(const ParamMap<T>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

namespace {

template <typename T>
class Initializer {
 public:
  Initializer(ParamMap<T>& out, std::uint64_t seed, double std) : out_(out), rng_(seed), std_(std) {}

  void normal(const std::string& name, Shape shape) {
    std::normal_distribution<double> dist(0.0, std_);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    add(name, std::move(shape), std::move(v));
  }
  void constant(const std::string& name, Shape shape, T value) {
    std::vector<T> v(numel(shape), value);
    add(name, std::move(shape), std::move(v));
  }
  void linear(const std::string& prefix, std::size_t in, std::size_t out) {
    normal(prefix + ".w", {in, out});
    constant(prefix + ".b", {out}, T(0));
  }
  void norm(const std::string& prefix, std::size_t d) {
    constant(prefix + ".gain", {d}, T(1));
    constant(prefix + ".shift", {d}, T(0));
  }
  void block(const std::string& prefix, std::size_t d, std::size_t hidden) {
    norm(prefix + ".ln1", d);
    linear(prefix + ".attn.q", d, d);
    linear(prefix + ".attn.k", d, d);
    linear(prefix + ".attn.v", d, d);
    linear(prefix + ".attn.out", d, d);
    norm(prefix + ".ln2", d);
    linear(prefix + ".mlp.fc1", d, hidden);
    linear(prefix + ".mlp.fc2", hidden, d);
  }
  void mlp(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out) {
    linear(prefix + ".fc1", in, hidden);
    linear(prefix + ".fc2", hidden, out);
  }

 private:
  void add(const std::string& name, Shape shape, std::vector<T> v) {
    if (!out_.emplace(name, Tensor<T>::parameter(std::move(shape), std::move(v))).second)
      throw std::logic_error("duplicate parameter " + name);
  }

  ParamMap<T>& out_;
  std::mt19937_64 rng_;
  double std_;
};

std::string blk(const char* enc, std::size_t i) {
  return std::string(enc) + ".blk" + std::to_string(i);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename T>
ParamMap<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamMap<T> params;
  Initializer<T> init(params, seed, cfg.init_std);
  const std::size_t d = cfg.embed_dim;
  const std::size_t hidden = cfg.mlp_ratio * d;

  init.linear("img.patch", cfg.patch_dim(), d);
  init.normal("img.cls", {d});
  init.normal("img.pos", {1 + cfg.num_patches(), d});
  init.normal("img.mask_token", {d});
  for (std::size_t i = 0; i < cfg.img_layers; ++i) init.block(blk("img", i), d, hidden);
  init.norm("img.ln_f", d);

  init.normal("txt.tok", {cfg.vocab_size, d});
  init.normal("txt.pos", {cfg.max_text_len, d});
  for (std::size_t i = 0; i < cfg.txt_layers; ++i) init.block(blk("txt", i), d, hidden);
  init.norm("txt.ln_f", d);

  for (std::size_t i = 0; i < cfg.fusion_layers; ++i) init.block(blk("fus", i), d, hidden);
  init.norm("fus.ln_f", d);

  init.mlp("head.g", d, cfg.proj_hidden_dim, d);
  init.mlp("head.mrm", d, cfg.proj_hidden_dim, d);
  for (std::size_t i = 0; i < cfg.mim_decoder_depth; ++i) init.block(blk("head.mim_dec", i), d, hidden);
  init.mlp("head.mim", d, cfg.proj_hidden_dim, cfg.mim_output_dim());
  init.linear("head.mlm", d, cfg.vocab_size);
  init.linear("head.itc_v", d, cfg.itc_proj_dim);
  init.linear("head.itc_t", d, cfg.itc_proj_dim);
  init.linear("head.itm", d, 2);
  init.constant("log_tau", {}, static_cast<T>(std::log(cfg.temperature_init)));
  return params;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& [name, t] : init_parameters<float>(cfg, 0)) n += t.size();
  return n;
}

bool excluded_from_weight_decay(const std::string& name) {
  return ends_with(name, ".b") || ends_with(name, ".gain") || ends_with(name, ".shift") || name == "log_tau";
}

template <typename T>
Tensor<T> rows_at(const Tensor<T>& seq, const std::vector<std::vector<std::size_t>>& slots) {
  if (seq.rank() != 3 || slots.size() != seq.dim(0))
    throw ShapeError("rows_at: sequence " + shape_str(seq.shape()) + " vs " + std::to_string(slots.size()) +
                     " slot lists");
  const std::size_t len = seq.dim(1);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < slots.size(); ++b) {
    for (std::size_t s : slots[b]) {
      if (s >= len) throw ShapeError("rows_at: slot " + std::to_string(s) + " beyond length " + std::to_string(len));
      rows.push_back(b * len + s);
    }
  }
  return gather_rows(seq, rows);
}

template <typename T>
Encoders<T>::Encoders(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
}

template <typename T>
Tensor<T> Encoders<T>::mlp(const ParamMap<T>& p, const std::string& prefix, const Tensor<T>& x) const {
  auto h = gelu(add_bias(matmul(x, param(p, prefix + ".fc1.w")), param(p, prefix + ".fc1.b")));
  return add_bias(matmul(h, param(p, prefix + ".fc2.w")), param(p, prefix + ".fc2.b"));
}

template <typename T>
Tensor<T> Encoders<T>::block(const ParamMap<T>& p, const std::string& prefix, const Tensor<T>& x,
                             std::span<const std::uint8_t> key_valid, AttentionTrace<T>* trace) const {
  const std::size_t B = x.dim(0);
  const std::size_t S = x.dim(1);
  const std::size_t d = cfg_.embed_dim;
  const std::size_t H = cfg_.num_heads;
  const std::size_t dh = cfg_.head_dim();
  auto lin = [&](const Tensor<T>& in, const std::string& name) {
    return add_bias(matmul(in, param(p, name + ".w")), param(p, name + ".b"));
  };
  // [B, S, d] -> [B * H, S, dh]
  auto split_heads = [&](const Tensor<T>& t) {
    return reshape(permute(reshape(t, {B, S, H, dh}), {0, 2, 1, 3}), {B * H, S, dh});
  };

  auto h = layer_norm(x, param(p, prefix + ".ln1.gain"), param(p, prefix + ".ln1.shift"));
  auto q = split_heads(lin(h, prefix + ".attn.q"));
  auto k = split_heads(lin(h, prefix + ".attn.k"));
  auto v = split_heads(lin(h, prefix + ".attn.v"));
  auto scores = reshape(scale(matmul(q, k, true), T(1) / std::sqrt(T(dh))), {B, H, S, S});
  auto attn = masked_softmax(scores, key_valid);
  if (trace) trace->layers.push_back(attn);
  auto ctx = matmul(reshape(attn, {B * H, S, S}), v);
  ctx = reshape(permute(reshape(ctx, {B, H, S, dh}), {0, 2, 1, 3}), {B, S, d});
  auto y = add(x, lin(ctx, prefix + ".attn.out"));

  auto h2 = layer_norm(y, param(p, prefix + ".ln2.gain"), param(p, prefix + ".ln2.shift"));
  return add(y, mlp(p, prefix + ".mlp", h2));
}

template <typename T>
VisualSequence<T> Encoders<T>::encode_image(const ParamMap<T>& p, const Tensor<T>& images,
                                            const std::vector<std::vector<std::size_t>>& visible) const {
  const std::size_t S = cfg_.image_size;
  const std::size_t C = cfg_.channels;
  const std::size_t ps = cfg_.patch_size;
  const std::size_t P = cfg_.num_patches();
  const std::size_t g = cfg_.grid();
  const std::size_t d = cfg_.embed_dim;
  std::size_t B = 1;
  if (images.rank() == 4 && images.dim(1) == S && images.dim(2) == S && images.dim(3) == C) {
    B = images.dim(0);
  } else if (!(images.rank() == 3 && images.dim(0) == S && images.dim(1) == S && images.dim(2) == C)) {
    throw ShapeError("encode_image: expected [" + std::to_string(S) + "," + std::to_string(S) + "," +
                     std::to_string(C) + "] images, got " + shape_str(images.shape()));
  }
  if (visible.size() != B)
    throw ShapeError("encode_image: " + std::to_string(visible.size()) + " visible lists for batch " +
                     std::to_string(B));

  VisualSequence<T> out;
  out.visible_positions = visible;
  const std::size_t nv = visible.front().size();
  for (auto& list : out.visible_positions) {
    if (list.size() != nv) throw ShapeError("encode_image: visible counts differ across the batch");
    std::sort(list.begin(), list.end());
    if (std::adjacent_find(list.begin(), list.end()) != list.end())
      throw ShapeError("encode_image: duplicate visible position");
    if (!list.empty() && list.back() >= P)
      throw ShapeError("encode_image: patch position " + std::to_string(list.back()) + " out of range [0, " +
                       std::to_string(P) + ")");
  }

  // Pixels of the visible patches only; masked pixels are never read.
  const std::size_t pd = cfg_.patch_dim();
  std::vector<T> patches(B * nv * pd);
  auto px = images.values();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < nv; ++i) {
      const std::size_t pos = out.visible_positions[b][i];
      const std::size_t pr = pos / g;
      const std::size_t pc = pos % g;
      T* dst = patches.data() + (b * nv + i) * pd;
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x)
          for (std::size_t c = 0; c < C; ++c)
            *dst++ = px[((b * S + pr * ps + y) * S + pc * ps + x) * C + c];
    }
  }
  std::vector<std::size_t> cls_rows(B, 0);
  auto cls = gather_rows(reshape(param(p, "img.cls"), {1, d}), cls_rows);
  std::vector<Tensor<T>> parts{reshape(cls, {B, 1, d})};
  if (nv > 0) {
    auto emb = add_bias(matmul(Tensor<T>::constant({B * nv, pd}, std::move(patches)), param(p, "img.patch.w")),
                        param(p, "img.patch.b"));
    parts.push_back(reshape(emb, {B, nv, d}));
  }
  auto tokens = parts.size() == 1 ? parts.front() : concat(parts, 1);
  std::vector<std::size_t> pos_rows;
  for (std::size_t b = 0; b < B; ++b) {
    pos_rows.push_back(0);
    for (std::size_t pos : out.visible_positions[b]) pos_rows.push_back(1 + pos);
  }
  auto x = add(tokens, reshape(gather_rows(param(p, "img.pos"), pos_rows), {B, 1 + nv, d}));
  std::vector<std::uint8_t> valid(B * (1 + nv), 1);
  for (std::size_t i = 0; i < cfg_.img_layers; ++i) x = block(p, blk("img", i), x, valid, nullptr);
  out.features = layer_norm(x, param(p, "img.ln_f.gain"), param(p, "img.ln_f.shift"));
  return out;
}

template <typename T>
VisualSequence<T> Encoders<T>::encode_image(const ParamMap<T>& p, const Tensor<T>& images) const {
  const std::size_t B = images.rank() == 4 ? images.dim(0) : 1;
  std::vector<std::size_t> all(cfg_.num_patches());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return encode_image(p, images, std::vector<std::vector<std::size_t>>(B, all));
}

template <typename T>
Tensor<T> Encoders<T>::insert_mask_tokens(const ParamMap<T>& p, const VisualSequence<T>& vis) const {
  const std::size_t P = cfg_.num_patches();
  const std::size_t d = cfg_.embed_dim;
  if (vis.features.rank() != 3 || vis.features.dim(2) != d)
    throw ShapeError("insert_mask_tokens: features " + shape_str(vis.features.shape()));
  const std::size_t B = vis.features.dim(0);
  const std::size_t len = vis.features.dim(1);
  if (vis.visible_positions.size() != B) throw ShapeError("insert_mask_tokens: batch/positions mismatch");
  for (const auto& list : vis.visible_positions) {
    if (list.size() + 1 != len) throw ShapeError("insert_mask_tokens: positions do not match sequence length");
    std::set<std::size_t> seen;
    for (std::size_t pos : list) {
      if (pos >= P) throw ShapeError("insert_mask_tokens: patch position out of range");
      if (!seen.insert(pos).second) throw ShapeError("insert_mask_tokens: duplicate visible position");
    }
  }
  if (len == 1 + P) return vis.features;

  // Source rows: [all encoder rows; mask_token + pos[1 + i] for every patch i].
  std::vector<std::size_t> pos_rows(P);
  for (std::size_t i = 0; i < P; ++i) pos_rows[i] = 1 + i;
  auto mask_rows = add_bias(gather_rows(param(p, "img.pos"), pos_rows), param(p, "img.mask_token"));
  auto source = concat<T>({reshape(vis.features, {B * len, d}), mask_rows}, 0);
  std::vector<std::size_t> pick;
  pick.reserve(B * (1 + P));
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::size_t> slot(P, std::size_t(-1));
    for (std::size_t j = 0; j < vis.visible_positions[b].size(); ++j) slot[vis.visible_positions[b][j]] = j;
    pick.push_back(b * len);
    for (std::size_t i = 0; i < P; ++i)
      pick.push_back(slot[i] == std::size_t(-1) ? B * len + i : b * len + 1 + slot[i]);
  }
  return reshape(gather_rows(source, pick), {B, 1 + P, d});
}

template <typename T>
TextSequence<T> Encoders<T>::encode_text(const ParamMap<T>& p, std::span<const std::int32_t> ids,
                                         std::size_t batch) const {
  if (batch == 0 || ids.size() % batch != 0) throw ShapeError("encode_text: ids do not split into the batch");
  const std::size_t L = ids.size() / batch;
  const std::size_t d = cfg_.embed_dim;
  if (L == 0 || L > cfg_.max_text_len)
    throw ShapeError("encode_text: sequence length " + std::to_string(L) + " exceeds max_text_len " +
                     std::to_string(cfg_.max_text_len));
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
      throw ShapeError("encode_text: unknown token id " + std::to_string(id));
  TextSequence<T> out;
  out.key_valid.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out.key_valid[i] = ids[i] != 0;  // [PAD] == 0
  std::vector<std::size_t> pos_rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos_rows[i] = i % L;
  auto x = add(embedding(param(p, "txt.tok"), ids), gather_rows(param(p, "txt.pos"), pos_rows));
  x = reshape(x, {batch, L, d});
  for (std::size_t i = 0; i < cfg_.txt_layers; ++i) x = block(p, blk("txt", i), x, out.key_valid, nullptr);
  out.features = layer_norm(x, param(p, "txt.ln_f.gain"), param(p, "txt.ln_f.shift"));
  return out;
}

template <typename T>
FusedSequence<T> Encoders<T>::fuse(const ParamMap<T>& p, const Tensor<T>& image_slots, const TextSequence<T>& text,
                                   bool capture_attention) const {
  const std::size_t d = cfg_.embed_dim;
  const std::size_t P = cfg_.num_patches();
  if (image_slots.rank() != 3 || image_slots.dim(2) != d || image_slots.dim(1) != 1 + P)
    throw ShapeError("fuse: image slots " + shape_str(image_slots.shape()) + " do not match embed_dim " +
                     std::to_string(d) + " and " + std::to_string(P) + " patches");
  if (text.features.rank() != 3 || text.features.dim(2) != d || text.features.dim(0) != image_slots.dim(0))
    throw ShapeError("fuse: text features " + shape_str(text.features.shape()) + " vs image slots " +
                     shape_str(image_slots.shape()));
  const std::size_t B = image_slots.dim(0);
  const std::size_t L = text.features.dim(1);
  FusedSequence<T> out;
  out.key_valid.reserve(B * (1 + P + L));
  for (std::size_t b = 0; b < B; ++b) {
    out.key_valid.insert(out.key_valid.end(), 1 + P, 1);
    out.key_valid.insert(out.key_valid.end(), text.key_valid.begin() + b * L, text.key_valid.begin() + (b + 1) * L);
  }
  if (capture_attention) out.trace.emplace();
  auto x = concat<T>({image_slots, text.features}, 1);
  for (std::size_t i = 0; i < cfg_.fusion_layers; ++i)
    x = block(p, blk("fus", i), x, out.key_valid, out.trace ? &*out.trace : nullptr);
  out.features = layer_norm(x, param(p, "fus.ln_f.gain"), param(p, "fus.ln_f.shift"));
  return out;
}

template <typename T>
Tensor<T> Encoders<T>::mim_decode(const ParamMap<T>& p, const FusedSequence<T>& fused) const {
  auto x = fused.features;
  for (std::size_t i = 0; i < cfg_.mim_decoder_depth; ++i)
    x = block(p, blk("head.mim_dec", i), x, fused.key_valid, nullptr);
  return x;
}

template <typename T>
Tensor<T> Encoders<T>::head_g(const ParamMap<T>& p, const Tensor<T>& x) const {
  return mlp(p, "head.g", x);
}

template <typename T>
Tensor<T> Encoders<T>::head_mrm(const ParamMap<T>& p, const Tensor<T>& x) const {
  return mlp(p, "head.mrm", x);
}

template <typename T>
Tensor<T> Encoders<T>::head_mim(const ParamMap<T>& p, const Tensor<T>& x) const {
  return mlp(p, "head.mim", x);
}

template <typename T>
Tensor<T> Encoders<T>::head_mlm(const ParamMap<T>& p, const Tensor<T>& x) const {
  return add_bias(matmul(x, param(p, "head.mlm.w")), param(p, "head.mlm.b"));
}

template <typename T>
Tensor<T> Encoders<T>::head_itc_v(const ParamMap<T>& p, const Tensor<T>& v_cls) const {
  return l2_normalize(add_bias(matmul(v_cls, param(p, "head.itc_v.w")), param(p, "head.itc_v.b")));
}

template <typename T>
Tensor<T> Encoders<T>::head_itc_t(const ParamMap<T>& p, const Tensor<T>& w_cls) const {
  return l2_normalize(add_bias(matmul(w_cls, param(p, "head.itc_t.w")), param(p, "head.itc_t.b")));
}

template <typename T>
Tensor<T> Encoders<T>::head_itm(const ParamMap<T>& p, const Tensor<T>& fused_cls) const {
  return add_bias(matmul(fused_cls, param(p, "head.itm.w")), param(p, "head.itm.b"));
}

template <typename T>
Tensor<T> Encoders<T>::temperature(const ParamMap<T>& p) const {
  return exp(param(p, "log_tau"));
}

template <typename T>
Tensor<T> Encoders<T>::patch_pixel_targets(const Tensor<T>& images,
                                           const std::vector<std::vector<std::size_t>>& positions) const {
  const std::size_t S = cfg_.image_size;
  const std::size_t C = cfg_.channels;
  const std::size_t ps = cfg_.patch_size;
  const std::size_t g = cfg_.grid();
  const std::size_t pd = cfg_.patch_dim();
  std::size_t total = 0;
  for (const auto& l : positions) total += l.size();
  std::vector<T> out(total * pd);
  auto px = images.values();
  std::size_t r = 0;
  for (std::size_t b = 0; b < positions.size(); ++b) {
    for (std::size_t pos : positions[b]) {
      T* dst = out.data() + r * pd;
      const std::size_t pr = pos / g;
      const std::size_t pc = pos % g;
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x)
          for (std::size_t c = 0; c < C; ++c) *dst++ = px[((b * S + pr * ps + y) * S + pc * ps + x) * C + c];
      T mu = 0;
      for (std::size_t i = 0; i < pd; ++i) mu += out[r * pd + i];
      mu /= T(pd);
      T var = 0;
      for (std::size_t i = 0; i < pd; ++i) var += (out[r * pd + i] - mu) * (out[r * pd + i] - mu);
      var /= T(pd);
      const T inv = T(1) / std::sqrt(var + T(1e-6));
      for (std::size_t i = 0; i < pd; ++i) out[r * pd + i] = (out[r * pd + i] - mu) * inv;
      ++r;
    }
  }
  return Tensor<T>::constant({total, pd}, std::move(out));
}

#define MAMO_INSTANTIATE(T)                                                                  \
  template const Tensor<T>& param(const ParamMap<T>&, const std::string&);                  \
  template ParamMap<T> init_parameters<T>(const ModelConfig&, std::uint64_t);               \
  template Tensor<T> rows_at(const Tensor<T>&, const std::vector<std::vector<std::size_t>>&); \
  template class Encoders<T>;

MAMO_INSTANTIATE(float)
MAMO_INSTANTIATE(double)

}  // namespace mamo
