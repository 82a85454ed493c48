#include "mamo/evalviz.hpp"

#include "mamo/imageio.hpp"
#include "mamo/objectives.hpp"
#include "mamo/pretraining.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mamo {

// ---- retrieval -------------------------------------------------------------

std::string RetrievalReport::csv_header() {
  return "n,rerank_k,t2i_r1,t2i_r5,t2i_r10,i2t_r1,i2t_r5,i2t_r10";
}

std::string RetrievalReport::csv_row() const {
  std::ostringstream os;
  os << std::setprecision(6) << n << ',' << rerank_k << ',' << t2i_r1 << ',' << t2i_r5 << ',' << t2i_r10 << ','
     << i2t_r1 << ',' << i2t_r5 << ',' << i2t_r10;
  return os.str();
}

std::vector<std::size_t> rerank_order(std::span<const double> itc, std::span<const double> itm, std::size_t k) {
  if (itm.size() != itc.size()) throw std::invalid_argument("rerank_order: score vectors differ in length");
  std::vector<std::size_t> order(itc.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return itc[a] > itc[b]; });
  const auto head = order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size()));
  std::stable_sort(order.begin(), head, [&](std::size_t a, std::size_t b) { return itm[a] > itm[b]; });
  return order;
}

double recall_at(const std::vector<std::vector<std::size_t>>& orders, std::size_t at) {
  if (orders.empty()) throw std::invalid_argument("recall_at: no queries");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < orders.size(); ++q) {
    const auto& o = orders[q];
    const auto end = o.begin() + static_cast<std::ptrdiff_t>(std::min(at, o.size()));
    if (std::find(o.begin(), end, q) != end) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(orders.size());
}

RetrievalReport retrieval_from_scores(std::span<const double> itc, std::span<const double> itm, std::size_t n,
                                      std::size_t rerank_k) {
  if (n == 0) throw std::invalid_argument("retrieval: empty gallery");
  if (itc.size() != n * n || itm.size() != n * n) throw std::invalid_argument("retrieval: score matrices must be n x n");
  if (rerank_k > n) throw std::invalid_argument("retrieval: rerank_k exceeds the gallery size");
  std::vector<std::vector<std::size_t>> t2i(n), i2t(n);
  std::vector<double> a(n), b(n);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t c = 0; c < n; ++c) {
      a[c] = itc[c * n + q];
      b[c] = itm[c * n + q];
    }
    t2i[q] = rerank_order(a, b, rerank_k);
    for (std::size_t c = 0; c < n; ++c) {
      a[c] = itc[q * n + c];
      b[c] = itm[q * n + c];
    }
    i2t[q] = rerank_order(a, b, rerank_k);
  }
  RetrievalReport r;
  r.n = n;
  r.rerank_k = rerank_k;
  r.t2i_r1 = recall_at(t2i, 1);
  r.t2i_r5 = recall_at(t2i, 5);
  r.t2i_r10 = recall_at(t2i, 10);
  r.i2t_r1 = recall_at(i2t, 1);
  r.i2t_r5 = recall_at(i2t, 5);
  r.i2t_r10 = recall_at(i2t, 10);
  return r;
}

namespace {

Tensor<float> gallery_images(const std::vector<Example>& gallery, const ModelConfig& cfg) {
  std::vector<float> pixels;
  for (const auto& e : gallery) pixels.insert(pixels.end(), e.image.begin(), e.image.end());
  return Tensor<float>::constant({gallery.size(), cfg.image_size, cfg.image_size, cfg.channels}, std::move(pixels));
}

std::vector<std::int32_t> gallery_ids(const std::vector<Example>& gallery) {
  std::vector<std::int32_t> ids;
  for (const auto& e : gallery) ids.insert(ids.end(), e.ids.begin(), e.ids.end());
  return ids;
}

template <typename T>
Tensor<T> select_entries(const Tensor<T>& x, const std::vector<std::size_t>& entries) {
  const std::size_t B = x.dim(0);
  const std::size_t S = x.dim(1);
  const std::size_t d = x.dim(2);
  return reshape(gather_rows(reshape(x, {B, S * d}), entries), {entries.size(), S, d});
}

}  // namespace

std::vector<double> itc_scores(const Encoders<float>& enc, const ParamMap<float>& params,
                               const std::vector<Example>& gallery) {
  typename Tape<float>::Pause pause;
  const std::size_t n = gallery.size();
  if (n == 0) throw std::invalid_argument("retrieval: empty gallery");
  auto vis = enc.encode_image(params, gallery_images(gallery, enc.config()));
  auto txt = enc.encode_text(params, gallery_ids(gallery), n);
  const std::vector<std::vector<std::size_t>> cls(n, std::vector<std::size_t>{0});
  auto img = enc.head_itc_v(params, rows_at(vis.features, cls));
  auto tx = enc.head_itc_t(params, rows_at(txt.features, cls));
  auto sim = matmul(img, tx, true);
  const double tau = static_cast<double>(enc.temperature(params).item());
  std::vector<double> out(sim.values().begin(), sim.values().end());
  for (auto& v : out) v /= tau;
  return out;
}

std::vector<double> itm_scores(const Encoders<float>& enc, const ParamMap<float>& params,
                               const std::vector<Example>& gallery,
                               const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  typename Tape<float>::Pause pause;
  const std::size_t n = gallery.size();
  if (n == 0) throw std::invalid_argument("retrieval: empty gallery");
  auto vis = enc.encode_image(params, gallery_images(gallery, enc.config()));
  auto txt = enc.encode_text(params, gallery_ids(gallery), n);
  const std::size_t L = txt.features.dim(1);
  constexpr std::size_t kChunk = 256;
  std::vector<double> out;
  out.reserve(pairs.size());
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const std::size_t end = std::min(pairs.size(), start + kChunk);
    std::vector<std::size_t> imgs, txts;
    std::vector<std::uint8_t> valid;
    for (std::size_t p = start; p < end; ++p) {
      imgs.push_back(pairs[p].first);
      txts.push_back(pairs[p].second);
      valid.insert(valid.end(), txt.key_valid.begin() + pairs[p].second * L,
                   txt.key_valid.begin() + (pairs[p].second + 1) * L);
    }
    TextSequence<float> t{select_entries(txt.features, txts), valid};
    auto fused = enc.fuse(params, select_entries(vis.features, imgs), t);
    const std::vector<std::vector<std::size_t>> cls(imgs.size(), std::vector<std::size_t>{0});
    auto logits = enc.head_itm(params, rows_at(fused.features, cls));
    auto v = logits.values();
    for (std::size_t r = 0; r < imgs.size(); ++r) {
      const double diff = static_cast<double>(v[r * 2 + kItmMatch]) - v[r * 2 + kItmNoMatch];
      out.push_back(1.0 / (1.0 + std::exp(-diff)));
    }
  }
  return out;
}

RetrievalReport zeroshot_retrieval(const Encoders<float>& enc, const ParamMap<float>& params,
                                   const std::vector<Example>& gallery, std::size_t rerank_k) {
  const std::size_t n = gallery.size();
  if (n == 0) throw std::invalid_argument("retrieval: empty gallery");
  if (rerank_k > n) throw std::invalid_argument("retrieval: rerank_k exceeds the gallery size");
  const auto itc = itc_scores(enc, params, gallery);

  // ITM is only evaluated on each query's ITC top-k.
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> needed;
  std::vector<double> a(n), none(n, 0.0);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t c = 0; c < n; ++c) a[c] = itc[c * n + q];
    auto order = rerank_order(a, none, 0);
    for (std::size_t r = 0; r < rerank_k; ++r) needed.emplace(std::make_pair(order[r], q), 0);
    for (std::size_t c = 0; c < n; ++c) a[c] = itc[q * n + c];
    order = rerank_order(a, none, 0);
    for (std::size_t r = 0; r < rerank_k; ++r) needed.emplace(std::make_pair(q, order[r]), 0);
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& [p, unused] : needed) pairs.push_back(p);
  const auto scores = itm_scores(enc, params, gallery, pairs);
  std::vector<double> itm(n * n, 0.0);
  for (std::size_t i = 0; i < pairs.size(); ++i) itm[pairs[i].first * n + pairs[i].second] = scores[i];
  return retrieval_from_scores(itc, itm, n, rerank_k);
}

// ---- collapse --------------------------------------------------------------

CollapseMetrics collapse_from_rows(std::span<const double> rows, std::size_t dim) {
  if (dim == 0 || rows.size() % dim != 0) throw std::invalid_argument("collapse_metrics: ragged prediction rows");
  const std::size_t n = rows.size() / dim;
  if (n < kMinProbePositions)
    throw std::invalid_argument("collapse_metrics: need at least " + std::to_string(kMinProbePositions) +
                                " probe positions, got " + std::to_string(n));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(
      rows.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  // Shifting by the first row first makes identical rows centre to exact zeros.
  const Eigen::MatrixXd shifted = X.rowwise() - X.row(0);
  const Eigen::RowVectorXd mean = shifted.colwise().mean();
  const Eigen::MatrixXd centered = shifted.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
  CollapseMetrics m;
  m.positions = n;
  for (std::size_t j = 0; j < dim; ++j) {
    const double s = std::sqrt(std::max(0.0, cov(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j))));
    m.per_dim_std.push_back(s);
    m.mean_std += s / static_cast<double>(dim);
  }
  const double tr = cov.trace();
  const double fro2 = cov.squaredNorm();
  m.participation_ratio = (tr > 0 && fro2 > 0) ? tr * tr / fro2 : 1.0;
  return m;
}

std::vector<double> mrm_predictions(const Encoders<float>& enc, const ParamMap<float>& params,
                                    const MaskedBatch& batch, bool use_predictor, std::size_t* dim) {
  typename Tape<float>::Pause pause;
  const ModelConfig& cfg = enc.config();
  const std::size_t B = batch.size;
  const auto images = batch_images<float>(batch, cfg);
  auto vis = enc.encode_image(params, images);
  auto txt = enc.encode_text(params, batch.ids, B);
  std::vector<std::vector<std::size_t>> visible;
  for (const auto& plan : batch.image_plans) visible.push_back(plan.visible_positions());
  auto masked_vis = enc.encode_image(params, images, visible);
  auto masked_txt = enc.encode_text(params, batch.masked_ids, B);
  auto image_view = enc.fuse(params, enc.insert_mask_tokens(params, masked_vis), txt);
  auto text_view = enc.fuse(params, vis.features, masked_txt);
  auto predict = [&](const Tensor<float>& rows) {
    auto g = enc.head_g(params, rows);
    return use_predictor ? enc.head_mrm(params, g) : g;
  };
  auto a = predict(rows_at(image_view.features, masked_patch_slots(batch)));
  auto b = predict(rows_at(text_view.features, masked_text_slots(batch, cfg.num_patches())));
  if (dim) *dim = a.dim(1);
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return out;
}

CollapseMetrics collapse_metrics(const Encoders<float>& enc, const ParamMap<float>& params,
                                 const std::vector<MaskedBatch>& probe_batches, bool use_predictor) {
  std::vector<double> rows;
  std::size_t dim = enc.config().embed_dim;
  for (const auto& batch : probe_batches) {
    auto r = mrm_predictions(enc, params, batch, use_predictor, &dim);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return collapse_from_rows(rows, dim);
}

// ---- Grad-CAM --------------------------------------------------------------

std::string to_string(CamLoss kind) {
  switch (kind) {
    case CamLoss::mrm_text: return "mrm_text";
    case CamLoss::mrm_image: return "mrm_image";
    case CamLoss::itm: return "itm";
  }
  return "?";
}

CamLoss parse_cam_loss(const std::string& s) {
  if (s == "mrm_text" || s == "mrm-text") return CamLoss::mrm_text;
  if (s == "mrm_image" || s == "mrm-image") return CamLoss::mrm_image;
  if (s == "itm") return CamLoss::itm;
  throw std::invalid_argument("unknown Grad-CAM loss '" + s + "' (expected mrm_text, mrm_image or itm)");
}

HeatmapResult gradcam(const Encoders<float>& enc, const ParameterPair<float>& pair, const CamRequest& req) {
  const ModelConfig& cfg = enc.config();
  const std::size_t P = cfg.num_patches();
  const std::size_t L = req.ids.size();
  if (req.layer >= cfg.fusion_layers)
    throw std::invalid_argument("gradcam: layer " + std::to_string(req.layer) + " out of range (fusion has " +
                                std::to_string(cfg.fusion_layers) + " layers)");
  if (req.image.size() != cfg.image_size * cfg.image_size * cfg.channels)
    throw ShapeError("gradcam: image has " + std::to_string(req.image.size()) + " values");
  if (L == 0 || L > cfg.max_text_len) throw ShapeError("gradcam: caption length out of range");
  if (req.kind != CamLoss::itm && req.masked.empty())
    throw std::invalid_argument("gradcam: " + to_string(req.kind) + " needs at least one masked position");
  for (std::size_t pos : req.masked) {
    if (req.kind == CamLoss::mrm_text && (pos == 0 || pos >= L || req.ids[pos] < Vocabulary::kFirstWord))
      throw std::invalid_argument("gradcam: text position " + std::to_string(pos) + " is not a word");
    if (req.kind == CamLoss::mrm_image && pos >= P)
      throw std::invalid_argument("gradcam: patch position " + std::to_string(pos) + " out of range");
  }

  const auto image = Tensor<float>::constant({cfg.image_size, cfg.image_size, cfg.channels}, req.image);
  std::vector<std::size_t> masked = req.masked;
  std::sort(masked.begin(), masked.end());
  masked.erase(std::unique(masked.begin(), masked.end()), masked.end());

  std::vector<std::size_t> query_slots;
  if (req.kind == CamLoss::mrm_text)
    for (std::size_t pos : masked) query_slots.push_back(1 + P + pos);
  else if (req.kind == CamLoss::mrm_image)
    for (std::size_t pos : masked) query_slots.push_back(1 + pos);
  else
    query_slots.push_back(0);
  const std::vector<std::vector<std::size_t>> slots{query_slots};

  Tensor<float> target;
  if (req.kind != CamLoss::itm) {
    target = target_forward(pair, [&](const ParamMap<float>& tp) {
      auto vis = enc.encode_image(tp, image);
      auto txt = enc.encode_text(tp, req.ids, 1);
      auto fused = enc.fuse(tp, enc.insert_mask_tokens(tp, vis), txt);
      return enc.head_g(tp, rows_at(fused.features, slots));
    });
  }

  ParamMap<float> theta = pair.online;  // shares storage; used to clear gradients afterwards
  for (auto& [name, p] : theta) p.clear_grad();
  HeatmapResult result;
  result.grid_h = result.grid_w = cfg.grid();
  result.layer = req.layer;
  result.kind = req.kind;
  std::vector<double> key_scores;
  {
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    Tensor<float> image_slots;
    TextSequence<float> txt;
    if (req.kind == CamLoss::mrm_image) {
      std::vector<std::size_t> visible;
      for (std::size_t p = 0; p < P; ++p)
        if (!std::binary_search(masked.begin(), masked.end(), p)) visible.push_back(p);
      image_slots = enc.insert_mask_tokens(theta, enc.encode_image(theta, image, {visible}));
    } else {
      image_slots = enc.encode_image(theta, image).features;
    }
    if (req.kind == CamLoss::mrm_text) {
      auto ids = req.ids;
      for (std::size_t pos : masked) ids[pos] = Vocabulary::kMask;
      txt = enc.encode_text(theta, ids, 1);
    } else {
      txt = enc.encode_text(theta, req.ids, 1);
    }
    auto fused = enc.fuse(theta, image_slots, txt, true);
    Tensor<float> loss;
    if (req.kind == CamLoss::itm) {
      const std::int32_t label = kItmMatch;
      loss = itm_loss(enc.head_itm(theta, rows_at(fused.features, slots)), std::span<const std::int32_t>(&label, 1));
    } else {
      auto g = enc.head_g(theta, rows_at(fused.features, slots));
      loss = mrm_loss(req.use_predictor ? enc.head_mrm(theta, g) : g, target);
    }
    tape.backward(scale(loss, -1.0f));

    const Tensor<float>& attn = fused.trace->layers.at(req.layer);
    const std::size_t H = attn.dim(1);
    const std::size_t S = attn.dim(2);
    key_scores.assign(S, 0.0);
    if (attn.has_grad()) {
      auto a = attn.values();
      auto g = attn.grad();
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t q : query_slots)
          for (std::size_t k = 0; k < S; ++k) {
            const std::size_t i = (h * S + q) * S + k;
            key_scores[k] += std::max(0.0, static_cast<double>(g[i]) * a[i]);
          }
      for (auto& v : key_scores) v /= static_cast<double>(H * query_slots.size());
    }
  }
  for (auto& [name, p] : theta) p.clear_grad();

  result.scores.assign(key_scores.begin() + 1, key_scores.begin() + 1 + static_cast<std::ptrdiff_t>(P));
  if (req.kind == CamLoss::mrm_image) {
    const auto& vocab = vocabulary();
    for (std::size_t t = 0; t < L; ++t) {
      if (req.ids[t] < Vocabulary::kFirstWord) continue;
      result.words.push_back(vocab.token(req.ids[t]));
      result.word_scores.push_back(key_scores[1 + P + t]);
    }
  }
  result.zero = std::all_of(result.scores.begin(), result.scores.end(), [](double v) { return v == 0.0; });
  return result;
}

void emit_heatmap(const HeatmapResult& h, const std::vector<float>& base_image, std::size_t image_size,
                  const std::filesystem::path& stem) {
  if (h.scores.size() != h.grid_h * h.grid_w || h.grid_h == 0)
    throw ShapeError("emit_heatmap: heatmap does not match its grid");
  if (base_image.size() != image_size * image_size * 3)
    throw ShapeError("emit_heatmap: base image must be " + std::to_string(image_size) + "x" +
                     std::to_string(image_size) + " RGB");
  const double peak = *std::max_element(h.scores.begin(), h.scores.end());
  std::vector<std::uint8_t> gray(image_size * image_size);
  std::vector<std::uint8_t> overlay(image_size * image_size * 3);
  constexpr double kAlpha = 0.6;
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x) {
      const std::size_t cell = (y * h.grid_h / image_size) * h.grid_w + x * h.grid_w / image_size;
      const double v = peak > 0 ? h.scores[cell] / peak : 0.0;
      const std::size_t px = y * image_size + x;
      gray[px] = static_cast<std::uint8_t>(std::lround(255.0 * v));
      const double a = kAlpha * v;
      const double heat[3] = {1.0, v, 0.0};
      for (std::size_t c = 0; c < 3; ++c)
        overlay[px * 3 + c] = quantize(static_cast<float>((1.0 - a) * base_image[px * 3 + c] + a * heat[c]));
    }
  std::filesystem::path base = stem;
  write_pgm(base.replace_extension(".pgm"), gray, image_size, image_size);
  write_ppm8(stem.string() + "_overlay.ppm", overlay, image_size, image_size);
  if (!h.words.empty()) {
    std::ofstream out(stem.string() + "_words.tsv");
    if (!out) throw std::runtime_error("cannot write " + stem.string() + "_words.tsv");
    out << "position\tword\tscore\n";
    for (std::size_t i = 0; i < h.words.size(); ++i) out << i << '\t' << h.words[i] << '\t' << h.word_scores[i] << '\n';
  }
}

double mass_in_cell(const HeatmapResult& h, std::size_t cell) {
  if (h.grid_h % 2 != 0 || h.grid_w % 2 != 0) throw ShapeError("mass_in_cell: grid must split into 2x2 cells");
  const std::size_t row = cell / 2;
  const std::size_t col = cell % 2;
  double inside = 0, total = 0;
  for (std::size_t y = 0; y < h.grid_h; ++y)
    for (std::size_t x = 0; x < h.grid_w; ++x) {
      const double v = h.scores[y * h.grid_w + x];
      total += v;
      if (y / (h.grid_h / 2) == row && x / (h.grid_w / 2) == col) inside += v;
    }
  return total > 0 ? inside / total : 0.0;
}

}  // namespace mamo
