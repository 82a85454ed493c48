#pragma once

// Zero-shot retrieval, representation-collapse diagnostics and Grad-CAM on
// fusion-layer attention.

#include "mamo/distillation.hpp"
#include "mamo/encoders.hpp"
#include "mamo/synthdata.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mamo {

// ---- retrieval -------------------------------------------------------------

struct RetrievalReport {
  std::size_t n = 0;
  std::size_t rerank_k = 0;
  double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;
  double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;

  static std::string csv_header();
  std::string csv_row() const;
};

// Candidate order for one query: all candidates by ITC score (descending,
// ties by index), then the first k re-sorted by ITM score, stably. Only the
// ITM scores of those k candidates are read.
std::vector<std::size_t> rerank_order(std::span<const double> itc, std::span<const double> itm, std::size_t k);

// Fraction of queries whose ground truth (the query's own index) appears in
// the first `at` entries of its order.
double recall_at(const std::vector<std::vector<std::size_t>>& orders, std::size_t at);

// itc and itm are n x n, row = image, column = text.
RetrievalReport retrieval_from_scores(std::span<const double> itc, std::span<const double> itm, std::size_t n,
                                      std::size_t rerank_k);

// ITC similarity matrix s/tau [n, n] (row = image) of a gallery.
std::vector<double> itc_scores(const Encoders<float>& enc, const ParamMap<float>& params,
                               const std::vector<Example>& gallery);

// ITM match probabilities for (image, text) index pairs.
std::vector<double> itm_scores(const Encoders<float>& enc, const ParamMap<float>& params,
                               const std::vector<Example>& gallery,
                               const std::vector<std::pair<std::size_t, std::size_t>>& pairs);

RetrievalReport zeroshot_retrieval(const Encoders<float>& enc, const ParamMap<float>& params,
                                   const std::vector<Example>& gallery, std::size_t rerank_k);

// ---- collapse --------------------------------------------------------------

struct CollapseMetrics {
  std::size_t positions = 0;
  std::vector<double> per_dim_std;
  double mean_std = 0;
  double participation_ratio = 1;  // (tr C)^2 / ||C||_F^2 of the prediction covariance
};

inline constexpr std::size_t kMinProbePositions = 16;

// rows: [positions, dim] row-major.
CollapseMetrics collapse_from_rows(std::span<const double> rows, std::size_t dim);

// MRM predictions of the online network at the masked positions of both
// masked views, one row per position.
std::vector<double> mrm_predictions(const Encoders<float>& enc, const ParamMap<float>& params,
                                    const MaskedBatch& batch, bool use_predictor, std::size_t* dim = nullptr);

CollapseMetrics collapse_metrics(const Encoders<float>& enc, const ParamMap<float>& params,
                                 const std::vector<MaskedBatch>& probe_batches, bool use_predictor = true);

// ---- Grad-CAM --------------------------------------------------------------

enum class CamLoss { mrm_text, mrm_image, itm };

std::string to_string(CamLoss kind);
CamLoss parse_cam_loss(const std::string& s);

struct HeatmapResult {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<double> scores;  // grid_h * grid_w, raster order
  std::size_t layer = 0;
  CamLoss kind = CamLoss::itm;
  bool zero = false;  // no gradient reached the attention map
  // Per-token scores over the text key slots (filled for mrm_image).
  std::vector<std::string> words;
  std::vector<double> word_scores;
};

struct CamRequest {
  std::vector<float> image;         // [H, W, C]
  std::vector<std::int32_t> ids;    // tokenized caption
  CamLoss kind = CamLoss::mrm_text;
  std::size_t layer = 0;            // fusion block index
  // Text positions to mask (mrm_text) or patch positions to mask (mrm_image).
  std::vector<std::size_t> masked;
  bool use_predictor = true;
};

// Evidence is the negative loss: positive gradient-times-attention marks
// attention that lowers the loss. Averaged over heads and the query slots
// (masked slots, or the fused CLS for itm).
HeatmapResult gradcam(const Encoders<float>& enc, const ParameterPair<float>& pair, const CamRequest& request);

// Writes <stem>.pgm (nearest-upsampled, peak at 255), <stem>_overlay.ppm and,
// when word scores exist, <stem>_words.tsv.
void emit_heatmap(const HeatmapResult& h, const std::vector<float>& base_image, std::size_t image_size,
                  const std::filesystem::path& stem);

// Fraction of heatmap mass inside a 2x2-grid scene cell.
double mass_in_cell(const HeatmapResult& h, std::size_t cell);

}  // namespace mamo
