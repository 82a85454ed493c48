#include "mamo/objectives.hpp"

#include "mamo/log.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mamo {

template <typename T>
Tensor<T> mrm_loss(const Tensor<T>& predictions, const Tensor<T>& targets) {
  if (predictions.shape() != targets.shape()) throw ShapeError("mrm_loss: " + shape_str(predictions.shape()) +
                                                              " vs " + shape_str(targets.shape()));
  if (predictions.size() == 0) {
    log_warning("mrm_loss: no masked positions, contributing 0");
    return Tensor<T>::scalar(T(0));
  }
  return mse(predictions, targets);
}

template <typename T>
Tensor<T> mim_loss(const Tensor<T>& predictions, const Tensor<T>& targets) {
  if (predictions.shape() != targets.shape()) throw ShapeError("mim_loss: " + shape_str(predictions.shape()) +
                                                              " vs " + shape_str(targets.shape()));
  if (predictions.size() == 0) {
    log_warning("mim_loss: no masked patches, contributing 0");
    return Tensor<T>::scalar(T(0));
  }
  return l1(predictions, targets);
}

template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& logits, std::span<const std::int32_t> original_ids) {
  if (original_ids.empty()) {
    log_warning("mlm_loss: empty mask plan, contributing 0");
    return Tensor<T>::scalar(T(0));
  }
  return cross_entropy(logits, original_ids);
}

template <typename T>
Tensor<T> itc_loss_from_similarity(const Tensor<T>& sim, const Tensor<T>& tau) {
  if (sim.rank() != 2 || sim.dim(0) != sim.dim(1)) throw ShapeError("itc_loss: similarity must be square, got " +
                                                                    shape_str(sim.shape()));
  const std::size_t n = sim.dim(0);
  if (n == 0) throw std::invalid_argument("itc_loss: empty batch");
  if (tau.size() != 1 || !(tau.item() > T(0))) throw std::invalid_argument("itc_loss: temperature must be positive");
  std::vector<std::int32_t> diag(n);
  std::iota(diag.begin(), diag.end(), 0);
  auto logits = div(sim, tau);
  auto i2t = cross_entropy(logits, diag);
  auto t2i = cross_entropy(permute(logits, {1, 0}), diag);
  return scale(add(i2t, t2i), T(0.5));
}

template <typename T>
Tensor<T> itc_loss(const Tensor<T>& image_embeds, const Tensor<T>& text_embeds, const Tensor<T>& tau) {
  if (image_embeds.rank() != 2 || image_embeds.shape() != text_embeds.shape())
    throw ShapeError("itc_loss: " + shape_str(image_embeds.shape()) + " vs " + shape_str(text_embeds.shape()));
  return itc_loss_from_similarity(matmul(image_embeds, text_embeds, true), tau);
}

template <typename T>
Tensor<T> itm_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(1) != 2 || logits.dim(0) != labels.size())
    throw ShapeError("itm_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  return cross_entropy(logits, labels);
}

std::vector<double> negative_distribution(const SimilarityMatrix& sim, std::size_t index, bool image_query) {
  const std::size_t n = sim.n;
  if (n < 2) throw std::invalid_argument("mine_hard_negatives: need at least 2 pairs");
  if (!(sim.tau > 0)) throw std::invalid_argument("mine_hard_negatives: temperature must be positive");
  std::vector<double> logits(n);
  for (std::size_t j = 0; j < n; ++j)
    logits[j] = (image_query ? sim.at(index, j) : sim.at(j, index)) / sim.tau;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (j != index) mx = std::max(mx, logits[j]);
  std::vector<double> p(n, 0.0);
  double z = 0;
  for (std::size_t j = 0; j < n; ++j)
    if (j != index) z += p[j] = std::exp(logits[j] - mx);
  for (auto& v : p) v /= z;
  return p;
}

HardNegatives mine_hard_negatives(const SimilarityMatrix& sim, Rng& rng, MiningMode mode) {
  if (sim.n < 2) throw std::invalid_argument("mine_hard_negatives: need at least 2 pairs");
  if (sim.s.size() != sim.n * sim.n) throw std::invalid_argument("mine_hard_negatives: matrix is not n x n");
  HardNegatives out;
  auto pick = [&](std::size_t index, bool image_query) -> std::size_t {
    const auto p = negative_distribution(sim, index, image_query);
    if (mode == MiningMode::argmax) {
      std::size_t best = index == 0 ? 1 : 0;
      for (std::size_t j = 0; j < p.size(); ++j)
        if (j != index && p[j] > p[best]) best = j;
      return best;
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng);
    std::size_t last = index;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (j == index) continue;
      last = j;
      if (r < p[j]) return j;
      r -= p[j];
    }
    return last;  // rounding residue
  };
  for (std::size_t i = 0; i < sim.n; ++i) out.text_for_image.push_back(pick(i, true));
  for (std::size_t j = 0; j < sim.n; ++j) out.image_for_text.push_back(pick(j, false));
  return out;
}

LossBundle total_loss(double mrm, double mim, double mlm, double itc, double itm) {
  const std::pair<const char*, double> parts[] = {{"mrm", mrm}, {"mim", mim}, {"mlm", mlm}, {"itc", itc}, {"itm", itm}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + name + " loss");
  return {mrm, mim, mlm, itc, itm, mrm + mim + mlm + itc + itm};
}

#define MAMO_INSTANTIATE(T)                                                              \
  template Tensor<T> mrm_loss(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mim_loss(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mlm_loss(const Tensor<T>&, std::span<const std::int32_t>);          \
  template Tensor<T> itc_loss_from_similarity(const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> itc_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> itm_loss(const Tensor<T>&, std::span<const std::int32_t>);

MAMO_INSTANTIATE(float)
MAMO_INSTANTIATE(double)

}  // namespace mamo
