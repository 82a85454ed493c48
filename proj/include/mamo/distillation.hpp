#pragma once

// Online parameters theta and their EMA target copy theta-bar. The target
// never requires gradients, so nothing computed from it is ever recorded on a
// tape: every target output is a constant to the loss.

#include "mamo/encoders.hpp"

#include <stdexcept>
#include <utility>

namespace mamo {

inline constexpr double kPaperEmaMomentum = 0.995;

template <typename T>
struct ParameterPair {
  ParamMap<T> online;
  ParamMap<T> target;
  double alpha = kPaperEmaMomentum;
};

template <typename T>
ParameterPair<T> init_target(ParamMap<T> online, double alpha = kPaperEmaMomentum) {
  ParameterPair<T> pair{std::move(online), {}, alpha};
  for (const auto& [name, t] : pair.online) pair.target.emplace(name, t.detach_copy());
  return pair;
}

// theta-bar <- alpha * theta-bar + (1 - alpha) * theta, per key and element.
template <typename T>
void ema_update(ParameterPair<T>& pair, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("ema_update: alpha must lie in [0, 1]");
  if (pair.online.size() != pair.target.size())
    throw std::invalid_argument("ema_update: online and target hold different parameter sets");
  const T a = static_cast<T>(alpha);
  const T b = static_cast<T>(1.0 - alpha);
  for (auto& [name, tgt] : pair.target) {
    auto it = pair.online.find(name);
    if (it == pair.online.end()) throw std::invalid_argument("ema_update: online network lacks '" + name + "'");
    if (it->second.shape() != tgt.shape())
      throw std::invalid_argument("ema_update: shape mismatch for '" + name + "': " + shape_str(tgt.shape()) +
                                  " vs " + shape_str(it->second.shape()));
    auto dst = tgt.mutable_values();
    auto src = it->second.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = a * dst[i] + b * src[i];
  }
}

// Overwrites theta-bar with theta (the ablation without a moving average).
template <typename T>
void copy_online_to_target(ParameterPair<T>& pair) {
  ema_update(pair, 0.0);
}

// Evaluates fn(target_params) with gradient recording suspended.
template <typename T, typename Fn>
auto target_forward(const ParameterPair<T>& pair, Fn&& fn) {
  typename Tape<T>::Pause pause;
  return std::forward<Fn>(fn)(pair.target);
}

}  // namespace mamo
