#pragma once

// Pretraining loop: AdamW with decoupled weight decay, linear warmup then
// linear decay, EMA target update after every optimizer step, binary
// checkpoints and an append-only CSV metrics stream.

#include "mamo/config.hpp"
#include "mamo/distillation.hpp"
#include "mamo/encoders.hpp"
#include "mamo/pretraining.hpp"
#include "mamo/synthdata.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace mamo {

double lr_at(std::size_t step, const ScheduleConfig& schedule);

struct OptimizerState {
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
  std::size_t t = 0;  // completed updates
  bool operator==(const OptimizerState&) const = default;
};

class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }

  // Parameters without a gradient are treated as having a zero gradient.
  // Returns the global gradient norm before clipping.
  double step(ParamMap<float>& params, double lr);

 private:
  OptimizerConfig cfg_;
  OptimizerState state_;
};

inline constexpr double kMinTemperature = 0.001;

struct TrainStepOptions {
  LossOptions losses;
  bool use_ema = true;
  double alpha = 0.99;
};

struct StepResult {
  LossBundle bundle;
  double lr = 0;
  double tau = 0;
  double target_variance = 0;
  double grad_norm = 0;
};

// One optimisation step on a prepared batch: losses, backward, AdamW at
// lr_at(step), temperature clamp, then the target update.
StepResult train_step(const Encoders<float>& enc, ParameterPair<float>& pair, const MaskedBatch& batch, AdamW& opt,
                      const ScheduleConfig& schedule, std::size_t step, const TrainStepOptions& opts, Rng& rng);

// ---- checkpoints -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  RunConfig config;
  ParameterPair<float> pair;
  OptimizerState optimizer;
  std::size_t step = 0;  // next step to run
  // Every random draw of a run derives from (config.seed, step), so these two
  // values are the complete RNG state.
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Throws CheckpointError on bad magic, version mismatch, truncation, or when
// `expected` is given and its ModelConfig differs from the stored one.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

// ---- metrics ---------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "step,lr,mrm,mim,mlm,itc,itm,total,tau,target_variance";

std::string metrics_row(std::size_t step, const StepResult& r);

// ---- run driver ------------------------------------------------------------

class Trainer {
 public:
  explicit Trainer(RunConfig cfg);
  explicit Trainer(Checkpoint ckpt);

  // Runs the next step and returns its result.
  StepResult step();
  std::size_t next_step() const { return step_; }
  bool done() const { return step_ >= cfg_.schedule.total_steps; }

  const RunConfig& config() const { return cfg_; }
  const Encoders<float>& encoders() const { return enc_; }
  const ParameterPair<float>& pair() const { return pair_; }
  ParameterPair<float>& pair() { return pair_; }
  const AdamW& optimizer() const { return opt_; }
  const std::vector<Example>& corpus() const { return *corpus_; }

  // Batch for a given step; a pure function of (seed, step).
  MaskedBatch batch_for(std::size_t step) const;

  Checkpoint checkpoint() const;

 private:
  TrainStepOptions step_options() const;

  RunConfig cfg_;
  Encoders<float> enc_;
  ParameterPair<float> pair_;
  AdamW opt_;
  std::shared_ptr<const std::vector<Example>> corpus_;
  std::size_t step_ = 0;
};

std::vector<Example> training_corpus(const RunConfig& cfg);
std::vector<Example> heldout_corpus(std::size_t pairs, std::size_t max_text_len, std::size_t object_count = 0);

struct RunCallbacks {
  std::function<void(std::size_t step, const StepResult&)> on_step;
};

// Trains until total_steps, appending to <out>/metrics.csv and writing
// <out>/ckpt_<step>.bin every checkpoint_every steps plus <out>/final.bin.
void run_pretraining(Trainer& trainer, const std::filesystem::path& out_dir, const RunCallbacks& callbacks = {});

}  // namespace mamo
