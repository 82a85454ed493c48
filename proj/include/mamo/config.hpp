#pragma once

// Configuration records and the flat key=value text format used for config
// files and for the config blob embedded in checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace mamo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MimTarget { momentum, pixels };

std::string to_string(MimTarget t);
MimTarget parse_mim_target(const std::string& s);

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t img_layers = 4;
  std::size_t txt_layers = 2;
  std::size_t fusion_layers = 4;
  std::size_t vocab_size = 40;
  std::size_t max_text_len = 12;
  std::size_t proj_hidden_dim = 128;
  std::size_t itc_proj_dim = 32;
  std::size_t mlp_ratio = 4;         // transformer MLP width = mlp_ratio * embed_dim
  std::size_t mim_decoder_depth = 0;  // 0: h_mim is a plain MLP projector
  double temperature_init = 0.07;
  double init_std = 0.02;
  MimTarget mim_target = MimTarget::momentum;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t fused_len() const { return 1 + num_patches() + max_text_len; }
  std::size_t mim_output_dim() const { return mim_target == MimTarget::pixels ? patch_dim() : embed_dim; }

  // Throws ConfigError when an invariant is violated.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct ScheduleConfig {
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 3000;
  double final_lr = 1e-5;
  bool operator==(const ScheduleConfig&) const = default;
};

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 5.0;  // <= 0 disables clipping
  bool operator==(const OptimizerConfig&) const = default;
};

struct MaskingConfig {
  double text_ratio = 0.25;
  double image_ratio = 0.75;
  bool operator==(const MaskingConfig&) const = default;
};

// Which pretraining objectives contribute to the total loss.
struct TaskSet {
  bool mrm = true;
  bool mim = true;
  bool mlm = true;
  bool itc = true;
  bool itm = true;

  static TaskSet parse(const std::string& csv);
  std::string str() const;
  bool needs_image_masked_view() const { return mrm || mim; }
  bool needs_text_masked_view() const { return mrm || mlm; }
  bool operator==(const TaskSet&) const = default;
};

struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  OptimizerConfig optimizer;
  MaskingConfig masking;
  TaskSet tasks;
  double ema_alpha = 0.99;
  bool use_ema = true;        // false: the target is overwritten by the online weights each step
  bool use_predictor = true;  // false: MRM predictions are g(x) without h_mrm
  std::size_t batch_size = 32;
  std::size_t train_pairs = 2000;
  std::size_t eval_pairs = 100;
  std::size_t rerank_k = 16;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1000;  // 0 disables periodic checkpoints
  std::size_t log_every = 1;
  std::string out_dir = "run";

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

// Flat key=value map. Lines starting with '#' and blank lines are ignored.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
std::string format_key_values(const KeyValues& kv);

// Unknown keys are rejected so typos fail loudly.
void apply_key_values(const KeyValues& kv, ModelConfig& cfg, std::set<std::string>* consumed = nullptr);
void apply_key_values(const KeyValues& kv, RunConfig& cfg);
KeyValues to_key_values(const ModelConfig& cfg);
KeyValues to_key_values(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

}  // namespace mamo
