#include "mamo/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace mamo {

double lr_at(std::size_t step, const ScheduleConfig& s) {
  if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return s.final_lr;
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double frac = static_cast<double>(step - s.warmup_steps) / span;
  return s.peak_lr + (s.final_lr - s.peak_lr) * frac;
}

double AdamW::step(ParamMap<float>& params, double lr) {
  double sq = 0;
  for (const auto& [name, p] : params)
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  const float clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? static_cast<float>(cfg_.grad_clip / norm) : 1.0f;

  state_.t += 1;
  const double t = static_cast<double>(state_.t);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  const float b1 = static_cast<float>(cfg_.beta1);
  const float b2 = static_cast<float>(cfg_.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(cfg_.eps);
  for (auto& [name, p] : params) {
    auto values = p.mutable_values();
    auto grad = p.grad();
    auto& m = state_.m[name];
    auto& v = state_.v[name];
    if (m.empty()) {
      m.assign(values.size(), 0.0f);
      v.assign(values.size(), 0.0f);
    }
    const float decay = excluded_from_weight_decay(name) ? 1.0f : static_cast<float>(1.0 - lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float g = grad.empty() ? 0.0f : grad[i] * clip;
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      values[i] *= decay;
      values[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
  return norm;
}

StepResult train_step(const Encoders<float>& enc, ParameterPair<float>& pair, const MaskedBatch& batch, AdamW& opt,
                      const ScheduleConfig& schedule, std::size_t step, const TrainStepOptions& opts, Rng& rng) {
  for (auto& [name, p] : pair.online) p.clear_grad();
  StepResult result;
  {
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto losses = pretraining_losses(enc, pair, batch, opts.losses, rng);
    result.bundle = losses.bundle;
    result.target_variance = losses.target_variance;
    tape.backward(losses.total);
  }
  result.lr = lr_at(step, schedule);
  result.grad_norm = opt.step(pair.online, result.lr);
  auto log_tau = pair.online.at("log_tau").mutable_values();
  log_tau[0] = std::max(log_tau[0], static_cast<float>(std::log(kMinTemperature)));
  result.tau = std::exp(static_cast<double>(log_tau[0]));
  for (auto& [name, p] : pair.online) p.clear_grad();
  if (opts.use_ema) ema_update(pair, opts.alpha);
  else copy_online_to_target(pair);
  return result;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'A', 'M', 'O'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw CheckpointError("cannot write checkpoint " + path.string());
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) v = byteswap32(v);
    bytes(&v, 4);
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void finish() {
    out_.flush();
    if (!out_) throw CheckpointError("failed writing checkpoint " + path_.string());
  }
  static std::uint32_t byteswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw CheckpointError("cannot open checkpoint " + path.string());
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw CheckpointError("checkpoint " + path_.string() + " is truncated");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    if constexpr (std::endian::native == std::endian::big) v = Writer::byteswap32(v);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t limit) {
    const std::uint32_t n = u32();
    if (n > limit) throw CheckpointError("checkpoint " + path_.string() + " has an implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

void write_entry(Writer& w, const std::string& name, const Shape& shape, std::span<const float> values) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) w.u32(static_cast<std::uint32_t>(e));
  for (float f : values) w.f32(f);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  KeyValues blob = to_key_values(ckpt.config);
  blob["state.step"] = std::to_string(ckpt.step);
  blob["state.alpha"] = [&] {
    std::ostringstream os;
    os << std::setprecision(17) << ckpt.pair.alpha;
    return os.str();
  }();
  blob["adam.t"] = std::to_string(ckpt.optimizer.t);

  Writer w(path);
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(format_key_values(blob));

  std::uint32_t count = static_cast<std::uint32_t>(2 * ckpt.pair.online.size() + ckpt.optimizer.m.size() +
                                                   ckpt.optimizer.v.size());
  w.u32(count);
  for (const auto& [name, t] : ckpt.pair.online) write_entry(w, "online/" + name, t.shape(), t.values());
  for (const auto& [name, t] : ckpt.pair.target) write_entry(w, "target/" + name, t.shape(), t.values());
  for (const auto& [name, m] : ckpt.optimizer.m) {
    const Shape& shape = ckpt.pair.online.at(name).shape();
    write_entry(w, "adam.m/" + name, shape, m);
  }
  for (const auto& [name, v] : ckpt.optimizer.v) {
    const Shape& shape = ckpt.pair.online.at(name).shape();
    write_entry(w, "adam.v/" + name, shape, v);
  }
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  KeyValues blob = parse_key_values(r.str(1u << 20));
  Checkpoint ckpt;
  try {
    ckpt.step = std::stoull(blob.at("state.step"));
    ckpt.pair.alpha = std::stod(blob.at("state.alpha"));
    ckpt.optimizer.t = std::stoull(blob.at("adam.t"));
  } catch (const std::exception&) {
    throw CheckpointError(path.string() + ": config blob lacks state entries");
  }
  for (auto it = blob.begin(); it != blob.end();) {
    if (it->first.rfind("state.", 0) == 0 || it->first.rfind("adam.t", 0) == 0) it = blob.erase(it);
    else ++it;
  }
  apply_key_values(blob, ckpt.config);
  ckpt.config.validate();
  if (expected && !(*expected == ckpt.config.model))
    throw CheckpointError(path.string() + ": stored model config does not match the requested one");

  // Shapes the config implies; every stored tensor must agree.
  const auto reference = init_parameters<float>(ckpt.config.model, 0);
  const std::uint32_t count = r.u32();
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::string name = r.str(4096);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError(path.string() + ": implausible rank for " + name);
    Shape shape(rank);
    for (auto& x : shape) x = r.u32();
    const auto slash = name.find('/');
    if (slash == std::string::npos) throw CheckpointError(path.string() + ": malformed entry name " + name);
    const std::string group = name.substr(0, slash);
    const std::string key = name.substr(slash + 1);
    auto ref = reference.find(key);
    if (ref == reference.end()) throw CheckpointError(path.string() + ": unknown parameter " + key);
    if (ref->second.shape() != shape)
      throw CheckpointError(path.string() + ": shape mismatch for " + name + ": stored " + shape_str(shape) +
                            ", config implies " + shape_str(ref->second.shape()));
    std::vector<float> values(numel(shape));
    for (auto& f : values) f = r.f32();
    if (group == "online") ckpt.pair.online.emplace(key, Tensor<float>::parameter(shape, std::move(values)));
    else if (group == "target") ckpt.pair.target.emplace(key, Tensor<float>::constant(shape, std::move(values)));
    else if (group == "adam.m") ckpt.optimizer.m.emplace(key, std::move(values));
    else if (group == "adam.v") ckpt.optimizer.v.emplace(key, std::move(values));
    else throw CheckpointError(path.string() + ": unknown entry group " + group);
  }
  if (!r.at_end()) throw CheckpointError(path.string() + ": trailing bytes after the tensor table");
  if (ckpt.pair.online.size() != reference.size() || ckpt.pair.target.size() != reference.size())
    throw CheckpointError(path.string() + ": parameter table is incomplete");
  return ckpt;
}

std::string metrics_row(std::size_t step, const StepResult& r) {
  std::ostringstream os;
  os << std::setprecision(9) << step << ',' << r.lr << ',' << r.bundle.mrm << ',' << r.bundle.mim << ','
     << r.bundle.mlm << ',' << r.bundle.itc << ',' << r.bundle.itm << ',' << r.bundle.total << ',' << r.tau << ','
     << r.target_variance;
  return os.str();
}

// ---- run driver ------------------------------------------------------------

std::vector<Example> training_corpus(const RunConfig& cfg) {
  return build_corpus(split_seeds(Split::train, cfg.train_pairs), cfg.model.max_text_len);
}

std::vector<Example> heldout_corpus(std::size_t pairs, std::size_t max_text_len, std::size_t object_count) {
  return build_corpus(split_seeds(Split::heldout, pairs, 0, object_count), max_text_len, object_count);
}

Trainer::Trainer(RunConfig cfg)
    : cfg_(std::move(cfg)),
      enc_(cfg_.model),
      pair_(init_target(init_parameters<float>(cfg_.model, cfg_.seed), cfg_.ema_alpha)),
      opt_(cfg_.optimizer) {
  cfg_.validate();
  corpus_ = std::make_shared<const std::vector<Example>>(training_corpus(cfg_));
}

Trainer::Trainer(Checkpoint ckpt)
    : cfg_(std::move(ckpt.config)), enc_(cfg_.model), pair_(std::move(ckpt.pair)), opt_(cfg_.optimizer),
      step_(ckpt.step) {
  cfg_.validate();
  opt_.state() = std::move(ckpt.optimizer);
  corpus_ = std::make_shared<const std::vector<Example>>(training_corpus(cfg_));
}

MaskedBatch Trainer::batch_for(std::size_t step) const {
  Rng rng = derive_rng(cfg_.seed, step, 3);
  std::vector<std::size_t> pool(corpus_->size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::vector<const Example*> picked;
  for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    picked.push_back(&(*corpus_)[pool[i]]);
  }
  return make_batch(picked, cfg_.masking, cfg_.model.num_patches(), cfg_.seed,
                    static_cast<std::uint64_t>(step) * cfg_.batch_size);
}

TrainStepOptions Trainer::step_options() const {
  TrainStepOptions o;
  o.losses.tasks = cfg_.tasks;
  o.losses.use_predictor = cfg_.use_predictor;
  o.use_ema = cfg_.use_ema;
  o.alpha = cfg_.ema_alpha;
  return o;
}

StepResult Trainer::step() {
  const MaskedBatch batch = batch_for(step_);
  Rng rng = derive_rng(cfg_.seed, step_, 4);
  StepResult r = train_step(enc_, pair_, batch, opt_, cfg_.schedule, step_, step_options(), rng);
  ++step_;
  return r;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = cfg_;
  for (const auto& [name, t] : pair_.online) c.pair.online.emplace(name, Tensor<float>::parameter(t.shape(), {t.values().begin(), t.values().end()}));
  for (const auto& [name, t] : pair_.target) c.pair.target.emplace(name, t.detach_copy());
  c.pair.alpha = pair_.alpha;
  c.optimizer = opt_.state();
  c.step = step_;
  return c;
}

void run_pretraining(Trainer& trainer, const std::filesystem::path& out_dir, const RunCallbacks& callbacks) {
  std::filesystem::create_directories(out_dir);
  const auto metrics_path = out_dir / "metrics.csv";
  const bool fresh = !std::filesystem::exists(metrics_path) || trainer.next_step() == 0;
  std::ofstream metrics(metrics_path, fresh ? std::ios::trunc : std::ios::app);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
  if (fresh) metrics << kMetricsHeader << '\n';
  const RunConfig& cfg = trainer.config();
  while (!trainer.done()) {
    const std::size_t step = trainer.next_step();
    const StepResult r = trainer.step();
    if (step % cfg.log_every == 0) metrics << metrics_row(step, r) << '\n';
    if (callbacks.on_step) callbacks.on_step(step, r);
    if (cfg.checkpoint_every > 0 && trainer.next_step() % cfg.checkpoint_every == 0 && !trainer.done())
      save_checkpoint(trainer.checkpoint(), out_dir / ("ckpt_" + std::to_string(trainer.next_step()) + ".bin"));
  }
  metrics.flush();
  save_checkpoint(trainer.checkpoint(), out_dir / "final.bin");
}

}  // namespace mamo
