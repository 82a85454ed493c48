#include "mamo/config.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <vector>

namespace mamo {

std::string to_string(MimTarget t) {
  return t == MimTarget::pixels ? "pixels" : "momentum";
}

MimTarget parse_mim_target(const std::string& s) {
  if (s == "momentum") return MimTarget::momentum;
  if (s == "pixels") return MimTarget::pixels;
  throw ConfigError("unknown MIM target '" + s + "' (expected momentum|pixels)");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid model config: " + what);
  };
  require(patch_size > 0 && image_size > 0, "image_size and patch_size must be positive");
  require(image_size % patch_size == 0, "image_size must be divisible by patch_size");
  require(num_heads > 0 && embed_dim % num_heads == 0, "embed_dim must be divisible by num_heads");
  require(channels > 0 && embed_dim > 0, "channels and embed_dim must be positive");
  require(fusion_layers > 0, "fusion_layers must be positive");
  require(vocab_size > 5, "vocab_size must exceed the special tokens");
  require(max_text_len >= 2, "max_text_len must hold [CLS] and a word");
  require(proj_hidden_dim > 0 && itc_proj_dim > 0 && mlp_ratio > 0, "head widths must be positive");
  require(temperature_init > 0, "temperature_init must be positive");
  require(init_std > 0, "init_std must be positive");
}

TaskSet TaskSet::parse(const std::string& csv) {
  TaskSet t{false, false, false, false, false};
  std::stringstream ss(csv);
  std::string item;
  bool any = false;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    any = true;
    if (item == "mrm") t.mrm = true;
    else if (item == "mim") t.mim = true;
    else if (item == "mlm") t.mlm = true;
    else if (item == "itc") t.itc = true;
    else if (item == "itm") t.itm = true;
    else if (item == "all") t = TaskSet{};
    else throw ConfigError("unknown task '" + item + "' (expected mrm,mim,mlm,itc,itm or all)");
  }
  if (!any) throw ConfigError("task set is empty");
  return t;
}

std::string TaskSet::str() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += name;
  };
  add(mrm, "mrm");
  add(mim, "mim");
  add(mlm, "mlm");
  add(itc, "itc");
  add(itm, "itm");
  return out;
}

void RunConfig::validate() const {
  model.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid run config: " + what);
  };
  require(batch_size >= 2, "batch_size must be at least 2");
  require(train_pairs >= batch_size, "train_pairs must be at least batch_size");
  require(eval_pairs >= 1, "eval_pairs must be positive");
  require(rerank_k >= 1, "rerank_k must be positive");
  require(ema_alpha >= 0 && ema_alpha <= 1, "ema_alpha must lie in [0, 1]");
  require(masking.text_ratio >= 0 && masking.text_ratio <= 1, "text mask ratio must lie in [0, 1]");
  require(masking.image_ratio >= 0 && masking.image_ratio < 1, "image mask ratio must lie in [0, 1)");
  require(schedule.total_steps > 0, "total_steps must be positive");
  require(schedule.peak_lr >= 0 && schedule.final_lr >= 0, "learning rates must be nonnegative");
  require(log_every >= 1, "log_every must be positive");
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  return static_cast<std::size_t>(out);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError(key + ": expected true|false, got '" + v + "'");
}

// One table of (key, reader, writer) per record keeps parse and format in sync.
struct Field {
  std::string key;
  std::function<void(const std::string&)> read;
  std::function<std::string()> write;
};

Field size_field(const std::string& key, std::size_t& ref) {
  return {key, [&ref, key](const std::string& v) { ref = parse_size(key, v); },
          [&ref] { return std::to_string(ref); }};
}

Field double_field(const std::string& key, double& ref) {
  return {key, [&ref, key](const std::string& v) { ref = parse_double(key, v); },
          [&ref] { return fmt_double(ref); }};
}

Field bool_field(const std::string& key, bool& ref) {
  return {key, [&ref, key](const std::string& v) { ref = parse_bool(key, v); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

std::vector<Field> model_fields(ModelConfig& c) {
  return {
      size_field("image_size", c.image_size),
      size_field("patch_size", c.patch_size),
      size_field("channels", c.channels),
      size_field("embed_dim", c.embed_dim),
      size_field("num_heads", c.num_heads),
      size_field("img_layers", c.img_layers),
      size_field("txt_layers", c.txt_layers),
      size_field("fusion_layers", c.fusion_layers),
      size_field("vocab_size", c.vocab_size),
      size_field("max_text_len", c.max_text_len),
      size_field("proj_hidden_dim", c.proj_hidden_dim),
      size_field("itc_proj_dim", c.itc_proj_dim),
      size_field("mlp_ratio", c.mlp_ratio),
      size_field("mim_decoder_depth", c.mim_decoder_depth),
      double_field("temperature_init", c.temperature_init),
      double_field("init_std", c.init_std),
      {"mim_target", [&c](const std::string& v) { c.mim_target = parse_mim_target(v); },
       [&c] { return to_string(c.mim_target); }},
  };
}

std::vector<Field> run_fields(RunConfig& c) {
  auto fields = model_fields(c.model);
  std::vector<Field> more = {
      double_field("peak_lr", c.schedule.peak_lr),
      size_field("warmup_steps", c.schedule.warmup_steps),
      size_field("total_steps", c.schedule.total_steps),
      double_field("final_lr", c.schedule.final_lr),
      double_field("beta1", c.optimizer.beta1),
      double_field("beta2", c.optimizer.beta2),
      double_field("adam_eps", c.optimizer.eps),
      double_field("weight_decay", c.optimizer.weight_decay),
      double_field("grad_clip", c.optimizer.grad_clip),
      double_field("mask_ratio_text", c.masking.text_ratio),
      double_field("mask_ratio_image", c.masking.image_ratio),
      {"tasks", [&c](const std::string& v) { c.tasks = TaskSet::parse(v); }, [&c] { return c.tasks.str(); }},
      double_field("ema_alpha", c.ema_alpha),
      bool_field("use_ema", c.use_ema),
      bool_field("use_predictor", c.use_predictor),
      size_field("batch_size", c.batch_size),
      size_field("train_pairs", c.train_pairs),
      size_field("eval_pairs", c.eval_pairs),
      size_field("rerank_k", c.rerank_k),
      {"seed", [&c](const std::string& v) { c.seed = parse_size("seed", v); },
       [&c] { return std::to_string(c.seed); }},
      size_field("checkpoint_every", c.checkpoint_every),
      size_field("log_every", c.log_every),
      {"out_dir", [&c](const std::string& v) { c.out_dir = v; }, [&c] { return c.out_dir; }},
  };
  for (auto& f : more) fields.push_back(std::move(f));
  return fields;
}

void apply_fields(const KeyValues& kv, std::vector<Field>& fields, std::set<std::string>* consumed,
                  bool reject_unknown) {
  for (const auto& [k, v] : kv) {
    bool found = false;
    for (auto& f : fields) {
      if (f.key == k) {
        f.read(v);
        found = true;
        break;
      }
    }
    if (found && consumed) consumed->insert(k);
    if (!found && reject_unknown) throw ConfigError("unknown config key '" + k + "'");
  }
}

}  // namespace

void apply_key_values(const KeyValues& kv, ModelConfig& cfg, std::set<std::string>* consumed) {
  auto fields = model_fields(cfg);
  apply_fields(kv, fields, consumed, consumed == nullptr);
}

void apply_key_values(const KeyValues& kv, RunConfig& cfg) {
  auto fields = run_fields(cfg);
  apply_fields(kv, fields, nullptr, true);
}

KeyValues to_key_values(const ModelConfig& cfg) {
  ModelConfig copy = cfg;
  KeyValues kv;
  for (auto& f : model_fields(copy)) kv[f.key] = f.write();
  return kv;
}

KeyValues to_key_values(const RunConfig& cfg) {
  RunConfig copy = cfg;
  KeyValues kv;
  for (auto& f : run_fields(copy)) kv[f.key] = f.write();
  return kv;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  apply_key_values(parse_key_values(ss.str()), cfg);
  cfg.validate();
  return cfg;
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file '" + path.string() + "'");
  out << "# run configuration (key=value)\n" << format_key_values(to_key_values(cfg));
}

}  // namespace mamo
