// mamo: pretrain, evaluate, visualise and ablate the toy vision-language model.

#include "mamo/evalviz.hpp"
#include "mamo/experiment.hpp"
#include "mamo/log.hpp"
#include "mamo/runtime.hpp"
#include "mamo/trainer.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace mamo;

namespace {

// MAMO_SEED wins over both the config file and --seed.
void apply_seed(RunConfig& cfg, const std::optional<std::uint64_t>& flag) {
  if (flag) cfg.seed = *flag;
  if (const char* env = std::getenv("MAMO_SEED")) {
    KeyValues kv{{"seed", env}};
    RunConfig probe = cfg;
    try {
      apply_key_values(kv, probe);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("MAMO_SEED: ") + e.what());
    }
    cfg.seed = probe.seed;
  }
}

void print_progress(std::size_t step, const StepResult& r, std::size_t total) {
  if (step % 100 != 0 && step + 1 != total) return;
  std::cerr << "step " << step << "/" << total << "  total " << r.bundle.total << "  itc " << r.bundle.itc
            << "  itm " << r.bundle.itm << "  lr " << r.lr << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Jointly masked vision-language pretraining on a synthetic shapes corpus"};
  app.require_subcommand(1);

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "Train from a key=value config file");
  std::string pre_config;
  std::optional<std::uint64_t> pre_seed;
  std::string pre_out;
  std::optional<std::size_t> pre_steps;
  std::string pre_resume;
  bool pre_quiet = false;
  pretrain->add_option("config", pre_config, "Config file")->required()->check(CLI::ExistingFile);
  pretrain->add_option("--seed", pre_seed, "Global seed");
  pretrain->add_option("--out", pre_out, "Output directory (default: out_dir from the config)");
  pretrain->add_option("--steps", pre_steps, "Override total_steps");
  pretrain->add_option("--resume", pre_resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  pretrain->add_flag("--quiet", pre_quiet, "No progress lines");

  // eval
  auto* eval = app.add_subcommand("eval", "Zero-shot retrieval on held-out pairs");
  std::string eval_ckpt;
  std::optional<std::size_t> eval_pairs;
  std::optional<std::size_t> eval_k;
  std::string eval_out;
  eval->add_option("checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--pairs", eval_pairs, "Gallery size");
  eval->add_option("--rerank-k", eval_k, "ITM re-ranking depth");
  eval->add_option("--out", eval_out, "Directory for retrieval.csv");

  // gradcam
  auto* cam = app.add_subcommand("gradcam", "Grad-CAM heatmap on a fusion layer");
  std::string cam_ckpt;
  std::uint64_t cam_seed = 0;
  std::string cam_loss = "mrm_text";
  std::string cam_word;
  std::vector<std::size_t> cam_patches;
  std::optional<std::size_t> cam_layer;
  std::size_t cam_objects = 1;
  std::string cam_out = "gradcam";
  cam->add_option("checkpoint", cam_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  cam->add_option("--seed", cam_seed, "Scene seed");
  cam->add_option("--loss", cam_loss, "mrm_text, mrm_image or itm");
  auto* word_opt = cam->add_option("--mask-word", cam_word, "Word to mask (mrm_text)");
  auto* patch_opt = cam->add_option("--mask-patches", cam_patches, "Patch indices to mask (mrm_image)");
  word_opt->excludes(patch_opt);
  cam->add_option("--layer", cam_layer, "Fusion layer, 0-based (default: last)");
  cam->add_option("--objects", cam_objects, "Objects in the scene (1-3)")->check(CLI::Range(1, 3));
  cam->add_option("--out", cam_out, "Output directory");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train one ablation setting and append a summary row");
  std::string abl_config;
  std::optional<std::uint64_t> abl_seed;
  std::string abl_out = "ablate";
  std::optional<std::size_t> abl_steps;
  std::string abl_tasks;
  std::string abl_mim;
  bool abl_no_ema = false;
  bool abl_no_pred = false;
  std::optional<double> abl_mri, abl_mrt;
  std::string abl_summary;
  ablate->add_option("config", abl_config, "Base config file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--seed", abl_seed, "Global seed");
  ablate->add_option("--out", abl_out, "Output directory for this run");
  ablate->add_option("--steps", abl_steps, "Override total_steps");
  ablate->add_option("--tasks", abl_tasks, "Comma list of mrm,mim,mlm,itc,itm or 'all'");
  ablate->add_option("--mim-target", abl_mim, "momentum or pixels");
  ablate->add_flag("--no-ema", abl_no_ema, "Copy the online weights into the target every step");
  ablate->add_flag("--no-predictor", abl_no_pred, "Drop h_mrm from the MRM prediction path");
  ablate->add_option("--mask-ratio-image", abl_mri, "Image masking ratio");
  ablate->add_option("--mask-ratio-text", abl_mrt, "Text masking ratio");
  ablate->add_option("--summary", abl_summary, "Summary CSV (default: <out>/ablation.csv)");

  // export-corpus
  auto* exp = app.add_subcommand("export-corpus", "Write synthetic pairs as PPM files plus index.tsv");
  std::size_t exp_pairs = 32;
  std::string exp_split = "train";
  std::string exp_out = "corpus";
  exp->add_option("--pairs", exp_pairs, "Number of pairs");
  exp->add_option("--split", exp_split, "train or heldout")->check(CLI::IsMember({"train", "heldout"}));
  exp->add_option("--out", exp_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*pretrain) {
      std::optional<Trainer> trainer;
      RunConfig cfg = load_run_config(pre_config);
      if (!pre_resume.empty()) {
        Checkpoint ckpt = load_checkpoint(pre_resume, &cfg.model);
        if (pre_steps) ckpt.config.schedule.total_steps = *pre_steps;
        trainer.emplace(std::move(ckpt));
      } else {
        apply_seed(cfg, pre_seed);
        if (pre_steps) cfg.schedule.total_steps = *pre_steps;
        cfg.validate();
        trainer.emplace(cfg);
      }
      const fs::path out = pre_out.empty() ? fs::path(trainer->config().out_dir) : fs::path(pre_out);
      fs::create_directories(out);
      save_run_config(trainer->config(), out / "config.txt");
      RunCallbacks cb;
      const std::size_t total = trainer->config().schedule.total_steps;
      if (!pre_quiet) cb.on_step = [total](std::size_t s, const StepResult& r) { print_progress(s, r, total); };
      run_pretraining(*trainer, out, cb);
      std::cout << "wrote " << (out / "final.bin").string() << '\n';
    } else if (*eval) {
      Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const std::size_t pairs = eval_pairs.value_or(ckpt.config.eval_pairs);
      const std::size_t k = std::min(eval_k.value_or(ckpt.config.rerank_k), pairs);
      Encoders<float> enc(ckpt.config.model);
      const auto gallery = heldout_corpus(pairs, ckpt.config.model.max_text_len);
      const auto report = zeroshot_retrieval(enc, ckpt.pair.online, gallery, k);
      std::cout << RetrievalReport::csv_header() << '\n' << report.csv_row() << '\n';
      if (!eval_out.empty()) {
        fs::create_directories(eval_out);
        std::ofstream csv(fs::path(eval_out) / "retrieval.csv");
        csv << RetrievalReport::csv_header() << '\n' << report.csv_row() << '\n';
      }
    } else if (*cam) {
      Checkpoint ckpt = load_checkpoint(cam_ckpt);
      Encoders<float> enc(ckpt.config.model);
      const auto scene = make_example(generate_pair(cam_seed, cam_objects), ckpt.config.model.max_text_len);
      CamRequest req;
      req.image = scene.image;
      req.ids = scene.ids;
      req.kind = parse_cam_loss(cam_loss);
      req.layer = cam_layer.value_or(ckpt.config.model.fusion_layers - 1);
      req.use_predictor = ckpt.config.use_predictor;
      if (req.kind == CamLoss::mrm_text) {
        if (cam_word.empty()) throw std::invalid_argument("--loss mrm_text needs --mask-word");
        const std::int32_t id = vocabulary().id(cam_word);
        for (std::size_t t = 0; t < req.ids.size(); ++t)
          if (req.ids[t] == id && id >= Vocabulary::kFirstWord) req.masked.push_back(t);
        if (req.masked.empty())
          throw std::invalid_argument("word '" + cam_word + "' does not occur in caption '" + scene.caption + "'");
      } else if (req.kind == CamLoss::mrm_image) {
        if (cam_patches.empty()) throw std::invalid_argument("--loss mrm_image needs --mask-patches");
        req.masked = cam_patches;
      }
      const auto heat = gradcam(enc, ckpt.pair, req);
      fs::create_directories(cam_out);
      const fs::path stem = fs::path(cam_out) / ("scene" + std::to_string(cam_seed) + "_" + cam_loss);
      emit_heatmap(heat, scene.image, ckpt.config.model.image_size, stem);
      std::cout << "caption: " << scene.caption << '\n';
      for (std::size_t y = 0; y < heat.grid_h; ++y) {
        for (std::size_t x = 0; x < heat.grid_w; ++x) std::cout << (x ? "\t" : "") << heat.scores[y * heat.grid_w + x];
        std::cout << '\n';
      }
      if (heat.zero) std::cout << "note: no gradient reached the attention map; heatmap is all zero\n";
      std::cout << "wrote " << stem.string() << ".pgm\n";
    } else if (*ablate) {
      RunConfig cfg = load_run_config(abl_config);
      apply_seed(cfg, abl_seed);
      if (abl_steps) cfg.schedule.total_steps = *abl_steps;
      if (!abl_tasks.empty()) cfg.tasks = TaskSet::parse(abl_tasks);
      if (!abl_mim.empty()) cfg.model.mim_target = parse_mim_target(abl_mim);
      if (abl_no_ema) cfg.use_ema = false;
      if (abl_no_pred) cfg.use_predictor = false;
      if (abl_mri) cfg.masking.image_ratio = *abl_mri;
      if (abl_mrt) cfg.masking.text_ratio = *abl_mrt;
      cfg.validate();
      const fs::path out = abl_out;
      fs::create_directories(out);
      save_run_config(cfg, out / "config.txt");
      const std::size_t total = cfg.schedule.total_steps;
      RunCallbacks cb;
      cb.on_step = [total](std::size_t s, const StepResult& r) { print_progress(s, r, total); };
      const auto summary = run_experiment(cfg, out, cb);
      const fs::path csv = abl_summary.empty() ? out / "ablation.csv" : fs::path(abl_summary);
      append_summary(summary, csv);
      std::cout << RunSummary::csv_header() << '\n' << summary.csv_row() << '\n';
      if (summary.nonfinite) std::cout << "diverged: " << summary.failure << '\n';
    } else if (*exp) {
      const Split split = exp_split == "train" ? Split::train : Split::heldout;
      const auto corpus = build_corpus(split_seeds(split, exp_pairs), ModelConfig{}.max_text_len);
      export_corpus(corpus, exp_out);
      std::cout << "wrote " << corpus.size() << " pairs to " << exp_out << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "mamo: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
