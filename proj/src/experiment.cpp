#include "mamo/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace mamo {

namespace {

constexpr std::uint64_t kProbeSeed = 0x70726f6265ull;

}  // namespace

std::vector<MaskedBatch> probe_batches(const RunConfig& cfg, std::size_t count) {
  const std::size_t B = cfg.batch_size;
  const auto corpus = heldout_corpus(count * B, cfg.model.max_text_len);
  std::vector<MaskedBatch> out;
  for (std::size_t b = 0; b < count; ++b) {
    std::vector<const Example*> picked;
    for (std::size_t i = 0; i < B; ++i) picked.push_back(&corpus[b * B + i]);
    out.push_back(make_batch(picked, cfg.masking, cfg.model.num_patches(), kProbeSeed, b * B));
  }
  return out;
}

std::string RunSummary::csv_header() {
  return "tasks,mim_target,use_ema,use_predictor,mask_ratio_image,mask_ratio_text,ema_alpha,seed,steps,"
         "steps_run,nonfinite,mrm,mim,mlm,itc,itm,total," +
         RetrievalReport::csv_header() + ",participation_ratio,mean_std,seconds";
}

std::string RunSummary::csv_row() const {
  std::ostringstream os;
  os << std::setprecision(6);
  // The task list is written with '+' so the row stays comma-separated.
  std::string tasks = config.tasks.str();
  for (auto& c : tasks)
    if (c == ',') c = '+';
  os << tasks << ',' << to_string(config.model.mim_target) << ',' << config.use_ema << ',' << config.use_predictor
     << ',' << config.masking.image_ratio << ',' << config.masking.text_ratio << ',' << config.ema_alpha << ','
     << config.seed << ',' << config.schedule.total_steps << ',' << steps_run << ',' << nonfinite << ',' << last.mrm
     << ',' << last.mim << ',' << last.mlm << ',' << last.itc << ',' << last.itm << ',' << last.total << ','
     << retrieval.csv_row() << ',' << collapse.participation_ratio << ',' << collapse.mean_std << ','
     << std::setprecision(4) << seconds;
  return os.str();
}

RunSummary summarize(const Trainer& trainer) {
  RunSummary s;
  s.config = trainer.config();
  s.steps_run = trainer.next_step();
  const auto gallery = heldout_corpus(s.config.eval_pairs, s.config.model.max_text_len);
  s.retrieval = zeroshot_retrieval(trainer.encoders(), trainer.pair().online, gallery,
                                   std::min(s.config.rerank_k, gallery.size()));
  s.collapse = collapse_metrics(trainer.encoders(), trainer.pair().online, probe_batches(s.config),
                                s.config.use_predictor);
  return s;
}

RunSummary run_experiment(const RunConfig& cfg, const std::filesystem::path& out_dir, const RunCallbacks& callbacks) {
  const auto start = std::chrono::steady_clock::now();
  Trainer trainer(cfg);
  LossBundle last;
  RunCallbacks cb;
  cb.on_step = [&](std::size_t step, const StepResult& r) {
    last = r.bundle;
    if (callbacks.on_step) callbacks.on_step(step, r);
  };
  RunSummary s;
  try {
    run_pretraining(trainer, out_dir, cb);
    s = summarize(trainer);
  } catch (const NumericError& e) {
    s.config = trainer.config();
    s.steps_run = trainer.next_step();
    s.nonfinite = true;
    s.failure = e.what();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    s.retrieval = {s.config.eval_pairs, s.config.rerank_k, nan, nan, nan, nan, nan, nan};
    s.collapse.participation_ratio = nan;
    s.collapse.mean_std = nan;
  }
  s.last = last;
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

void append_summary(const RunSummary& s, const std::filesystem::path& csv) {
  const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
  std::ofstream out(csv, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + csv.string());
  if (fresh) out << RunSummary::csv_header() << '\n';
  out << s.csv_row() << '\n';
}

}  // namespace mamo
