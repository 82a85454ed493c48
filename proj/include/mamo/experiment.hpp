#pragma once

// One configured run end to end: pretraining, held-out retrieval and the
// collapse diagnostic, reduced to a summary row with a fixed schema.

#include "mamo/evalviz.hpp"
#include "mamo/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mamo {

// Masked probe batches over held-out scenes, identical for every run that
// shares the model geometry and masking ratios.
std::vector<MaskedBatch> probe_batches(const RunConfig& cfg, std::size_t count = 4);

struct RunSummary {
  RunConfig config;
  std::size_t steps_run = 0;
  bool nonfinite = false;
  std::string failure;  // diagnostic of the aborted step, if any
  LossBundle last;      // losses of the last completed step
  RetrievalReport retrieval;
  CollapseMetrics collapse;
  double seconds = 0;

  static std::string csv_header();
  std::string csv_row() const;
};

// Evaluates the online network of a trainer.
RunSummary summarize(const Trainer& trainer);

// Trains from scratch into out_dir, then summarises. A non-finite loss stops
// training and is reported in the summary instead of thrown.
RunSummary run_experiment(const RunConfig& cfg, const std::filesystem::path& out_dir,
                          const RunCallbacks& callbacks = {});

// Appends a row, writing the header first when the file is new or empty.
void append_summary(const RunSummary& s, const std::filesystem::path& csv);

}  // namespace mamo
