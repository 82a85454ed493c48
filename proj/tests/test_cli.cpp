// Drives the built `mamo` binary end to end on a tiny config.

#include "mamo/experiment.hpp"
#include "mamo/imageio.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "mamo_cli_test";

int run(const std::string& args, const std::string& log = "cli.log") {
  const std::string cmd = std::string("\"") + MAMO_CLI_PATH + "\" " + args + " > \"" + (kWork / log).string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path tiny_config() {
  const fs::path p = kWork / "tiny.cfg";
  std::ofstream out(p);
  out << "embed_dim=16\nnum_heads=2\nimg_layers=1\ntxt_layers=1\nfusion_layers=2\n"
         "proj_hidden_dim=16\nitc_proj_dim=8\nmlp_ratio=2\n"
         "batch_size=4\ntrain_pairs=16\neval_pairs=8\nrerank_k=4\n"
         "total_steps=6\nwarmup_steps=2\ncheckpoint_every=3\n";
  return p;
}

struct Workdir {
  Workdir() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
  ~Workdir() { fs::remove_all(kWork); }
};

}  // namespace

TEST_CASE("bad invocations exit nonzero") {
  Workdir w;
  CHECK(run("pretrain " + (kWork / "missing.cfg").string()) != 0);
  CHECK(run("") != 0);
  CHECK(run("eval " + (kWork / "missing.bin").string()) != 0);
  const auto cfg = tiny_config();
  std::ofstream(kWork / "bad.cfg") << "embed_dim=fifteen\n";
  CHECK(run("pretrain " + (kWork / "bad.cfg").string()) != 0);
  CHECK(slurp(kWork / "cli.log").find("embed_dim") != std::string::npos);
  CHECK(run("ablate " + cfg.string() + " --tasks mrm,bogus --out " + (kWork / "x").string()) != 0);
}

TEST_CASE("pretrain is reproducible and its checkpoint feeds eval and gradcam") {
  Workdir w;
  const auto cfg = tiny_config();
  REQUIRE(run("pretrain " + cfg.string() + " --seed 3 --quiet --out " + (kWork / "a").string()) == 0);
  REQUIRE(run("pretrain " + cfg.string() + " --seed 3 --quiet --out " + (kWork / "b").string()) == 0);
  const auto metrics = slurp(kWork / "a" / "metrics.csv");
  CHECK(metrics.rfind("step,lr,", 0) == 0);
  CHECK(metrics == slurp(kWork / "b" / "metrics.csv"));
  CHECK(fs::exists(kWork / "a" / "ckpt_3.bin"));
  CHECK(fs::exists(kWork / "a" / "config.txt"));

  REQUIRE(run("pretrain " + cfg.string() + " --seed 4 --quiet --out " + (kWork / "c").string()) == 0);
  CHECK(metrics != slurp(kWork / "c" / "metrics.csv"));

  const auto final_ckpt = (kWork / "a" / "final.bin").string();
  REQUIRE(run("eval " + final_ckpt + " --out " + (kWork / "eval").string(), "eval.log") == 0);
  const auto report = slurp(kWork / "eval" / "retrieval.csv");
  CHECK(report.rfind(mamo::RetrievalReport::csv_header() + "\n8,4,", 0) == 0);

  REQUIRE(run("gradcam " + final_ckpt + " --seed 5 --objects 1 --loss mrm_image --mask-patches 0 1 2 --out " +
              (kWork / "cam").string()) == 0);
  const auto pgm = mamo::read_netpbm(kWork / "cam" / "scene5_mrm_image.pgm");
  CHECK(pgm.width == 32);
  CHECK(fs::exists(kWork / "cam" / "scene5_mrm_image_overlay.ppm"));
  CHECK(fs::exists(kWork / "cam" / "scene5_mrm_image_words.tsv"));
  CHECK(run("gradcam " + final_ckpt + " --loss mrm_text --mask-word zebra --out " + (kWork / "cam").string()) != 0);

  // Resume: 3 steps from the step-3 checkpoint continue the same sequence.
  REQUIRE(run("pretrain " + cfg.string() + " --quiet --resume " + (kWork / "a" / "ckpt_3.bin").string() + " --out " +
              (kWork / "r").string()) == 0);
  CHECK(slurp(kWork / "r" / "final.bin") == slurp(kWork / "a" / "final.bin"));
}

TEST_CASE("ablate appends rows under a fixed header") {
  Workdir w;
  const auto cfg = tiny_config();
  const auto summary = (kWork / "summary.csv").string();
  REQUIRE(run("ablate " + cfg.string() + " --steps 2 --tasks itc,itm --out " + (kWork / "s1").string() +
              " --summary " + summary) == 0);
  REQUIRE(run("ablate " + cfg.string() + " --steps 2 --no-ema --no-predictor --out " + (kWork / "s2").string() +
              " --summary " + summary) == 0);
  std::ifstream in(summary);
  std::string header, row1, row2, extra;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  CHECK_FALSE(std::getline(in, extra));
  CHECK(header == mamo::RunSummary::csv_header());
  const auto fields = [](const std::string& s) { return std::count(s.begin(), s.end(), ',') + 1; };
  CHECK(fields(row1) == fields(header));
  CHECK(fields(row2) == fields(header));
  CHECK(row1.rfind("itc+itm,", 0) == 0);
  CHECK(row2.find(",0,0,") != std::string::npos);  // use_ema, use_predictor
}

TEST_CASE("export-corpus writes the requested pairs") {
  Workdir w;
  REQUIRE(run("export-corpus --pairs 5 --split heldout --out " + (kWork / "corpus").string()) == 0);
  CHECK(fs::exists(kWork / "corpus" / "4.ppm"));
  CHECK(fs::exists(kWork / "corpus" / "index.tsv"));
}
