#include "mamo/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mamo;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  RunConfig cfg;
  cfg.model.embed_dim = 16;
  cfg.model.num_heads = 2;
  cfg.model.img_layers = 1;
  cfg.model.txt_layers = 1;
  cfg.model.fusion_layers = 1;
  cfg.model.proj_hidden_dim = 16;
  cfg.model.itc_proj_dim = 8;
  cfg.model.mlp_ratio = 2;
  cfg.batch_size = 4;
  cfg.train_pairs = 32;
  cfg.schedule.warmup_steps = 10;
  cfg.schedule.total_steps = 200;
  cfg.schedule.peak_lr = 1e-3;
  cfg.checkpoint_every = 0;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mamo_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

template <typename T>
std::vector<T> flat(const ParamMap<T>& m) {
  std::vector<T> out;
  for (const auto& [name, t] : m) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("learning rate schedule") {
  ScheduleConfig s;
  s.peak_lr = 3e-4;
  s.final_lr = 1e-5;
  s.warmup_steps = 100;
  s.total_steps = 3000;
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(50, s) == doctest::Approx(1.5e-4).epsilon(1e-12));
  CHECK(lr_at(100, s) == 3e-4);
  CHECK(lr_at(1550, s) == doctest::Approx((3e-4 + 1e-5) / 2).epsilon(1e-12));
  CHECK(lr_at(3000, s) == 1e-5);
  CHECK(lr_at(5000, s) == 1e-5);
  for (std::size_t t = 101; t < 3000; t += 97) CHECK(lr_at(t, s) < lr_at(t - 1, s));
  ScheduleConfig no_warmup = s;
  no_warmup.warmup_steps = 0;
  CHECK(lr_at(0, no_warmup) == 3e-4);
}

TEST_CASE("decoupled weight decay shrinks by exactly 1 - lr * wd with zero gradients") {
  ParamMap<float> params;
  params.emplace("w", Tensor<float>::parameter({4}, {1.0f, -2.0f, 0.5f, 3.0f}));
  params.emplace("w.b", Tensor<float>::parameter({2}, {1.0f, 2.0f}));
  for (auto& [name, t] : params) t.node()->grad.assign(t.size(), 0.0f);
  OptimizerConfig oc;
  oc.weight_decay = 0.01;
  AdamW opt(oc);
  const double lr = 0.5;
  const float factor = static_cast<float>(1.0 - lr * 0.01);
  std::vector<float> expect(params.at("w").values().begin(), params.at("w").values().end());
  for (int step = 0; step < 3; ++step) {
    opt.step(params, lr);
    for (auto& e : expect) e *= factor;
    CHECK(std::vector<float>(params.at("w").values().begin(), params.at("w").values().end()) == expect);
  }
  CHECK(params.at("w.b").at(0) == 1.0f);
  CHECK(params.at("w.b").at(1) == 2.0f);
}

TEST_CASE("absent gradients count as zero and moments stay shaped like parameters") {
  ParamMap<float> params;
  params.emplace("w", Tensor<float>::parameter({3}, {1, 2, 3}));
  AdamW opt;
  opt.step(params, 0.1);
  CHECK(opt.state().m.at("w").size() == 3);
  CHECK(opt.state().v.at("w").size() == 3);
  CHECK(opt.state().t == 1);
}

TEST_CASE("gradient clipping bounds the effective gradient") {
  auto make = [] {
    ParamMap<float> p;
    p.emplace("w", Tensor<float>::parameter({2}, {0, 0}));
    p.at("w").node()->grad = {300.0f, 400.0f};
    return p;
  };
  OptimizerConfig clipped;
  clipped.grad_clip = 5.0;
  clipped.weight_decay = 0;
  auto a = make();
  AdamW opt(clipped);
  CHECK(opt.step(a, 1e-3) == doctest::Approx(500.0));
  CHECK(opt.state().m.at("w")[0] == doctest::Approx(0.1f * 3.0f));
  CHECK(opt.state().m.at("w")[1] == doctest::Approx(0.1f * 4.0f));
}

TEST_CASE("train_step leaves the target untouched between backward and the EMA update") {
  auto cfg = tiny_run();
  Trainer trainer(cfg);
  const auto target_before = flat(trainer.pair().target);
  const auto online_before = flat(trainer.pair().online);
  // With alpha = 1 the update keeps the target, so any change would come
  // from backward or the optimizer.
  auto pair = trainer.pair();
  AdamW opt(cfg.optimizer);
  TrainStepOptions o;
  o.alpha = 1.0;
  Rng rng(1);
  train_step(trainer.encoders(), pair, trainer.batch_for(5), opt, cfg.schedule, 5, o, rng);
  CHECK(flat(pair.target) == target_before);
  CHECK(flat(pair.online) != online_before);
  for (const auto& [name, t] : pair.target) CHECK_FALSE(t.has_grad());
}

TEST_CASE("temperature never drops below the clamp") {
  auto cfg = tiny_run();
  Trainer trainer(cfg);
  auto pair = trainer.pair();
  pair.online.at("log_tau").mutable_values()[0] = -20.0f;
  AdamW opt(cfg.optimizer);
  Rng rng(2);
  const auto r = train_step(trainer.encoders(), pair, trainer.batch_for(0), opt, cfg.schedule, 50, {}, rng);
  CHECK(r.tau >= kMinTemperature * (1 - 1e-6));
  CHECK(std::exp(pair.online.at("log_tau").at(0)) >= kMinTemperature * (1 - 1e-6));
}

TEST_CASE("overfitting one frozen batch lowers the loss within 50 steps") {
  auto cfg = tiny_run();
  cfg.schedule.warmup_steps = 0;
  Trainer trainer(cfg);
  const auto batch = trainer.batch_for(0);
  auto pair = trainer.pair();
  AdamW opt(cfg.optimizer);
  double first = 0, last = 0;
  for (std::size_t s = 0; s <= 50; ++s) {
    Rng rng(7);
    const auto r = train_step(trainer.encoders(), pair, batch, opt, cfg.schedule, 1, {}, rng);
    if (s == 0) first = r.bundle.total;
    last = r.bundle.total;
  }
  MESSAGE("frozen-batch total loss " << first << " -> " << last);
  CHECK(last < first);
}

TEST_CASE("200 training steps stay finite") {
  Trainer trainer(tiny_run());
  while (!trainer.done()) {
    const auto r = trainer.step();
    for (double v : {r.bundle.mrm, r.bundle.mim, r.bundle.mlm, r.bundle.itc, r.bundle.itm, r.bundle.total})
      REQUIRE(std::isfinite(v));
  }
  CHECK(trainer.next_step() == 200);
}

TEST_CASE("batches are a pure function of seed and step") {
  auto cfg = tiny_run();
  Trainer a(cfg), b(cfg);
  CHECK(a.batch_for(3).ids == b.batch_for(3).ids);
  CHECK(a.batch_for(3).masked_ids == b.batch_for(3).masked_ids);
  CHECK(a.batch_for(3).ids != a.batch_for(4).ids);
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto cfg = tiny_run();
  Trainer trainer(cfg);
  for (int i = 0; i < 3; ++i) trainer.step();
  const auto dir = scratch("roundtrip");
  const auto ckpt = trainer.checkpoint();
  save_checkpoint(ckpt, dir / "a.bin");
  const auto back = load_checkpoint(dir / "a.bin", &cfg.model);
  CHECK(back.config == ckpt.config);
  CHECK(back.step == 3);
  CHECK(back.optimizer == ckpt.optimizer);
  CHECK(back.pair.alpha == ckpt.pair.alpha);
  CHECK(flat(back.pair.online) == flat(ckpt.pair.online));
  CHECK(flat(back.pair.target) == flat(ckpt.pair.target));
  for (const auto& [name, t] : back.pair.online) CHECK(t.requires_grad());
  for (const auto& [name, t] : back.pair.target) CHECK_FALSE(t.requires_grad());
  save_checkpoint(back, dir / "b.bin");
  CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint errors") {
  auto cfg = tiny_run();
  Trainer trainer(cfg);
  const auto dir = scratch("errors");
  save_checkpoint(trainer.checkpoint(), dir / "good.bin");
  const std::string bytes = slurp(dir / "good.bin");
  auto write = [&](const std::string& name, const std::string& data) {
    std::ofstream(dir / name, std::ios::binary) << data;
    return dir / name;
  };

  SUBCASE("truncated") {
    CHECK_THROWS_AS(load_checkpoint(write("t.bin", bytes.substr(0, bytes.size() / 2))), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(write("t2.bin", bytes.substr(0, 10))), CheckpointError);
  }
  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(load_checkpoint(write("m.bin", bad)), CheckpointError);
  }
  SUBCASE("version mismatch") {
    std::string bad = bytes;
    bad[4] = static_cast<char>(kCheckpointVersion + 1);
    try {
      load_checkpoint(write("v.bin", bad));
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("trailing bytes") {
    CHECK_THROWS_AS(load_checkpoint(write("x.bin", bytes + "junk")), CheckpointError);
  }
  SUBCASE("different model config") {
    auto other = cfg.model;
    other.embed_dim = 32;
    CHECK_THROWS_AS(load_checkpoint(dir / "good.bin", &other), CheckpointError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.bin"), CheckpointError);
  }
  fs::remove_all(dir);
}

TEST_CASE("resume reproduces the uninterrupted loss sequence over 20 steps") {
  auto cfg = tiny_run();
  cfg.schedule.total_steps = 40;
  Trainer straight(cfg);
  std::vector<LossBundle> expected;
  for (int i = 0; i < 30; ++i) {
    const auto r = straight.step();
    if (i >= 10) expected.push_back(r.bundle);
  }
  Trainer first(cfg);
  for (int i = 0; i < 10; ++i) first.step();
  const auto dir = scratch("resume");
  save_checkpoint(first.checkpoint(), dir / "mid.bin");
  Trainer resumed(load_checkpoint(dir / "mid.bin"));
  CHECK(resumed.next_step() == 10);
  std::vector<LossBundle> got;
  for (int i = 0; i < 20; ++i) got.push_back(resumed.step().bundle);
  CHECK(got == expected);
  CHECK(flat(resumed.pair().online) == flat(straight.pair().online));
  fs::remove_all(dir);
}

TEST_CASE("run_pretraining writes metrics, periodic and final checkpoints") {
  auto cfg = tiny_run();
  cfg.schedule.total_steps = 6;
  cfg.checkpoint_every = 4;
  const auto dir = scratch("run");
  Trainer trainer(cfg);
  run_pretraining(trainer, dir);
  CHECK(fs::exists(dir / "ckpt_4.bin"));
  CHECK(fs::exists(dir / "final.bin"));
  std::ifstream in(dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == kMetricsHeader);
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) {
    CHECK(std::count(line.begin(), line.end(), ',') == 9);
    CHECK(line.rfind(std::to_string(rows) + ",", 0) == 0);
    ++rows;
  }
  CHECK(rows == 6);

  // Resuming from the periodic checkpoint appends the remaining rows only.
  const auto csv_before = slurp(dir / "metrics.csv");
  const auto resumed_dir = scratch("run_resumed");
  {
    std::ifstream src(dir / "metrics.csv");
    std::ofstream dst(resumed_dir / "metrics.csv", std::ios::trunc);
    std::string line;
    for (int i = 0; i < 5 && std::getline(src, line); ++i) dst << line << '\n';
  }
  Trainer resumed(load_checkpoint(dir / "ckpt_4.bin"));
  run_pretraining(resumed, resumed_dir);
  CHECK(slurp(resumed_dir / "metrics.csv") == csv_before);
  fs::remove_all(dir);
  fs::remove_all(resumed_dir);
}
