#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ncdseg/evaluation.hpp"
#include "ncdseg/io.hpp"
#include "ncdseg/trainer.hpp"

using namespace ncdseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string temp_file(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

struct Setup {
  Scenario sc;
  NetworkConfig net;
  TrainConfig cfg;
  TrainDataset ds;

  explicit Setup(int scenes = 8, int epochs = 2, uint64_t seed = 9)
      : sc(make_scenario("longtail", scenes, 3)) {
    net.n_base_classes = sc.task.num_base();
    net.n_novel_classes = sc.task.num_novel();
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.seed = seed;
    ds.clouds = sc.clouds;
    ds.aux = sc.aux;
  }
};

}  // namespace

TEST_CASE("learning-rate schedule endpoints") {
  TrainConfig cfg;
  cfg.warmup_fraction = 0.1;
  REQUIRE(lr_at(cfg, 0, 100) == 0.0);
  REQUIRE(lr_at(cfg, 10, 100) == Catch::Approx(cfg.lr_max));
  REQUIRE(lr_at(cfg, 100, 100) == Catch::Approx(cfg.lr_min));
  REQUIRE(lr_at(cfg, 55, 100) ==
          Catch::Approx(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min)));
  REQUIRE_THROWS_AS(lr_at(cfg, 101, 100), StepOutOfRange);
}

TEST_CASE("epoch step count follows ceil(N / batch)") {
  Setup s(8, 1);
  Trainer trainer(s.cfg, s.net, s.sc.task, s.ds);
  REQUIRE(trainer.total_steps() == 2);
  trainer.run(s.ds);
  REQUIRE(trainer.state().step == 2);
  REQUIRE(trainer.state().log.size() == 2);
}

TEST_CASE("a batch without novel points reduces to supervised training") {
  Setup s(4, 1);
  // strip the novel mask by relabeling novel points as base class 0
  for (auto& cloud : s.ds.clouds) {
    std::vector<int> labels(cloud.size());
    std::vector<uint8_t> mask(cloud.size(), 0);
    const auto view = cloud.eval_view();
    for (size_t i = 0; i < cloud.size(); ++i) {
      const int l = view.label(i);
      labels[i] = s.sc.task.is_novel(l) ? 0 : l;
    }
    cloud = LabeledCloud(cloud.coords, cloud.colors, labels, mask);
  }
  Trainer trainer(s.cfg, s.net, s.sc.task, s.ds);
  trainer.run(s.ds);
  REQUIRE(trainer.state().queue.size() == 0);  // nothing novel to store
  for (const auto& rec : trainer.state().log) {
    REQUIRE(std::isfinite(rec.seg));
    REQUIRE(rec.align == 0.0);
  }
}

TEST_CASE("training never reads novel ground-truth labels") {
  Setup s(6, 1);
  for (auto& cloud : s.ds.clouds) cloud.reset_eval_audit();
  Trainer trainer(s.cfg, s.net, s.sc.task, s.ds);
  trainer.run(s.ds);
  for (const auto& cloud : s.ds.clouds) REQUIRE(cloud.eval_label_reads() == 0);
}

TEST_CASE("gamma zero ignores missing auxiliary features") {
  Setup s(4, 1);
  s.cfg.gamma = 0.0;
  s.ds.aux.clear();
  Trainer trainer(s.cfg, s.net, s.sc.task, s.ds);
  trainer.run(s.ds);
  for (const auto& rec : trainer.state().log) REQUIRE(rec.align == 0.0);
}

TEST_CASE("gamma positive without aux features is rejected") {
  Setup s(4, 1);
  s.ds.aux.clear();
  REQUIRE_THROWS_AS(Trainer(s.cfg, s.net, s.sc.task, s.ds),
                    DimensionMismatch);
}

TEST_CASE("identical configs give bitwise-identical checkpoints") {
  Setup s(6, 2);
  const std::string p1 = temp_file("ncdseg_det1.ckpt");
  const std::string p2 = temp_file("ncdseg_det2.ckpt");
  {
    Trainer t(s.cfg, s.net, s.sc.task, s.ds);
    t.run(s.ds);
    t.save_checkpoint(p1);
  }
  {
    Trainer t(s.cfg, s.net, s.sc.task, s.ds);
    t.run(s.ds);
    t.save_checkpoint(p2);
  }
  REQUIRE(slurp(p1) == slurp(p2));
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("mid-run resume reproduces the uninterrupted run bitwise") {
  Setup s(6, 3);
  const std::string mid = temp_file("ncdseg_mid.ckpt");
  const std::string full = temp_file("ncdseg_full.ckpt");
  const std::string resumed = temp_file("ncdseg_res.ckpt");
  {
    Trainer t(s.cfg, s.net, s.sc.task, s.ds);
    t.run_steps(s.ds, 3);  // mid-epoch boundary
    t.save_checkpoint(mid);
    t.run(s.ds);
    t.save_checkpoint(full);
  }
  {
    Trainer t(s.cfg, s.net, s.sc.task, s.ds);
    t.load_checkpoint(mid);
    t.run(s.ds);
    t.save_checkpoint(resumed);
  }
  REQUIRE(slurp(full) == slurp(resumed));
  fs::remove(mid);
  fs::remove(full);
  fs::remove(resumed);
}

TEST_CASE("metric log records schedule values and prototype mass") {
  Setup s(4, 2);
  const std::string log_path = temp_file("ncdseg_metrics.jsonl");
  Trainer trainer(s.cfg, s.net, s.sc.task, s.ds);
  trainer.run(s.ds, log_path);

  const auto& log = trainer.state().log;
  REQUIRE(log.front().eps == Catch::Approx(s.cfg.sinkhorn.eps_start));
  REQUIRE(log.front().lr == 0.0);
  // epsilon decays monotonically
  for (size_t i = 1; i < log.size(); ++i)
    REQUIRE(log[i].eps <= log[i - 1].eps);
  // every prototype keeps its equipartition share at every step
  for (const auto& rec : log) {
    REQUIRE(rec.proto_mass.size() == 4);
    for (double m : rec.proto_mass)
      REQUIRE(m == Catch::Approx(0.25).margin(1e-9));
  }
  std::ifstream in(log_path);
  std::string line;
  size_t lines = 0;
  while (std::getline(in, line)) {
    REQUIRE(line.find("\"step\":") != std::string::npos);
    ++lines;
  }
  REQUIRE(lines == log.size());
  fs::remove(log_path);
}

TEST_CASE("base loss trends downward over training") {
  Setup s(12, 6, 5);
  s.cfg.batch_size = 2;
  Trainer trainer(s.cfg, s.net, s.sc.task, s.ds);
  trainer.run(s.ds);
  const auto& log = trainer.state().log;
  const size_t k = log.size() / 3;
  double early = 0.0, late = 0.0;
  for (size_t i = 0; i < k; ++i) early += log[i].seg;
  for (size_t i = log.size() - k; i < log.size(); ++i) late += log[i].seg;
  REQUIRE(std::isfinite(early));
  REQUIRE(late < early);
}

TEST_CASE("argmax ablation collapses prototypes while sinkhorn cannot") {
  Setup s(10, 3, 1);
  s.cfg.batch_size = 2;
  s.cfg.pseudo_mode = TrainConfig::PseudoMode::kArgmax;
  Trainer argmax(s.cfg, s.net, s.sc.task, s.ds);
  argmax.run(s.ds);
  double min_share = 1.0;
  const auto& log = argmax.state().log;
  const long last_epoch_start = 2 * argmax.steps_per_epoch();
  std::vector<double> mass(4, 0.0);
  long n = 0;
  for (const auto& rec : log)
    if (rec.step >= last_epoch_start) {
      for (int i = 0; i < 4; ++i) mass[static_cast<size_t>(i)] += rec.proto_mass[static_cast<size_t>(i)];
      ++n;
    }
  for (double m : mass) min_share = std::min(min_share, m / double(n));
  REQUIRE(min_share < 0.01);

  s.cfg.pseudo_mode = TrainConfig::PseudoMode::kSinkhorn;
  Trainer sk(s.cfg, s.net, s.sc.task, s.ds);
  sk.run(s.ds);
  for (const auto& rec : sk.state().log)
    for (double m : rec.proto_mass)
      REQUIRE(m >= 0.9 * 0.25);
}

TEST_CASE("checkpoint against wrong network config is rejected") {
  Setup s(4, 1);
  const std::string path = temp_file("ncdseg_cfgmismatch.ckpt");
  {
    Trainer t(s.cfg, s.net, s.sc.task, s.ds);
    t.run_steps(s.ds, 1);
    t.save_checkpoint(path);
  }
  NetworkConfig other = s.net;
  other.feature_dim = 16;
  Trainer t(s.cfg, other, s.sc.task, s.ds);
  REQUIRE_THROWS_AS(t.load_checkpoint(path), CheckpointMismatch);
  fs::remove(path);
}
