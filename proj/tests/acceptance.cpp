// Acceptance suite: one check per shipped guarantee, one PASS/FAIL line each.

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gradcheck.hpp"
#include "ncdseg/eums.hpp"
#include "ncdseg/evaluation.hpp"
#include "ncdseg/io.hpp"
#include "ncdseg/trainer.hpp"
#include "oracles.hpp"

using namespace ncdseg;
namespace fs = std::filesystem;

namespace {

void report(int criterion, const std::string& what, bool ok,
            const std::string& detail = "") {
  std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << criterion << ": "
            << what;
  if (!detail.empty()) std::cout << " (" << detail << ")";
  std::cout << "\n" << std::flush;
  REQUIRE(ok);
}

double seconds_since(
    const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

struct Instance {
  Matrix similarities;
  double eps;
};

std::vector<Instance> criterion1_instances() {
  std::vector<Instance> out;
  RngStream rng(1234);
  const double eps_grid[3] = {0.05, 0.1, 0.3};
  for (int k = 0; k < 50; ++k) {
    const Eigen::Index rho = 1 + Eigen::Index(rng.index(5));
    const Eigen::Index m = 1 + Eigen::Index(rng.index(50));
    Matrix s(rho, m);
    for (Eigen::Index i = 0; i < s.size(); ++i)
      s.data()[i] = rng.uniform(-1.0, 1.0);
    out.push_back({std::move(s), eps_grid[k % 3]});
  }
  return out;
}

/// Expected IoU of a uniform random predictor, mean over novel classes.
double uniform_prediction_baseline(const std::vector<LabeledCloud>& clouds,
                                   const NcdTaskSpec& task) {
  long total = 0;
  std::map<int, long> count;
  for (const auto& cloud : clouds) {
    const auto view = cloud.eval_view();
    for (size_t i = 0; i < cloud.size(); ++i) {
      ++count[view.label(i)];
      ++total;
    }
  }
  const double k = double(task.num_classes());
  double mean = 0.0;
  for (int id : task.novel_classes) {
    const double nc = double(count[id]);
    mean += nc / (double(total) + nc * (k - 1.0));
  }
  return mean / double(task.num_novel());
}

struct LongtailRun {
  double novel_miou = 0.0;
};

LongtailRun run_longtail(const Scenario& train, const Scenario& val,
                         uint64_t seed, bool queue_on, double gamma,
                         TrainConfig::PseudoMode mode) {
  NetworkConfig net;
  net.n_base_classes = train.task.num_base();
  net.n_novel_classes = train.task.num_novel();
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 1;  // desk-scale scenes are ~250x smaller than LiDAR scans
  cfg.seed = seed;
  cfg.selection.percentile = 0.3;
  cfg.gamma = gamma;
  cfg.queue_enabled = queue_on;
  cfg.queue_capacity = 512;
  cfg.queue_fraction = 0.2;
  cfg.pseudo_mode = mode;
  TrainDataset ds{train.clouds, train.aux};
  Trainer trainer(cfg, net, train.task, ds);
  trainer.run(ds);
  EvalOptions opts;
  opts.sinkhorn = cfg.sinkhorn;
  const MiouReport r =
      evaluate(net, trainer.state().params, val.clouds, train.task, opts);
  return {r.miou_novel};
}

}  // namespace

TEST_CASE("criterion 1: assignment solver matches an independent OT oracle") {
  const auto t0 = std::chrono::steady_clock::now();
  double max_dev = 0.0;
  for (const auto& inst : criterion1_instances()) {
    const AssignmentMatrix q = solve_assignment(inst.similarities, inst.eps, 5000);
    const Matrix ref = oracles::sinkhorn_converged(inst.similarities, inst.eps);
    max_dev = std::max(max_dev, (q - ref).cwiseAbs().maxCoeff());
  }
  const double elapsed = seconds_since(t0);
  std::ostringstream detail;
  detail << "max entrywise dev " << max_dev << ", " << elapsed << " s";
  report(1, "Sinkhorn oracle equivalence on 50 random instances",
         max_dev < 1e-5 && elapsed < 5.0, detail.str());
}

TEST_CASE("criterion 2: marginal feasibility at 20 and 3 iterations") {
  double dev20 = 0.0, row3 = 0.0;
  for (const auto& inst : criterion1_instances()) {
    const auto d = marginal_deviation(
        solve_assignment(inst.similarities, inst.eps, 20));
    dev20 = std::max({dev20, d.row, d.col});
    row3 = std::max(
        row3,
        marginal_deviation(solve_assignment(inst.similarities, inst.eps, 3))
            .row);
  }
  std::ostringstream detail;
  detail << "20-iter dev " << dev20 << ", 3-iter row dev " << row3;
  report(2, "transportation-polytope marginals", dev20 < 1e-4 && row3 < 1e-12,
         detail.str());
}

TEST_CASE("criterion 3: linear epsilon schedule hits its endpoints") {
  const EpsSchedule s{0.3, 0.05, 1000};
  bool ok = epsilon_at(s, 0) == 0.3 && epsilon_at(s, 1000) == 0.05;
  double max_line_dev = 0.0;
  for (long step = 0; step <= 1000; ++step) {
    const long double t = (long double)step / 1000.0L;
    const long double line = 0.3L * (1.0L - t) + 0.05L * t;
    max_line_dev = std::max(
        max_line_dev, std::abs(double((long double)epsilon_at(s, step) - line)));
    if (step > 0 && epsilon_at(s, step) > epsilon_at(s, step - 1)) ok = false;
  }
  std::ostringstream detail;
  detail << "max deviation from the line " << max_line_dev;
  report(3, "epsilon decays linearly from 0.3 to 0.05",
         ok && max_line_dev < 1e-12, detail.str());
}

TEST_CASE("criterion 4: hand-written gradients match finite differences") {
  const auto t0 = std::chrono::steady_clock::now();
  gradcheck::Harness harness(101, 24);
  RngStream rng(102);
  NetworkParams params = init_params(harness.cfg, rng);
  NetworkParams analytic = harness.analytic_grad(params);
  auto refs = gradcheck::collect_refs(params);
  auto analytic_refs = gradcheck::collect_refs(analytic);

  Eigen::Index total = 0;
  for (const auto& r : refs) total += r.size;

  RngStream pick(103);
  double full_err = 0.0;
  for (int trial = 0; trial < 32; ++trial) {
    Eigen::Index flat = Eigen::Index(pick.index(uint64_t(total)));
    size_t group = 0;
    while (flat >= refs[group].size) {
      flat -= refs[group].size;
      ++group;
    }
    const double fd = oracles::central_difference(
        [&]() { return harness.loss(params); }, refs[group].data + flat);
    full_err = std::max(
        full_err, oracles::relative_error(analytic_refs[group].data[flat], fd));
  }

  double layer_err = 0.0;
  for (size_t group = 0; group < refs.size(); ++group) {
    for (int trial = 0; trial < 2; ++trial) {
      const Eigen::Index i = Eigen::Index(pick.index(uint64_t(refs[group].size)));
      const double fd = oracles::central_difference(
          [&]() { return harness.loss(params); }, refs[group].data + i);
      layer_err = std::max(layer_err, oracles::relative_error(
                                          analytic_refs[group].data[i], fd));
    }
  }
  const double elapsed = seconds_since(t0);
  std::ostringstream detail;
  detail << "full-net err " << full_err << ", per-layer err " << layer_err
         << ", " << elapsed << " s";
  report(4, "finite-difference gradient check",
         full_err < 1e-3 && layer_err < 1e-4 && elapsed < 30.0, detail.str());
}

TEST_CASE("criterion 5: equipartition prevents collapse, argmax does not") {
  const Scenario sc = make_scenario("longtail", 24, 21);
  NetworkConfig net;
  net.n_base_classes = sc.task.num_base();
  net.n_novel_classes = sc.task.num_novel();
  TrainDataset ds{sc.clouds, sc.aux};

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 0;
  cfg.selection.percentile = 0.3;

  // Sinkhorn pseudo-labels: every prototype holds its equipartition share.
  Trainer sk(cfg, net, sc.task, ds);
  sk.run(ds);
  double min_share = 1.0;
  for (const auto& rec : sk.state().log)
    for (double m : rec.proto_mass) min_share = std::min(min_share, m);

  // Argmax self-training: at least one prototype starves within 3 epochs.
  cfg.pseudo_mode = TrainConfig::PseudoMode::kArgmax;
  Trainer am(cfg, net, sc.task, ds);
  am.run(ds);
  std::vector<double> mass(size_t(net.n_novel_classes), 0.0);
  long n = 0;
  for (const auto& rec : am.state().log)
    if (rec.step >= 2 * am.steps_per_epoch()) {
      for (size_t i = 0; i < mass.size(); ++i) mass[i] += rec.proto_mass[i];
      ++n;
    }
  double argmax_min = 1.0;
  for (double m : mass) argmax_min = std::min(argmax_min, m / double(n));

  const double share = 1.0 / double(net.n_novel_classes);
  std::ostringstream detail;
  detail << "sinkhorn min share " << min_share << " vs bound " << 0.9 * share
         << "; argmax min share " << argmax_min;
  report(5, "anti-collapse property and its ablation",
         min_share >= 0.9 * share && argmax_min < 0.01, detail.str());
}

TEST_CASE("criterion 6: end-to-end synthetic NCD") {
  const auto t0 = std::chrono::steady_clock::now();
  const Scenario train = make_scenario("separable", 64, 7);
  const Scenario val = make_scenario("separable", 16, 7, 0.2, 10000);

  NetworkConfig net;
  net.n_base_classes = train.task.num_base();
  net.n_novel_classes = train.task.num_novel();
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 2;  // desk-scale scenes are ~250x smaller than LiDAR scans
  cfg.seed = 5;
  cfg.selection.percentile = 0.3;
  cfg.gamma = 7.0;
  TrainDataset ds{train.clouds, train.aux};
  Trainer trainer(cfg, net, train.task, ds);
  trainer.run(ds);

  EvalOptions opts;
  opts.sinkhorn = cfg.sinkhorn;
  const MiouReport r =
      evaluate(net, trainer.state().params, val.clouds, train.task, opts);
  const double baseline = uniform_prediction_baseline(val.clouds, train.task);
  const double elapsed = seconds_since(t0);

  std::ostringstream detail;
  detail << "novel mIoU " << r.miou_novel << " (threshold 0.60), baseline "
         << baseline << ", " << elapsed << " s";
  report(6, "10-epoch training discovers the novel classes",
         r.miou_novel >= 0.60 && r.miou_novel >= 3.0 * baseline &&
             elapsed < 600.0,
         detail.str());
}

TEST_CASE("criterion 7: directional orderings over five seeds") {
  const Scenario train = make_scenario("longtail", 48, 21);
  const Scenario val = make_scenario("longtail", 12, 21, 0.2, 10000);

  int queue_wins = 0, gamma_wins = 0, eums_wins = 0;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const double full =
        run_longtail(train, val, seed, true, 7.0,
                     TrainConfig::PseudoMode::kSinkhorn)
            .novel_miou;
    const double no_queue =
        run_longtail(train, val, seed, false, 7.0,
                     TrainConfig::PseudoMode::kSinkhorn)
            .novel_miou;
    const double no_gamma =
        run_longtail(train, val, seed, true, 0.0,
                     TrainConfig::PseudoMode::kSinkhorn)
            .novel_miou;

    NetworkConfig net;
    net.n_base_classes = train.task.num_base();
    net.n_novel_classes = train.task.num_novel();
    TrainConfig cfg;
    cfg.batch_size = 1;
    cfg.seed = seed;
    cfg.selection.percentile = 0.3;
    EumsConfig ec;
    TrainDataset ds{train.clouds, train.aux};
    const double eums =
        run_eums(ds, val.clouds, train.task, ec, cfg, net).report.miou_novel;

    queue_wins += full > no_queue;
    gamma_wins += full > no_gamma;
    eums_wins += full > eums;
    std::cout << "  seed " << seed << ": full " << full << ", queue-off "
              << no_queue << ", gamma-0 " << no_gamma << ", eums " << eums
              << "\n";
  }
  std::ostringstream detail;
  detail << "queue " << queue_wins << "/5, gamma " << gamma_wins
         << "/5, vs EUMS " << eums_wins << "/5";
  report(7, "queue, distillation and full-pipeline orderings",
         queue_wins >= 4 && gamma_wins >= 4 && eums_wins >= 4, detail.str());
}

TEST_CASE("criterion 8: evaluation protocol correctness") {
  bool hungarian_ok = true;
  RngStream rng(881);
  for (int n = 1; n <= 6 && hungarian_ok; ++n) {
    for (int trial = 0; trial < 40; ++trial) {
      Matrix score(n, n);
      for (Eigen::Index i = 0; i < score.size(); ++i)
        score.data()[i] = rng.uniform01();
      if (hungarian_map(score) != oracles::brute_force_assignment(score)) {
        hungarian_ok = false;
        break;
      }
    }
  }
  ConfusionMatrix conf(2);
  conf.add(0, 0, 3);
  conf.add(0, 1, 1);
  conf.add(1, 0, 1);
  conf.add(1, 1, 3);
  const auto iou = iou_per_class(conf);
  const bool iou_ok = iou[0] == 0.6 && iou[1] == 0.6;
  report(8, "Hungarian mapping and hand-checked mIoU",
         hungarian_ok && iou_ok);
}

TEST_CASE("criterion 9: adaptive thresholds match the sort oracle") {
  RngStream rng(991);
  bool threshold_ok = true, monotone_ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + int(rng.index(60));
    std::vector<PointPrediction> preds;
    std::vector<double> confs;
    for (int i = 0; i < n; ++i) {
      confs.push_back(rng.uniform01());
      preds.push_back({0, confs.back()});
    }
    const double p = rng.uniform01();
    const auto tau = adaptive_thresholds(preds, p);
    if (tau.at(0) != oracles::percentile_sorted(confs, p))
      threshold_ok = false;

    FeatureMatrix f = FeatureMatrix::Ones(2, n);
    std::set<int> previous;
    bool first = true;
    for (double grid_p : {0.0, 0.3, 0.6, 1.0}) {
      const Selection sel =
          select_confident(f, preds, adaptive_thresholds(preds, grid_p));
      std::set<int> current(sel.indices.begin(), sel.indices.end());
      if (!first)
        for (int idx : current)
          if (!previous.count(idx)) monotone_ok = false;
      previous = std::move(current);
      first = false;
    }
  }
  report(9, "percentile selection on 1000 random confidence sets",
         threshold_ok && monotone_ok);
}

TEST_CASE("criterion 10: training is bitwise deterministic") {
  const Scenario sc = make_scenario("separable", 8, 13);
  NetworkConfig net;
  net.n_base_classes = sc.task.num_base();
  net.n_novel_classes = sc.task.num_novel();
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 17;
  TrainDataset ds{sc.clouds, sc.aux};

  auto run_once = [&](const std::string& path) {
    Trainer t(cfg, net, sc.task, ds);
    t.run(ds);
    t.save_checkpoint(path);
  };
  const std::string p1 = (fs::temp_directory_path() / "ncdseg_acc1.ckpt").string();
  const std::string p2 = (fs::temp_directory_path() / "ncdseg_acc2.ckpt").string();
  run_once(p1);
  run_once(p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::ostringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  const bool identical = s1.str() == s2.str() && !s1.str().empty();
  fs::remove(p1);
  fs::remove(p2);
  report(10, "identical manifests give identical checkpoints", identical);
}
