#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ncdseg/eums.hpp"
#include "ncdseg/evaluation.hpp"
#include "ncdseg/io.hpp"
#include "ncdseg/manifest.hpp"
#include "ncdseg/trainer.hpp"
#include "ncdseg/zeroshot.hpp"

namespace fs = std::filesystem;
using namespace ncdseg;

namespace {

std::string resolve_path(const std::string& path) {
  if (path.empty() || fs::exists(path) || fs::path(path).is_absolute())
    return path;
  const fs::path under_root = fs::path(data_root()) / path;
  return fs::exists(under_root) ? under_root.string() : path;
}

struct LoadedDataset {
  TrainDataset data;
  std::vector<std::string> cloud_paths;
  std::vector<std::string> aux_paths;
};

/// Loads every *.ncdpc in a directory (sorted), with sibling .aux files when
/// present.
LoadedDataset load_dataset(const std::string& dir, bool need_aux) {
  LoadedDataset out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ncdpc") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .ncdpc files under " + dir);

  bool all_aux = true;
  for (const auto& f : files) {
    out.data.clouds.push_back(load_cloud(f.string()));
    out.cloud_paths.push_back(f.string());
    fs::path aux = f;
    aux.replace_extension(".aux");
    if (fs::exists(aux)) {
      out.data.aux.push_back(
          load_aux_features(aux.string(), out.data.clouds.back()));
      out.aux_paths.push_back(aux.string());
    } else {
      all_aux = false;
    }
  }
  if (!all_aux) {
    if (need_aux)
      throw IoError("some clouds under " + dir + " have no .aux sibling");
    out.data.aux.clear();
    out.aux_paths.clear();
  }
  return out;
}

struct CommonOpts {
  uint64_t seed = 0;
  int threads = 1;
  TrainConfig train;
  double aug_rot_z = 2.0 * std::numbers::pi;

  void attach(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "RNG seed")->capture_default_str();
    cmd->add_option("--threads", threads, "worker pool size (1 = reproducible default)")
        ->capture_default_str();
    cmd->add_option("--epochs", train.epochs)->capture_default_str();
    cmd->add_option("--batch-size", train.batch_size)->capture_default_str();
    cmd->add_option("--lr-max", train.lr_max)->capture_default_str();
    cmd->add_option("--lr-min", train.lr_min)->capture_default_str();
    cmd->add_option("--warmup-fraction", train.warmup_fraction)->capture_default_str();
    cmd->add_option("--momentum", train.momentum)->capture_default_str();
    cmd->add_option("--weight-decay", train.weight_decay)->capture_default_str();
    cmd->add_option("--voxel-size", train.voxel_size)->capture_default_str();
    cmd->add_option("--aug.rot-z", aug_rot_z, "max z rotation (radians)")
        ->capture_default_str();
    cmd->add_option("--aug.scale-min", train.augmentation.scale_min)->capture_default_str();
    cmd->add_option("--aug.scale-max", train.augmentation.scale_max)->capture_default_str();
    cmd->add_option("--aug.jitter", train.augmentation.jitter_sigma)->capture_default_str();
    cmd->add_option("--sk.iters", train.sinkhorn.n_iters)->capture_default_str();
    cmd->add_option("--sk.eps-start", train.sinkhorn.eps_start)->capture_default_str();
    cmd->add_option("--sk.eps-end", train.sinkhorn.eps_end)->capture_default_str();
    cmd->add_option("--select.p", train.selection.percentile)->capture_default_str();
    cmd->add_option("--queue.capacity", train.queue_capacity)->capture_default_str();
    cmd->add_option("--queue.fraction", train.queue_fraction)->capture_default_str();
    cmd->add_flag("--no-queue", "disable the class-balanced queue");
    cmd->add_option("--loss.gamma", train.gamma)->capture_default_str();
    cmd->add_flag("--loss.align-base", "include base points in the alignment loss");
    cmd->add_option("--pseudo.mode", pseudo_mode, "sinkhorn|argmax")
        ->capture_default_str();
  }

  std::string pseudo_mode = "sinkhorn";

  TrainConfig resolve(const CLI::App* cmd) {
    train.seed = seed;
    train.augmentation.rotation_z_max = aug_rot_z;
    train.queue_enabled = cmd->count("--no-queue") == 0;
    train.align_base_points = cmd->count("--loss.align-base") > 0;
    if (pseudo_mode == "argmax")
      train.pseudo_mode = TrainConfig::PseudoMode::kArgmax;
    else if (pseudo_mode != "sinkhorn")
      throw CLI::ValidationError("--pseudo.mode must be sinkhorn or argmax");
    return train;
  }

  std::map<std::string, std::string> manifest_config(const CLI::App* cmd) const {
    std::map<std::string, std::string> out;
    for (const auto* opt : cmd->get_options()) {
      if (opt->get_name() == "--help" || opt->get_name() == "--config") continue;
      if (!opt->results().empty())
        out[opt->get_name()] = opt->results().front();
      else if (!opt->get_default_str().empty())
        out[opt->get_name()] = opt->get_default_str();
    }
    return out;
  }
};

NetworkConfig make_net_config(const NcdTaskSpec& task, int aux_dim,
                              bool with_color) {
  NetworkConfig net;
  net.input_dim = with_color ? 6 : 3;
  net.n_base_classes = task.num_base();
  net.n_novel_classes = task.num_novel();
  if (aux_dim > 0) net.projection_dim = aux_dim;
  return net;
}

int cmd_gen_synth(const std::string& preset, int scenes, uint64_t seed,
                  double aux_sigma, int val_offset, const std::string& out,
                  const std::string& bank_path, int bank_synonyms,
                  double bank_sigma, RunManifest manifest) {
  auto scenario =
      make_scenario(preset, scenes, seed, aux_sigma, val_offset);
  if (!bank_path.empty()) {
    save_bank(synthetic_bank(scenario.task, 16, bank_synonyms, bank_sigma, seed),
              bank_path);
    manifest.outputs["bank"] = bank_path;
  }
  const fs::path out_path(out);
  if (scenes == 1 && out_path.extension() == ".ncdpc") {
    save_cloud(scenario.clouds[0], out);
    fs::path aux = out_path;
    aux.replace_extension(".aux");
    save_aux_features(scenario.aux[0], out_path.stem().string(), aux.string());
    manifest.outputs["cloud"] = out;
    manifest.outputs["aux"] = aux.string();
    manifest.write(out + ".manifest.json");
    std::cout << "wrote " << out << " (" << scenario.clouds[0].size()
              << " points)\n";
    return 0;
  }
  fs::create_directories(out_path);
  for (int i = 0; i < scenes; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04d", val_offset + i);
    const fs::path cloud_file = out_path / (std::string(name) + ".ncdpc");
    const fs::path aux_file = out_path / (std::string(name) + ".aux");
    save_cloud(scenario.clouds[static_cast<size_t>(i)], cloud_file.string());
    save_aux_features(scenario.aux[static_cast<size_t>(i)], name,
                      aux_file.string());
  }
  const fs::path split_file = out_path / (preset + ".split");
  save_split(scenario.task, split_file.string());
  manifest.outputs["dir"] = out;
  manifest.outputs["split"] = split_file.string();
  manifest.write((out_path / "manifest.json").string());
  std::cout << "wrote " << scenes << " scenes + " << split_file.string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Novel-class-discovery engine for point-cloud segmentation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from an INI file");

  std::string data_dir, val_dir, split_path, out_path, log_path, ckpt_path;
  std::string cloud_path, aux_path, bank_path, plot_path;
  std::string preset = "separable";
  int scenes = 1, head = -1, val_offset = 0;
  double aux_sigma = 0.2;
  double pseudo_eps = 0.05;

  CommonOpts train_opts, eums_opts;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic scenario");
  gen->add_option("--preset", preset, "separable|longtail")->capture_default_str();
  gen->add_option("--scenes", scenes)->capture_default_str();
  gen->add_option("--seed", train_opts.seed)->capture_default_str();
  gen->add_option("--aux-sigma", aux_sigma)->capture_default_str();
  gen->add_option("--scene-offset", val_offset,
                  "index of the first scene (validation sets use an offset)")
      ->capture_default_str();
  gen->add_option("--out", out_path, "output directory, or a .ncdpc file when --scenes 1")
      ->required();
  std::string bank_path;
  int bank_synonyms = 5;
  double bank_sigma = 0.05;
  gen->add_option("--bank", bank_path, "also write a synthetic class-embedding bank");
  gen->add_option("--bank-synonyms", bank_synonyms)->capture_default_str();
  gen->add_option("--bank-sigma", bank_sigma)->capture_default_str();

  auto* train = app.add_subcommand("train", "train the discovery network");
  train->add_option("--data", data_dir, "directory of .ncdpc (+ .aux) files")->required();
  train->add_option("--split", split_path)->required();
  train->add_option("--out", ckpt_path, "checkpoint path")->required();
  train->add_option("--log", log_path, "metric log (JSON lines)");
  train_opts.attach(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt_path)->required();
  eval->add_option("--val", val_dir)->required();
  eval->add_option("--split", split_path)->required();
  eval->add_option("--head", head, "-1 = lowest-entropy head")->capture_default_str();
  eval->add_option("--plot-data", plot_path, "write class/IoU TSV");
  eval->add_option("--threads", train_opts.threads)->capture_default_str();
  eval->add_option("--voxel-size", train_opts.train.voxel_size)->capture_default_str();
  eval->add_option("--sk.iters", train_opts.train.sinkhorn.n_iters)->capture_default_str();
  eval->add_option("--sk.eps-end", train_opts.train.sinkhorn.eps_end)->capture_default_str();
  eval->add_option("--seed", train_opts.seed)->capture_default_str();

  auto* pseudo = app.add_subcommand("pseudo-label",
                                    "dump the soft assignment for one cloud");
  pseudo->add_option("--checkpoint", ckpt_path)->required();
  pseudo->add_option("--cloud", cloud_path)->required();
  pseudo->add_option("--split", split_path)->required();
  pseudo->add_option("--out", out_path, "TSV output (prototypes x points)")->required();
  pseudo->add_option("--head", head)->capture_default_str();
  pseudo->add_option("--eps", pseudo_eps)->capture_default_str();
  pseudo->add_option("--sk.iters", train_opts.train.sinkhorn.n_iters)->capture_default_str();
  pseudo->add_option("--voxel-size", train_opts.train.voxel_size)->capture_default_str();
  pseudo->add_option("--seed", train_opts.seed)->capture_default_str();

  auto* eums = app.add_subcommand("baseline-eums", "run the EUMS baseline");
  EumsConfig eums_cfg;
  eums->add_option("--data", data_dir)->required();
  eums->add_option("--val", val_dir)->required();
  eums->add_option("--split", split_path)->required();
  eums->add_option("--out", ckpt_path, "checkpoint path")->required();
  eums->add_option("--subsample-ratio", eums_cfg.subsample_ratio)->capture_default_str();
  eums->add_option("--subsample-cap", eums_cfg.subsample_cap)->capture_default_str();
  eums->add_option("--overcluster", eums_cfg.overcluster_multiplier)->capture_default_str();
  eums->add_option("--entropy-keep", eums_cfg.entropy_keep_fraction)->capture_default_str();
  eums->add_option("--pretrain-epochs", eums_cfg.pretrain_epochs)->capture_default_str();
  eums->add_option("--finetune-epochs", eums_cfg.finetune_epochs)->capture_default_str();
  eums_opts.attach(eums);

  auto* zeroshot = app.add_subcommand("zeroshot",
                                      "cosine matching against a class embedding bank");
  zeroshot->add_option("--cloud", cloud_path)->required();
  zeroshot->add_option("--aux", aux_path, "point features aligned with the cloud")->required();
  zeroshot->add_option("--bank", bank_path)->required();
  zeroshot->add_option("--split", split_path)->required();
  zeroshot->add_option("--plot-data", plot_path);
  zeroshot->add_option("--seed", train_opts.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage error
  }

  try {
    RunManifest manifest;
    manifest.seed = train_opts.seed;
    for (int i = 0; i < argc; ++i)
      manifest.command += std::string(i ? " " : "") + argv[i];

    if (gen->parsed()) {
      manifest.config = {{"preset", preset},
                         {"scenes", std::to_string(scenes)},
                         {"aux-sigma", std::to_string(aux_sigma)},
                         {"scene-offset", std::to_string(val_offset)}};
      return cmd_gen_synth(preset, scenes, train_opts.seed, aux_sigma,
                           val_offset, out_path, bank_path, bank_synonyms,
                           bank_sigma, std::move(manifest));
    }

    if (train->parsed()) {
      data_dir = resolve_path(data_dir);
      split_path = resolve_path(split_path);
      const NcdTaskSpec task = load_split(split_path);
      const TrainConfig cfg = train_opts.resolve(train);
      auto loaded = load_dataset(data_dir, cfg.gamma > 0.0);
      for (auto& cloud : loaded.data.clouds) validate_task(cloud, task);
      const NetworkConfig net = make_net_config(
          task,
          loaded.data.has_aux() ? static_cast<int>(loaded.data.aux[0].rows()) : 0,
          loaded.data.clouds[0].has_color());
      Trainer trainer(cfg, net, task, loaded.data);
      trainer.run(loaded.data, log_path);
      trainer.save_checkpoint(ckpt_path);

      manifest.config = train_opts.manifest_config(train);
      manifest.add_input(split_path);
      for (const auto& p : loaded.cloud_paths) manifest.add_input(p);
      for (const auto& p : loaded.aux_paths) manifest.add_input(p);
      manifest.outputs["checkpoint"] = ckpt_path;
      if (!log_path.empty()) manifest.outputs["log"] = log_path;
      manifest.write(ckpt_path + ".manifest.json");
      std::cout << "trained " << trainer.total_steps() << " steps -> "
                << ckpt_path << "\n";
      return 0;
    }

    if (eval->parsed()) {
      ckpt_path = resolve_path(ckpt_path);
      val_dir = resolve_path(val_dir);
      split_path = resolve_path(split_path);
      const NcdTaskSpec task = load_split(split_path);
      auto [net, params] = load_params(ckpt_path);
      auto loaded = load_dataset(val_dir, false);
      EvalOptions opts;
      opts.voxel_size = train_opts.train.voxel_size;
      opts.head = head;
      opts.threads = train_opts.threads;
      opts.sinkhorn = train_opts.train.sinkhorn;
      const MiouReport report =
          evaluate(net, params, loaded.data.clouds, task, opts);
      std::cout << report.to_text();
      if (!plot_path.empty()) {
        report.write_plot_data(plot_path);
        manifest.config = {{"head", std::to_string(head)}};
        manifest.add_input(ckpt_path);
        manifest.add_input(split_path);
        manifest.outputs["plot-data"] = plot_path;
        manifest.write(plot_path + ".manifest.json");
      }
      return 0;
    }

    if (pseudo->parsed()) {
      ckpt_path = resolve_path(ckpt_path);
      cloud_path = resolve_path(cloud_path);
      split_path = resolve_path(split_path);
      const NcdTaskSpec task = load_split(split_path);
      auto [net, params] = load_params(ckpt_path);
      const LabeledCloud cloud = load_cloud(cloud_path);
      validate_task(cloud, task);
      const auto f = detail::eval_forward(net, params, cloud,
                                          train_opts.train.voxel_size);
      std::vector<int> novel_cols;
      for (size_t r = 0; r < f.grid.num_voxels(); ++r)
        if (cloud.novel_mask[static_cast<size_t>(f.grid.representatives[r])])
          novel_cols.push_back(static_cast<int>(r));
      if (novel_cols.empty()) throw NoNovelPoints("cloud has no novel points");
      FeatureMatrix z(net.feature_dim,
                      static_cast<Eigen::Index>(novel_cols.size()));
      for (size_t k = 0; k < novel_cols.size(); ++k)
        z.col(static_cast<Eigen::Index>(k)) = f.trace.z.col(novel_cols[k]);
      const int h = head < 0 ? 0 : head;
      const AssignmentMatrix q = solve_assignment(
          params.novel_w[static_cast<size_t>(h)].transpose() * z, pseudo_eps,
          train_opts.train.sinkhorn.n_iters);
      std::ofstream out(out_path);
      if (!out) throw IoError("cannot write " + out_path);
      for (Eigen::Index i = 0; i < q.rows(); ++i) {
        for (Eigen::Index j = 0; j < q.cols(); ++j)
          out << (j ? "\t" : "") << format_real(q(i, j));
        out << '\n';
      }
      manifest.config = {{"head", std::to_string(h)},
                         {"eps", std::to_string(pseudo_eps)}};
      manifest.add_input(ckpt_path);
      manifest.add_input(cloud_path);
      manifest.outputs["assignment"] = out_path;
      manifest.write(out_path + ".manifest.json");
      std::cout << "wrote " << q.rows() << "x" << q.cols() << " assignment -> "
                << out_path << "\n";
      return 0;
    }

    if (eums->parsed()) {
      data_dir = resolve_path(data_dir);
      val_dir = resolve_path(val_dir);
      split_path = resolve_path(split_path);
      const NcdTaskSpec task = load_split(split_path);
      const TrainConfig cfg = eums_opts.resolve(eums);
      auto loaded = load_dataset(data_dir, false);
      auto val = load_dataset(val_dir, false);
      const NetworkConfig net = make_net_config(
          task, 0, loaded.data.clouds[0].has_color());
      auto result =
          run_eums(loaded.data, val.data.clouds, task, eums_cfg, cfg, net);
      save_params(result.net, result.params, ckpt_path);
      std::cout << result.report.to_text();
      manifest.config = eums_opts.manifest_config(eums);
      manifest.add_input(split_path);
      manifest.outputs["checkpoint"] = ckpt_path;
      manifest.write(ckpt_path + ".manifest.json");
      return 0;
    }

    if (zeroshot->parsed()) {
      cloud_path = resolve_path(cloud_path);
      aux_path = resolve_path(aux_path);
      bank_path = resolve_path(bank_path);
      split_path = resolve_path(split_path);
      const NcdTaskSpec task = load_split(split_path);
      const LabeledCloud cloud = load_cloud(cloud_path);
      const FeatureMatrix features = load_aux_features(aux_path, cloud);
      const ClassEmbeddingBank bank = load_bank(bank_path);
      const MiouReport report = zeroshot_report(cloud, features, bank, task);
      std::cout << report.to_text();
      if (!plot_path.empty()) {
        report.write_plot_data(plot_path);
        manifest.add_input(cloud_path);
        manifest.add_input(bank_path);
        manifest.outputs["plot-data"] = plot_path;
        manifest.write(plot_path + ".manifest.json");
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
