#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "ncdseg/geometry.hpp"
#include "ncdseg/losses.hpp"
#include "ncdseg/network.hpp"
#include "ncdseg/queue.hpp"
#include "ncdseg/sinkhorn.hpp"
#include "ncdseg/types.hpp"

namespace ncdseg {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 4;
  double lr_max = 1e-2;
  double lr_min = 1e-5;
  double warmup_fraction = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  uint64_t seed = 0;

  double voxel_size = 0.05;
  AugmentationPolicy augmentation;
  SinkhornConfig sinkhorn;
  SelectionConfig selection;

  bool queue_enabled = true;
  size_t queue_capacity = 4096;
  double queue_fraction = 0.1;

  double gamma = 7.0;
  bool align_base_points = false;

  /// kArgmax replaces the optimal-transport pseudo-labels with plain argmax
  /// self-training; used by the degenerate-solution ablation.
  enum class PseudoMode { kSinkhorn, kArgmax };
  PseudoMode pseudo_mode = PseudoMode::kSinkhorn;

  void validate() const {
    if (epochs < 1 || batch_size < 1)
      throw ShapeMismatch("epochs and batch_size must be >= 1");
    if (!(lr_max > lr_min) || !(lr_min > 0.0))
      throw ShapeMismatch("need lr_max > lr_min > 0");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
      throw ShapeMismatch("warmup_fraction must lie in [0, 1)");
    if (gamma < 0.0) throw ShapeMismatch("gamma must be nonnegative");
  }
};

/// Linear warm-up to lr_max, then cosine annealing down to lr_min.
inline double lr_at(const TrainConfig& cfg, long step, long total_steps) {
  if (step < 0 || step > total_steps)
    throw StepOutOfRange("lr step outside schedule");
  const double warmup = cfg.warmup_fraction * static_cast<double>(total_steps);
  if (warmup > 0.0 && static_cast<double>(step) < warmup)
    return cfg.lr_max * static_cast<double>(step) / warmup;
  const double span = static_cast<double>(total_steps) - warmup;
  const double progress =
      span <= 0.0 ? 1.0 : (static_cast<double>(step) - warmup) / span;
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) *
                          (1.0 + std::cos(std::numbers::pi * progress));
}

struct TrainDataset {
  std::vector<LabeledCloud> clouds;
  std::vector<FeatureMatrix> aux;  // empty, or aligned with clouds

  size_t size() const { return clouds.size(); }
  bool has_aux() const { return !aux.empty(); }
};

/// One metric-log record, also emitted as line-delimited JSON.
struct StepRecord {
  long step = 0;
  double lr = 0.0;
  double eps = 0.0;
  double seg = 0.0;
  double align = 0.0;
  double total = 0.0;
  std::vector<double> proto_mass;  // head-0 share per prototype, view 1
};

struct TrainState {
  NetworkParams params;
  NetworkParams momentum;
  FeatureQueue queue;
  long step = 0;
  RngStream aug_rng;
  RngStream queue_rng;
  RngStream shuffle_rng;
  std::vector<StepRecord> log;
};

namespace detail {

inline void add_params(NetworkParams& into, const NetworkParams& other) {
  std::vector<NetworkParams::Ref> a, b;
  into.for_each([&](NetworkParams::Ref r) { a.push_back(r); });
  other.for_each([&](const NetworkParams::Ref& r) { b.push_back(r); });
  for (size_t k = 0; k < a.size(); ++k)
    for (Eigen::Index i = 0; i < a[k].size; ++i) a[k].data[i] += b[k].data[i];
}

/// SGD with momentum and decoupled weight decay, then float32 rounding so the
/// live parameters always match the checkpoint format bit for bit.
inline void sgd_update(NetworkParams& params, NetworkParams& momentum,
                       const NetworkParams& grad, double lr, double mu,
                       double weight_decay) {
  std::vector<NetworkParams::Ref> p, v, g;
  params.for_each([&](NetworkParams::Ref r) { p.push_back(r); });
  momentum.for_each([&](NetworkParams::Ref r) { v.push_back(r); });
  grad.for_each([&](const NetworkParams::Ref& r) { g.push_back(r); });
  for (size_t k = 0; k < p.size(); ++k) {
    for (Eigen::Index i = 0; i < p[k].size; ++i) {
      v[k].data[i] = mu * v[k].data[i] + g[k].data[i];
      p[k].data[i] -= lr * v[k].data[i] + lr * weight_decay * p[k].data[i];
    }
  }
  params.quantize_f32();
  momentum.quantize_f32();
  ++params.revision;
}

/// One augmented view of every batch cloud: voxelized, forwarded, plus the
/// per-head pseudo-label targets scattered back to original points.
struct BatchView {
  std::vector<LabeledCloud> views;
  std::vector<VoxelGrid> grids;
  std::vector<ForwardTrace> traces;
  std::vector<std::vector<std::vector<int>>> members;  // cloud -> rep -> orig
  std::vector<std::vector<int>> novel_cols;            // cloud -> novel reps

  // [cloud][head]: soft targets over the head's novel slots per original
  // point, plus the selected flag. Heads: discovery first, then OC.
  std::vector<std::vector<Matrix>> targets;
  std::vector<std::vector<std::vector<uint8_t>>> selected;

  long total_reps = 0;
};

}  // namespace detail

class Trainer {
 public:
  Trainer(TrainConfig cfg, NetworkConfig net_cfg, NcdTaskSpec task,
          const TrainDataset& dataset)
      : cfg_(std::move(cfg)), net_(std::move(net_cfg)), task_(std::move(task)) {
    cfg_.validate();
    net_.validate();
    if (dataset.size() == 0) throw EmptyCloud("training dataset is empty");
    if (net_.n_base_classes != task_.num_base() ||
        net_.n_novel_classes != task_.num_novel())
      throw ShapeMismatch("network class counts do not match the task");
    for (const auto& cloud : dataset.clouds) validate_task(cloud, task_);
    if (cfg_.gamma > 0.0 && !dataset.has_aux())
      throw DimensionMismatch("gamma > 0 requires auxiliary features");
    if (dataset.has_aux() && dataset.aux.size() != dataset.size())
      throw CountMismatch("aux features do not cover every cloud");

    steps_per_epoch_ =
        (static_cast<long>(dataset.size()) + cfg_.batch_size - 1) /
        cfg_.batch_size;
    total_steps_ = steps_per_epoch_ * cfg_.epochs;
    eps_schedule_ = {cfg_.sinkhorn.eps_start, cfg_.sinkhorn.eps_end,
                     std::max<long>(1, total_steps_)};

    weights_ = class_weights(base_frequencies(dataset), task_.novel_classes);
    disc_weights_ =
        head_space_weights(weights_, task_.base_classes, net_.n_novel_classes);
    oc_weights_ = head_space_weights(weights_, task_.base_classes,
                                     net_.overcluster_logits());

    RngStream init_rng(cfg_.seed, 1);
    state_.params = init_params(net_, init_rng);
    state_.params.quantize_f32();
    state_.momentum = zeros_like(state_.params);
    state_.queue = FeatureQueue(cfg_.queue_capacity);
    state_.aug_rng = RngStream(cfg_.seed, 2);
    state_.queue_rng = RngStream(cfg_.seed, 3);
    state_.shuffle_rng = RngStream(cfg_.seed, 4);
  }

  const TrainConfig& config() const { return cfg_; }
  const NetworkConfig& network_config() const { return net_; }
  const NcdTaskSpec& task() const { return task_; }
  const TrainState& state() const { return state_; }
  const ClassWeights& weights() const { return weights_; }
  long total_steps() const { return total_steps_; }
  long steps_per_epoch() const { return steps_per_epoch_; }

  /// Runs the remainder of the schedule, optionally appending the metric log.
  void run(const TrainDataset& dataset, const std::string& log_path = "") {
    std::ofstream log;
    if (!log_path.empty()) {
      log.open(log_path, state_.step == 0 ? std::ios::out : std::ios::app);
      if (!log) throw IoError("cannot write metric log " + log_path);
    }
    while (state_.step < total_steps_) {
      const auto batch = next_batch(dataset);
      const StepRecord rec = train_step(dataset, batch);
      if (log.is_open()) write_record(log, rec);
    }
  }

  /// Advances at most n scheduled steps; used for mid-run checkpoints.
  void run_steps(const TrainDataset& dataset, long n) {
    for (long i = 0; i < n && state_.step < total_steps_; ++i)
      train_step(dataset, next_batch(dataset));
  }

  StepRecord train_step(const TrainDataset& dataset,
                        const std::vector<size_t>& batch) {
    const double lr = lr_at(cfg_, state_.step, std::max<long>(1, total_steps_));
    const double eps = epsilon_at(eps_schedule_, state_.step);
    const size_t n_disc = static_cast<size_t>(net_.n_novel_heads);
    const size_t n_heads = 2 * n_disc;

    detail::BatchView bv[2];
    forward_views(dataset, batch, bv);

    StepRecord rec;
    rec.step = state_.step;
    rec.lr = lr;
    rec.eps = eps;
    rec.proto_mass.assign(static_cast<size_t>(net_.n_novel_classes), 0.0);

    Selection enqueue_sel;  // head-0 selection of view 1
    for (int v = 0; v < 2; ++v)
      pseudo_label_view(bv[v], eps, v == 0 ? &rec : nullptr,
                        v == 0 ? &enqueue_sel : nullptr);

    // Swapped segmentation loss over the whole batch, per head.
    std::vector<Matrix> logits1, logits2;
    std::vector<HeadTargets> targets_from1, targets_from2;
    std::vector<Vector> head_weights;
    for (size_t h = 0; h < n_heads; ++h) {
      logits1.push_back(stack_head_logits(bv[0], h, n_disc));
      logits2.push_back(stack_head_logits(bv[1], h, n_disc));
      targets_from1.push_back(make_targets(bv[1], bv[0], h));  // on view-2 cols
      targets_from2.push_back(make_targets(bv[0], bv[1], h));  // on view-1 cols
      head_weights.push_back(h < n_disc ? disc_weights_ : oc_weights_);
    }
    SegLossResult seg = swapped_segmentation_loss(
        logits1, logits2, targets_from1, targets_from2, head_weights, n_disc);

    // Alignment on each view's own auxiliary features (no swapping).
    CosineTerm align[2];
    std::vector<Matrix> aux_cols(2);
    if (cfg_.gamma > 0.0) {
      for (int v = 0; v < 2; ++v) {
        Matrix proj(net_.projection_dim, bv[v].total_reps);
        Matrix aux(net_.projection_dim, bv[v].total_reps);
        std::vector<uint8_t> mask(static_cast<size_t>(bv[v].total_reps), 0);
        Eigen::Index col = 0;
        for (size_t c = 0; c < bv[v].views.size(); ++c) {
          const FeatureMatrix& cloud_aux = dataset.aux[batch[c]];
          if (cloud_aux.rows() != net_.projection_dim)
            throw DimensionMismatch("aux dim differs from projection dim");
          for (size_t r = 0; r < bv[v].grids[c].num_voxels(); ++r, ++col) {
            const int p = bv[v].grids[c].representatives[r];
            proj.col(col) = bv[v].traces[c].proj_out.col(
                static_cast<Eigen::Index>(r));
            aux.col(col) = cloud_aux.col(p);
            const bool novel = bv[v].views[c].novel_mask[static_cast<size_t>(p)];
            mask[static_cast<size_t>(col)] =
                (novel || cfg_.align_base_points) ? 1 : 0;
          }
        }
        align[v] = cosine_alignment_term(proj, aux, mask);
      }
    }

    // Backward through every cloud of both views, accumulating gradients.
    NetworkParams grad = zeros_like(state_.params);
    for (int v = 0; v < 2; ++v) {
      const auto& d_heads = v == 0 ? seg.d_view1_heads : seg.d_view2_heads;
      Eigen::Index col0 = 0;
      for (size_t c = 0; c < bv[v].views.size(); ++c) {
        const Eigen::Index n_reps =
            static_cast<Eigen::Index>(bv[v].grids[c].num_voxels());
        OutputGrads up;
        up.d_base = Matrix::Zero(net_.n_base_classes, n_reps);
        up.d_novel.assign(n_disc, Matrix());
        up.d_oc.assign(n_disc, Matrix());
        for (size_t h = 0; h < n_heads; ++h) {
          const Matrix block = d_heads[h].middleCols(col0, n_reps);
          up.d_base += block.topRows(net_.n_base_classes);
          if (h < n_disc)
            up.d_novel[h] = block.bottomRows(net_.n_novel_classes);
          else
            up.d_oc[h - n_disc] = block.bottomRows(net_.overcluster_logits());
        }
        if (cfg_.gamma > 0.0)
          up.d_proj = cfg_.gamma * align[v].d_proj.middleCols(col0, n_reps);
        detail::add_params(
            grad, backward(net_, state_.params, bv[v].traces[c], up));
        col0 += n_reps;
      }
    }

    detail::sgd_update(state_.params, state_.momentum, grad, lr, cfg_.momentum,
                       cfg_.weight_decay);

    if (cfg_.queue_enabled && enqueue_sel.features.cols() > 0)
      state_.queue.enqueue(enqueue_sel.features, enqueue_sel.classes,
                           cfg_.queue_fraction, state_.step, state_.queue_rng);

    rec.seg = seg.value;
    rec.align = align[0].value + align[1].value;
    rec.total = total_loss(rec.seg, rec.align, cfg_.gamma);
    state_.log.push_back(rec);
    ++state_.step;
    return rec;
  }

  void save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path);
    write_params_payload(os, net_, state_.params);
    os.write("TRNR", 4);
    detail::write_u64(os, static_cast<uint64_t>(state_.step));
    state_.momentum.for_each([&](const NetworkParams::Ref& r) {
      for (Eigen::Index i = 0; i < r.size; ++i) {
        const float f = static_cast<float>(r.data[i]);
        os.write(reinterpret_cast<const char*>(&f), sizeof f);
      }
    });
    detail::write_u64(os, state_.queue.size());
    for (const auto& e : state_.queue.entries()) {
      detail::write_i32(os, e.predicted_class);
      detail::write_u64(os, static_cast<uint64_t>(e.step));
      detail::write_i32(os, static_cast<int32_t>(e.feature.size()));
      for (Eigen::Index i = 0; i < e.feature.size(); ++i) {
        const float f = static_cast<float>(e.feature[i]);
        os.write(reinterpret_cast<const char*>(&f), sizeof f);
      }
    }
    for (const auto* rng :
         {&state_.aug_rng, &state_.queue_rng, &state_.shuffle_rng}) {
      const std::string s = rng->serialize();
      detail::write_u64(os, s.size());
      os.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    // epoch order must survive a mid-epoch resume
    detail::write_u64(os, epoch_order_.size());
    for (size_t idx : epoch_order_) detail::write_u64(os, idx);
  }

  /// Restores a mid-run state; subsequent steps replay bit-identically.
  void load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    auto [cfg, params] = read_params_payload(is, path);
    if (!(cfg == net_))
      throw CheckpointMismatch(path + ": network config differs");
    state_.params = std::move(params);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TRNR", 4) != 0)
      throw CheckpointMismatch(path + ": missing trainer section");
    state_.step = static_cast<long>(detail::read_u64(is));
    state_.momentum = zeros_like(state_.params);
    state_.momentum.for_each([&](NetworkParams::Ref r) {
      for (Eigen::Index i = 0; i < r.size; ++i) {
        float f = 0.0f;
        is.read(reinterpret_cast<char*>(&f), sizeof f);
        r.data[i] = static_cast<double>(f);
      }
    });
    const uint64_t n_queue = detail::read_u64(is);
    state_.queue = FeatureQueue(cfg_.queue_capacity);
    RngStream noop;
    for (uint64_t k = 0; k < n_queue; ++k) {
      FeatureQueue::Entry e;
      e.predicted_class = detail::read_i32(is);
      e.step = static_cast<long>(detail::read_u64(is));
      const int32_t dim = detail::read_i32(is);
      FeatureMatrix f(dim, 1);
      for (int32_t i = 0; i < dim; ++i) {
        float x = 0.0f;
        is.read(reinterpret_cast<char*>(&x), sizeof x);
        f(i, 0) = static_cast<double>(x);
      }
      state_.queue.enqueue(f, {e.predicted_class}, 1.0, e.step, noop);
    }
    for (auto* rng :
         {&state_.aug_rng, &state_.queue_rng, &state_.shuffle_rng}) {
      const uint64_t len = detail::read_u64(is);
      std::string s(len, '\0');
      is.read(s.data(), static_cast<std::streamsize>(len));
      rng->restore(s);
    }
    const uint64_t n_order = detail::read_u64(is);
    epoch_order_.resize(n_order);
    for (auto& idx : epoch_order_)
      idx = static_cast<size_t>(detail::read_u64(is));
    if (!is) throw CheckpointMismatch(path + ": truncated trainer section");
  }

 private:
  std::map<int, double> base_frequencies(const TrainDataset& dataset) const {
    std::map<int, double> freq;
    long n = 0;
    for (const auto& cloud : dataset.clouds)
      for (size_t i = 0; i < cloud.size(); ++i)
        if (!cloud.novel_mask[i]) {
          ++freq[cloud.train_label(i)];
          ++n;
        }
    for (int id : task_.base_classes)
      if (!freq.count(id))
        throw ZeroFrequency("base class " + std::to_string(id) +
                            " never occurs in the training set");
    for (auto& [id, f] : freq) f /= static_cast<double>(n);
    return freq;
  }

  std::vector<size_t> next_batch(const TrainDataset& dataset) {
    const long pos_in_epoch = state_.step % steps_per_epoch_;
    if (pos_in_epoch == 0) {
      epoch_order_.resize(dataset.size());
      std::iota(epoch_order_.begin(), epoch_order_.end(), size_t{0});
      for (size_t i = dataset.size(); i > 1; --i)
        std::swap(epoch_order_[i - 1],
                  epoch_order_[state_.shuffle_rng.index(i)]);
    }
    std::vector<size_t> batch;
    const size_t begin =
        static_cast<size_t>(pos_in_epoch) * static_cast<size_t>(cfg_.batch_size);
    for (size_t k = begin;
         k < std::min(begin + static_cast<size_t>(cfg_.batch_size),
                      dataset.size());
         ++k)
      batch.push_back(epoch_order_[k]);
    return batch;
  }

  void forward_views(const TrainDataset& dataset,
                     const std::vector<size_t>& batch,
                     detail::BatchView bv[2]) {
    const size_t n_heads = static_cast<size_t>(net_.n_novel_heads) * 2;
    for (size_t ci : batch) {
      auto [v1, v2] =
          augment_pair(dataset.clouds[ci], cfg_.augmentation, state_.aug_rng);
      LabeledCloud* views[2] = {&v1, &v2};
      for (int v = 0; v < 2; ++v) {
        detail::BatchView& b = bv[v];
        LabeledCloud& view = *views[v];
        VoxelGrid grid = voxelize(view, cfg_.voxel_size);
        Eigen::Matrix3Xd rep_coords(3, grid.num_voxels());
        for (size_t r = 0; r < grid.num_voxels(); ++r)
          rep_coords.col(static_cast<Eigen::Index>(r)) =
              view.coords.col(grid.representatives[r]);
        ForwardTrace trace = forward(
            net_, state_.params, network_input(net_, view, grid.representatives),
            knn_indices(rep_coords, net_.neighborhood_k));

        std::vector<std::vector<int>> members(grid.num_voxels());
        for (size_t p = 0; p < view.size(); ++p)
          members[static_cast<size_t>(grid.point_to_rep[p])].push_back(
              static_cast<int>(p));
        std::vector<int> novel_cols;
        for (size_t r = 0; r < grid.num_voxels(); ++r)
          if (view.novel_mask[static_cast<size_t>(grid.representatives[r])])
            novel_cols.push_back(static_cast<int>(r));

        std::vector<Matrix> targets;
        std::vector<std::vector<uint8_t>> selected;
        for (size_t h = 0; h < n_heads; ++h) {
          const int slots = h < static_cast<size_t>(net_.n_novel_heads)
                                ? net_.n_novel_classes
                                : net_.overcluster_logits();
          targets.emplace_back(
              Matrix::Zero(slots, static_cast<Eigen::Index>(view.size())));
          selected.emplace_back(view.size(), 0);
        }

        b.total_reps += static_cast<long>(grid.num_voxels());
        b.views.push_back(std::move(view));
        b.grids.push_back(std::move(grid));
        b.traces.push_back(std::move(trace));
        b.members.push_back(std::move(members));
        b.novel_cols.push_back(std::move(novel_cols));
        b.targets.push_back(std::move(targets));
        b.selected.push_back(std::move(selected));
      }
    }
  }

  /// Per-head selection + pseudo-labeling of one view. Novel features of the
  /// whole batch are concatenated before the assignment. Head 0 of view 1
  /// reports prototype mass and the queue-insertion candidates.
  void pseudo_label_view(detail::BatchView& bv, double eps, StepRecord* rec,
                         Selection* enqueue_sel) {
    const size_t n_disc = static_cast<size_t>(net_.n_novel_heads);
    const size_t n_heads = 2 * n_disc;

    std::vector<std::pair<size_t, int>> origin;  // (cloud, rep col)
    for (size_t c = 0; c < bv.views.size(); ++c)
      for (int r : bv.novel_cols[c]) origin.emplace_back(c, r);
    if (origin.empty()) return;

    FeatureMatrix z(net_.feature_dim, origin.size());
    Matrix features(net_.feature_dim, origin.size());
    for (size_t k = 0; k < origin.size(); ++k) {
      z.col(static_cast<Eigen::Index>(k)) =
          bv.traces[origin[k].first].z.col(origin[k].second);
      features.col(static_cast<Eigen::Index>(k)) =
          bv.traces[origin[k].first].features.col(origin[k].second);
    }

    for (size_t h = 0; h < n_heads; ++h) {
      const Matrix& protos = h < n_disc ? state_.params.novel_w[h]
                                        : state_.params.oc_w[h - n_disc];
      // confidences come from the head's own logits, the assignment from the
      // normalized features
      const Matrix logits = protos.transpose() * features;

      std::vector<PointPrediction> preds(origin.size());
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const Vector col = logits.col(j);
        const double hi = col.maxCoeff();
        const Vector p = (col.array() - hi).exp();
        Eigen::Index arg = 0;
        const double total = p.sum();
        p.maxCoeff(&arg);
        preds[static_cast<size_t>(j)] = {static_cast<int>(arg),
                                         p[arg] / total};
      }
      const auto tau = adaptive_thresholds(preds, cfg_.selection.percentile);
      Selection sel = select_confident(z, preds, tau);
      if (sel.features.cols() == 0) continue;

      Matrix labels;  // n_selected x slots
      if (cfg_.pseudo_mode == TrainConfig::PseudoMode::kSinkhorn) {
        const Eigen::Index m = sel.features.cols();
        const Eigen::Index nq = cfg_.queue_enabled
                                    ? static_cast<Eigen::Index>(state_.queue.size())
                                    : 0;
        FeatureMatrix all(net_.feature_dim, m + nq);
        all.leftCols(m) = sel.features;
        if (nq > 0) all.rightCols(nq) = state_.queue.stacked(net_.feature_dim);
        const AssignmentMatrix q =
            solve_assignment(protos.transpose() * all, eps,
                             cfg_.sinkhorn.n_iters);
        if (h == 0 && rec) {
          const double total = q.sum();
          for (Eigen::Index i = 0; i < q.rows(); ++i)
            rec->proto_mass[static_cast<size_t>(i)] = q.row(i).sum() / total;
        }
        labels = pseudo_labels(q.leftCols(m));
      } else {
        labels = Matrix::Zero(sel.features.cols(), protos.cols());
        for (size_t k = 0; k < sel.indices.size(); ++k)
          labels(static_cast<Eigen::Index>(k), sel.classes[k]) = 1.0;
        if (h == 0 && rec) {
          for (size_t k = 0; k < sel.classes.size(); ++k)
            rec->proto_mass[static_cast<size_t>(sel.classes[k])] +=
                1.0 / static_cast<double>(sel.classes.size());
        }
      }

      // Broadcast each selected representative's label to its novel members.
      for (size_t k = 0; k < sel.indices.size(); ++k) {
        const auto [c, repcol] = origin[static_cast<size_t>(sel.indices[k])];
        for (int p : bv.members[c][static_cast<size_t>(repcol)]) {
          if (!bv.views[c].novel_mask[static_cast<size_t>(p)]) continue;
          bv.targets[c][h].col(p) =
              labels.row(static_cast<Eigen::Index>(k)).transpose();
          bv.selected[c][h][static_cast<size_t>(p)] = 1;
        }
      }
      if (h == 0 && enqueue_sel) *enqueue_sel = sel;
    }
  }

  Matrix stack_head_logits(const detail::BatchView& bv, size_t head,
                           size_t n_disc) const {
    const int slots = head < n_disc ? net_.n_novel_classes
                                    : net_.overcluster_logits();
    Matrix out(net_.n_base_classes + slots, bv.total_reps);
    Eigen::Index col = 0;
    for (size_t c = 0; c < bv.views.size(); ++c) {
      const auto& trace = bv.traces[c];
      const Matrix& head_logits = head < n_disc
                                      ? trace.novel_logits[head]
                                      : trace.oc_logits[head - n_disc];
      const Eigen::Index n = head_logits.cols();
      out.block(0, col, net_.n_base_classes, n) = trace.base_logits;
      out.block(net_.n_base_classes, col, slots, n) = head_logits;
      col += n;
    }
    return out;
  }

  /// Targets laid out on `on`'s columns with content taken from `from`:
  /// ground truth on base points, `from`-selected pseudo-labels on novel
  /// points, nothing otherwise.
  HeadTargets make_targets(const detail::BatchView& on,
                           const detail::BatchView& from, size_t head) const {
    const size_t n_disc = static_cast<size_t>(net_.n_novel_heads);
    const int slots = head < n_disc ? net_.n_novel_classes
                                    : net_.overcluster_logits();
    HeadTargets t;
    t.soft = Matrix::Zero(net_.n_base_classes + slots, on.total_reps);
    t.mask.assign(static_cast<size_t>(on.total_reps), 0);
    Eigen::Index col = 0;
    for (size_t c = 0; c < on.views.size(); ++c) {
      for (size_t r = 0; r < on.grids[c].num_voxels(); ++r, ++col) {
        const int p = on.grids[c].representatives[r];
        if (!on.views[c].novel_mask[static_cast<size_t>(p)]) {
          const int slot = task_.base_slot(on.views[c].train_label(
              static_cast<size_t>(p)));
          t.soft(slot, col) = 1.0;
          t.mask[static_cast<size_t>(col)] = 1;
        } else if (from.selected[c][head][static_cast<size_t>(p)]) {
          t.soft.block(net_.n_base_classes, col, slots, 1) =
              from.targets[c][head].col(p);
          t.mask[static_cast<size_t>(col)] = 1;
        }
      }
    }
    return t;
  }

  void write_record(std::ostream& os, const StepRecord& r) const {
    os << "{\"step\":" << r.step << ",\"lr\":" << r.lr << ",\"eps\":" << r.eps
       << ",\"seg\":" << r.seg << ",\"align\":" << r.align
       << ",\"total\":" << r.total << ",\"proto_mass\":[";
    for (size_t i = 0; i < r.proto_mass.size(); ++i)
      os << (i ? "," : "") << r.proto_mass[i];
    os << "]}\n";
  }

  TrainConfig cfg_;
  NetworkConfig net_;
  NcdTaskSpec task_;
  ClassWeights weights_;
  Vector disc_weights_;
  Vector oc_weights_;
  long steps_per_epoch_ = 0;
  long total_steps_ = 0;
  EpsSchedule eps_schedule_;
  TrainState state_;
  std::vector<size_t> epoch_order_;
};

}  // namespace ncdseg
