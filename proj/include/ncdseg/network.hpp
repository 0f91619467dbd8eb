#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ncdseg/geometry.hpp"
#include "ncdseg/rng.hpp"
#include "ncdseg/types.hpp"

namespace ncdseg {

struct NetworkConfig {
  int input_dim = 3;                  // 3, or 6 with color
  std::vector<int> hidden_dims = {64, 64};
  int feature_dim = 32;               // D
  int n_novel_heads = 5;
  int overcluster_factor = 3;         // o
  int projection_dim = 16;            // D_a, matches the aux provider
  int proj_hidden = 64;
  int neighborhood_k = 16;
  int n_base_classes = 0;
  int n_novel_classes = 0;

  int overcluster_logits() const {
    return overcluster_factor * n_novel_classes;
  }

  void validate() const {
    if (input_dim <= 0 || feature_dim <= 0 || projection_dim <= 0 ||
        proj_hidden <= 0 || neighborhood_k <= 0 || hidden_dims.empty())
      throw ShapeMismatch("network dimensions must be positive");
    for (int h : hidden_dims)
      if (h <= 0) throw ShapeMismatch("hidden dims must be positive");
    if (n_novel_heads < 1 || overcluster_factor < 1)
      throw ShapeMismatch("need n_novel_heads >= 1 and overcluster factor >= 1");
    if (n_base_classes < 0 || n_novel_classes < 1)
      throw ShapeMismatch("class counts out of range");
  }

  bool operator==(const NetworkConfig&) const = default;
};

/// All learnable tensors. Novel and over-clustering head weights double as
/// the prototype matrices: logits are P^T Z on unit-normalized features.
struct NetworkParams {
  std::vector<Matrix> mlp_w;   // per-point MLP, hidden_dims layers
  std::vector<Vector> mlp_b;
  Matrix feat_w;               // post-pooling layer -> D
  Vector feat_b;
  Matrix base_w;               // |C_b| x D
  Vector base_b;
  std::vector<Matrix> novel_w; // D x C_n prototypes, one per head
  std::vector<Matrix> oc_w;    // D x (o*C_n), one per head
  Matrix proj1_w;
  Vector proj1_b;
  Matrix proj2_w;              // D_a x proj_hidden
  Vector proj2_b;

  uint64_t revision = 0;  // bumped by the trainer after every update

  struct Ref {
    const char* name;
    double* data;
    Eigen::Index size;
  };

  /// Visits every tensor in the declared (serialization) order.
  template <typename Fn>
  void for_each(Fn&& fn) {
    for (size_t l = 0; l < mlp_w.size(); ++l) {
      fn(Ref{"mlp_w", mlp_w[l].data(), mlp_w[l].size()});
      fn(Ref{"mlp_b", mlp_b[l].data(), mlp_b[l].size()});
    }
    fn(Ref{"feat_w", feat_w.data(), feat_w.size()});
    fn(Ref{"feat_b", feat_b.data(), feat_b.size()});
    fn(Ref{"base_w", base_w.data(), base_w.size()});
    fn(Ref{"base_b", base_b.data(), base_b.size()});
    for (auto& p : novel_w) fn(Ref{"novel_w", p.data(), p.size()});
    for (auto& p : oc_w) fn(Ref{"oc_w", p.data(), p.size()});
    fn(Ref{"proj1_w", proj1_w.data(), proj1_w.size()});
    fn(Ref{"proj1_b", proj1_b.data(), proj1_b.size()});
    fn(Ref{"proj2_w", proj2_w.data(), proj2_w.size()});
    fn(Ref{"proj2_b", proj2_b.data(), proj2_b.size()});
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<NetworkParams*>(this)->for_each(
        [&](Ref r) { fn(static_cast<const Ref&>(r)); });
  }

  Eigen::Index total_size() const {
    Eigen::Index n = 0;
    for_each([&](const Ref& r) { n += r.size; });
    return n;
  }

  /// Rounds every value to its nearest float32. Keeps live parameters exactly
  /// representable in the checkpoint format so resume is bit-exact.
  void quantize_f32() {
    for_each([](Ref r) {
      for (Eigen::Index i = 0; i < r.size; ++i)
        r.data[i] = static_cast<double>(static_cast<float>(r.data[i]));
    });
  }
};

/// Zero-initialized parameter block with the same shapes, used for gradients
/// and momentum buffers.
inline NetworkParams zeros_like(const NetworkParams& p) {
  NetworkParams g = p;
  g.for_each([](NetworkParams::Ref r) {
    std::fill(r.data, r.data + r.size, 0.0);
  });
  g.revision = 0;
  return g;
}

/// Uniform fan-in initialization (bound sqrt(3 / fan_in)), zero biases.
inline NetworkParams init_params(const NetworkConfig& cfg, RngStream& rng) {
  cfg.validate();
  NetworkParams p;
  auto uniform_fanin = [&](Eigen::Index rows, Eigen::Index cols,
                           Eigen::Index fan_in) {
    Matrix w(rows, cols);
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i)
        w(i, j) = rng.uniform(-bound, bound);
    return w;
  };

  int in = cfg.input_dim;
  for (int h : cfg.hidden_dims) {
    p.mlp_w.push_back(uniform_fanin(h, in, in));
    p.mlp_b.push_back(Vector::Zero(h));
    in = h;
  }
  p.feat_w = uniform_fanin(cfg.feature_dim, in, in);
  p.feat_b = Vector::Zero(cfg.feature_dim);
  p.base_w = uniform_fanin(cfg.n_base_classes, cfg.feature_dim, cfg.feature_dim);
  p.base_b = Vector::Zero(cfg.n_base_classes);
  for (int h = 0; h < cfg.n_novel_heads; ++h) {
    p.novel_w.push_back(
        uniform_fanin(cfg.feature_dim, cfg.n_novel_classes, cfg.feature_dim));
    p.oc_w.push_back(
        uniform_fanin(cfg.feature_dim, cfg.overcluster_logits(), cfg.feature_dim));
  }
  p.proj1_w = uniform_fanin(cfg.proj_hidden, cfg.feature_dim, cfg.feature_dim);
  p.proj1_b = Vector::Zero(cfg.proj_hidden);
  p.proj2_w = uniform_fanin(cfg.projection_dim, cfg.proj_hidden, cfg.proj_hidden);
  p.proj2_b = Vector::Zero(cfg.projection_dim);
  return p;
}

/// Cached activations of one forward pass, sufficient for exact backprop.
struct ForwardTrace {
  const NetworkParams* params = nullptr;
  uint64_t params_revision = 0;
  std::vector<std::vector<int>> neighbors;

  Matrix input;                      // in x m
  std::vector<Matrix> hidden;        // post-tanh activations per MLP layer
  Matrix pooled;                     // k-NN mean of the last hidden layer
  Matrix features;                   // F, D x m (post-tanh)
  Vector feature_norms;              // per-column norm of F
  FeatureMatrix z;                   // unit-normalized F
  Matrix base_logits;                // |C_b| x m
  std::vector<Matrix> novel_logits;  // C_n x m per head
  std::vector<Matrix> oc_logits;     // o*C_n x m per head
  Matrix proj_hidden_act;
  Matrix proj_out;                   // D_a x m

  Eigen::Index count() const { return input.cols(); }
};

inline Matrix knn_mean_pool(const Matrix& values,
                            const std::vector<std::vector<int>>& neighbors) {
  Matrix out(values.rows(), values.cols());
  for (size_t i = 0; i < neighbors.size(); ++i) {
    Vector acc = Vector::Zero(values.rows());
    for (int j : neighbors[i]) acc += values.col(j);
    out.col(static_cast<Eigen::Index>(i)) =
        acc / static_cast<double>(neighbors[i].size());
  }
  return out;
}

/// Shared extractor, heads and projector. Point order is preserved end to
/// end; the whole map is permutation-equivariant up to k-NN ties.
inline ForwardTrace forward(const NetworkConfig& cfg, const NetworkParams& p,
                            const Matrix& input,
                            const std::vector<std::vector<int>>& neighbors) {
  if (input.rows() != cfg.input_dim)
    throw ShapeMismatch("input dim " + std::to_string(input.rows()) +
                        " does not match config " +
                        std::to_string(cfg.input_dim));
  if (static_cast<size_t>(input.cols()) != neighbors.size())
    throw ShapeMismatch("neighbor lists do not cover the input points");

  ForwardTrace t;
  t.params = &p;
  t.params_revision = p.revision;
  t.neighbors = neighbors;
  t.input = input;

  Matrix act = input;
  for (size_t l = 0; l < p.mlp_w.size(); ++l) {
    act = ((p.mlp_w[l] * act).colwise() + p.mlp_b[l]).array().tanh().matrix();
    t.hidden.push_back(act);
  }
  t.pooled = knn_mean_pool(act, neighbors);
  t.features =
      ((p.feat_w * t.pooled).colwise() + p.feat_b).array().tanh().matrix();

  t.feature_norms.resize(t.features.cols());
  t.z.resize(t.features.rows(), t.features.cols());
  for (Eigen::Index j = 0; j < t.features.cols(); ++j) {
    const double n = t.features.col(j).norm();
    if (n < 1e-8)
      throw NormalizationDegenerate("feature column " + std::to_string(j) +
                                    " cannot be normalized");
    t.feature_norms[j] = n;
    t.z.col(j) = t.features.col(j) / n;
  }

  // Head logits come from the unnormalized features so novel and base heads
  // share a scale; the Sinkhorn similarity uses the normalized copy z.
  t.base_logits = (p.base_w * t.features).colwise() + p.base_b;
  for (const auto& w : p.novel_w)
    t.novel_logits.push_back(w.transpose() * t.features);
  for (const auto& w : p.oc_w) t.oc_logits.push_back(w.transpose() * t.features);

  t.proj_hidden_act =
      ((p.proj1_w * t.features).colwise() + p.proj1_b).array().tanh().matrix();
  t.proj_out = (p.proj2_w * t.proj_hidden_act).colwise() + p.proj2_b;
  return t;
}

/// Gradients of the loss at the network outputs. Absent blocks are zeros.
struct OutputGrads {
  Matrix d_base;
  std::vector<Matrix> d_novel;
  std::vector<Matrix> d_oc;
  Matrix d_proj;
};

/// Exact gradients of the composed loss w.r.t. every parameter, given
/// upstream gradients at the network outputs.
inline NetworkParams backward(const NetworkConfig& cfg, const NetworkParams& p,
                              const ForwardTrace& t, const OutputGrads& up) {
  if (t.params != &p || t.params_revision != p.revision)
    throw TraceMismatch("trace was produced by different parameters");

  const Eigen::Index m = t.count();
  NetworkParams g = zeros_like(p);
  Matrix d_features = Matrix::Zero(cfg.feature_dim, m);

  if (up.d_base.size() > 0) {
    if (up.d_base.rows() != t.base_logits.rows() || up.d_base.cols() != m)
      throw ShapeMismatch("d_base shape mismatch");
    g.base_w = up.d_base * t.features.transpose();
    g.base_b = up.d_base.rowwise().sum();
    d_features += p.base_w.transpose() * up.d_base;
  }
  for (size_t h = 0; h < up.d_novel.size(); ++h) {
    const Matrix& d = up.d_novel[h];
    if (d.size() == 0) continue;
    g.novel_w[h] = t.features * d.transpose();
    d_features += p.novel_w[h] * d;
  }
  for (size_t h = 0; h < up.d_oc.size(); ++h) {
    const Matrix& d = up.d_oc[h];
    if (d.size() == 0) continue;
    g.oc_w[h] = t.features * d.transpose();
    d_features += p.oc_w[h] * d;
  }
  if (up.d_proj.size() > 0) {
    g.proj2_w = up.d_proj * t.proj_hidden_act.transpose();
    g.proj2_b = up.d_proj.rowwise().sum();
    Matrix d_s1 = p.proj2_w.transpose() * up.d_proj;
    d_s1.array() *= 1.0 - t.proj_hidden_act.array().square();
    g.proj1_w = d_s1 * t.features.transpose();
    g.proj1_b = d_s1.rowwise().sum();
    d_features += p.proj1_w.transpose() * d_s1;
  }

  // No gradient flows through z: the assignment treats it as a constant.
  Matrix d_pre = d_features;
  d_pre.array() *= 1.0 - t.features.array().square();
  g.feat_w = d_pre * t.pooled.transpose();
  g.feat_b = d_pre.rowwise().sum();
  Matrix d_pooled = p.feat_w.transpose() * d_pre;

  // transpose of the k-NN mean: scatter each pooled gradient to its members
  const Matrix& last_hidden = t.hidden.back();
  Matrix d_act = Matrix::Zero(last_hidden.rows(), m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& nb = t.neighbors[static_cast<size_t>(i)];
    const double w = 1.0 / static_cast<double>(nb.size());
    for (int j : nb) d_act.col(j) += w * d_pooled.col(i);
  }

  for (int l = static_cast<int>(p.mlp_w.size()) - 1; l >= 0; --l) {
    Matrix d_h = d_act;
    d_h.array() *= 1.0 - t.hidden[static_cast<size_t>(l)].array().square();
    const Matrix& below = l == 0 ? t.input : t.hidden[static_cast<size_t>(l - 1)];
    g.mlp_w[static_cast<size_t>(l)] = d_h * below.transpose();
    g.mlp_b[static_cast<size_t>(l)] = d_h.rowwise().sum();
    if (l > 0) d_act = p.mlp_w[static_cast<size_t>(l)].transpose() * d_h;
  }
  return g;
}

/// Per-head full logits: base block stacked above the head's novel block.
inline Matrix concat_logits(const Matrix& base_logits,
                            const Matrix& novel_logits) {
  if (base_logits.cols() != novel_logits.cols() && base_logits.size() > 0)
    throw ShapeMismatch("base and novel logits cover different point counts");
  Matrix out(base_logits.rows() + novel_logits.rows(), novel_logits.cols());
  if (base_logits.rows() > 0) out.topRows(base_logits.rows()) = base_logits;
  out.bottomRows(novel_logits.rows()) = novel_logits;
  return out;
}

/// Network input block for a cloud: coordinates, plus colors when the config
/// asks for 6 channels.
inline Matrix network_input(const NetworkConfig& cfg, const LabeledCloud& cloud,
                            const std::vector<int>& point_indices) {
  Matrix x(cfg.input_dim, static_cast<Eigen::Index>(point_indices.size()));
  if (cfg.input_dim == 6 && !cloud.has_color())
    throw ShapeMismatch("config expects colors but the cloud has none");
  for (size_t k = 0; k < point_indices.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(point_indices[k]);
    x.block(0, static_cast<Eigen::Index>(k), 3, 1) = cloud.coords.col(i);
    if (cfg.input_dim == 6)
      x.block(3, static_cast<Eigen::Index>(k), 3, 1) = cloud.colors.col(i);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Parameter checkpoints: "NCKP" magic, version, config block, FNV hash of the
// config block, then every tensor as little-endian float32 in declared order.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_i32(std::ostream& os, int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline int32_t read_i32(std::istream& is) {
  int32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

inline std::vector<int32_t> config_block(const NetworkConfig& cfg) {
  std::vector<int32_t> block = {static_cast<int32_t>(cfg.hidden_dims.size())};
  for (int h : cfg.hidden_dims) block.push_back(h);
  for (int v : {cfg.input_dim, cfg.feature_dim, cfg.n_novel_heads,
                cfg.overcluster_factor, cfg.projection_dim, cfg.proj_hidden,
                cfg.neighborhood_k, cfg.n_base_classes, cfg.n_novel_classes})
    block.push_back(v);
  return block;
}

inline uint64_t config_hash(const NetworkConfig& cfg) {
  const auto block = config_block(cfg);
  return fnv1a(block.data(), block.size() * sizeof(int32_t));
}

}  // namespace detail

inline void write_params_payload(std::ostream& os, const NetworkConfig& cfg,
                                 const NetworkParams& params) {
  os.write("NCKP", 4);
  detail::write_i32(os, 1);
  const auto block = detail::config_block(cfg);
  detail::write_i32(os, static_cast<int32_t>(block.size()));
  for (int32_t v : block) detail::write_i32(os, v);
  detail::write_u64(os, detail::config_hash(cfg));
  params.for_each([&](const NetworkParams::Ref& r) {
    for (Eigen::Index i = 0; i < r.size; ++i) {
      const float f = static_cast<float>(r.data[i]);
      os.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
  });
}

inline std::pair<NetworkConfig, NetworkParams> read_params_payload(
    std::istream& is, const std::string& origin) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "NCKP", 4) != 0)
    throw CheckpointMismatch(origin + ": not a parameter checkpoint");
  if (detail::read_i32(is) != 1)
    throw CheckpointMismatch(origin + ": unsupported checkpoint version");
  const int32_t block_len = detail::read_i32(is);
  if (block_len < 10 || block_len > 64)
    throw CheckpointMismatch(origin + ": corrupt config block");
  std::vector<int32_t> block(static_cast<size_t>(block_len));
  for (auto& v : block) v = detail::read_i32(is);
  const uint64_t hash = detail::read_u64(is);

  NetworkConfig cfg;
  size_t at = 0;
  const int n_hidden = block[at++];
  cfg.hidden_dims.clear();
  for (int l = 0; l < n_hidden; ++l) cfg.hidden_dims.push_back(block[at++]);
  cfg.input_dim = block[at++];
  cfg.feature_dim = block[at++];
  cfg.n_novel_heads = block[at++];
  cfg.overcluster_factor = block[at++];
  cfg.projection_dim = block[at++];
  cfg.proj_hidden = block[at++];
  cfg.neighborhood_k = block[at++];
  cfg.n_base_classes = block[at++];
  cfg.n_novel_classes = block[at++];
  if (detail::config_hash(cfg) != hash)
    throw CheckpointMismatch(origin + ": config hash mismatch");

  RngStream dummy(0);
  NetworkParams params = init_params(cfg, dummy);
  params.for_each([&](NetworkParams::Ref r) {
    for (Eigen::Index i = 0; i < r.size; ++i) {
      float f = 0.0f;
      is.read(reinterpret_cast<char*>(&f), sizeof f);
      r.data[i] = static_cast<double>(f);
    }
  });
  if (!is) throw CheckpointMismatch(origin + ": truncated parameter data");
  return {cfg, std::move(params)};
}

inline void save_params(const NetworkConfig& cfg, const NetworkParams& params,
                        const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  write_params_payload(os, cfg, params);
}

inline std::pair<NetworkConfig, NetworkParams> load_params(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  return read_params_payload(is, path);
}

}  // namespace ncdseg
