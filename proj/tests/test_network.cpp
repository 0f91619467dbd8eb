#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "ncdseg/losses.hpp"
#include "ncdseg/network.hpp"
#include "ncdseg/rng.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace ncdseg;

namespace {

using gradcheck::small_config;
using gradcheck::random_input;
using gradcheck::neighbors_for;
using gradcheck::collect_refs;
using GradcheckHarness = gradcheck::Harness;

}  // namespace

TEST_CASE("zero weights make features non-normalizable") {
  const NetworkConfig cfg = small_config();
  RngStream rng(1);
  NetworkParams params = init_params(cfg, rng);
  params.for_each([](NetworkParams::Ref r) {
    std::fill(r.data, r.data + r.size, 0.0);
  });
  const Matrix x = random_input(cfg, 6, 2);
  REQUIRE_THROWS_AS(forward(cfg, params, x, neighbors_for(x, 4)),
                    NormalizationDegenerate);
}

TEST_CASE("single point pools over itself") {
  const NetworkConfig cfg = small_config();
  RngStream rng(3);
  const NetworkParams params = init_params(cfg, rng);
  const Matrix x = random_input(cfg, 1, 4);
  const ForwardTrace t = forward(cfg, params, x, {{0}});
  REQUIRE((t.pooled - t.hidden.back()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward is permutation-equivariant") {
  const NetworkConfig cfg = small_config();
  RngStream rng(5);
  const NetworkParams params = init_params(cfg, rng);
  const Matrix x = random_input(cfg, 15, 6);
  const ForwardTrace t = forward(cfg, params, x, neighbors_for(x, 4));

  std::vector<int> perm = {4, 11, 0, 14, 7, 2, 9, 1, 13, 5, 10, 3, 8, 12, 6};
  Matrix px(cfg.input_dim, 15);
  for (int j = 0; j < 15; ++j) px.col(j) = x.col(perm[static_cast<size_t>(j)]);
  const ForwardTrace pt = forward(cfg, params, px, neighbors_for(px, 4));

  for (int j = 0; j < 15; ++j) {
    const int orig = perm[static_cast<size_t>(j)];
    REQUIRE((pt.features.col(j) - t.features.col(orig)).cwiseAbs().maxCoeff() <
            1e-12);
    REQUIRE((pt.base_logits.col(j) - t.base_logits.col(orig))
                .cwiseAbs()
                .maxCoeff() < 1e-12);
    REQUIRE((pt.proj_out.col(j) - t.proj_out.col(orig)).cwiseAbs().maxCoeff() <
            1e-12);
  }
}

TEST_CASE("concat_logits stacks base above novel") {
  const Matrix base = Matrix::Constant(10, 4, 1.0);
  const Matrix novel = Matrix::Constant(3, 4, 2.0);
  const Matrix full = concat_logits(base, novel);
  REQUIRE(full.rows() == 13);
  REQUIRE(full(0, 0) == 1.0);
  REQUIRE(full(12, 3) == 2.0);

  const Matrix empty_base(0, 4);
  REQUIRE(concat_logits(empty_base, novel) == novel);
  REQUIRE(concat_logits(Matrix::Constant(2, 1, 0.5), Matrix::Constant(3, 1, 1.5))
              .rows() == 5);
  REQUIRE_THROWS_AS(concat_logits(base, Matrix::Constant(3, 5, 0.0)),
                    ShapeMismatch);
}

TEST_CASE("linear head gradient matches central differences") {
  // frozen input features, CE loss on the base head only
  RngStream rng(7);
  const int dim = 6, classes = 4, n = 10;
  Matrix w(classes, dim);
  Vector b(classes);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.normal();
  Matrix f(dim, n);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
  Matrix targets = Matrix::Zero(classes, n);
  std::vector<uint8_t> mask(n, 1);
  for (int j = 0; j < n; ++j) targets(int(rng.index(classes)), j) = 1.0;
  Vector weights = Vector::Ones(classes);
  weights[1] = 2.0;

  auto loss = [&]() {
    const Matrix logits = (w * f).colwise() + b;
    return weighted_ce(logits, targets, weights, mask);
  };
  const Matrix logits = (w * f).colwise() + b;
  const auto ce = weighted_ce_grad(logits, targets, weights, mask);
  const Matrix dw = ce.d_logits * f.transpose();
  const Vector db = ce.d_logits.rowwise().sum();

  double max_err = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    max_err = std::max(max_err,
                       oracles::relative_error(
                           dw.data()[i],
                           oracles::central_difference(loss, w.data() + i)));
  for (Eigen::Index i = 0; i < b.size(); ++i)
    max_err = std::max(max_err,
                       oracles::relative_error(
                           db[i], oracles::central_difference(loss, b.data() + i)));
  REQUIRE(max_err < 1e-4);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  const NetworkConfig cfg = small_config();
  RngStream rng(8);
  const NetworkParams params = init_params(cfg, rng);
  const Matrix x = random_input(cfg, 8, 9);
  const ForwardTrace t = forward(cfg, params, x, neighbors_for(x, 4));
  OutputGrads up;
  up.d_base = Matrix::Zero(cfg.n_base_classes, 8);
  up.d_novel.assign(2, Matrix::Zero(cfg.n_novel_classes, 8));
  up.d_oc.assign(2, Matrix::Zero(cfg.overcluster_logits(), 8));
  up.d_proj = Matrix::Zero(cfg.projection_dim, 8);
  NetworkParams g = backward(cfg, params, t, up);
  g.for_each([](NetworkParams::Ref r) {
    for (Eigen::Index i = 0; i < r.size; ++i) REQUIRE(r.data[i] == 0.0);
  });
}

TEST_CASE("full-network gradcheck on random parameters") {
  GradcheckHarness harness(11);
  RngStream rng(12);
  NetworkParams params = init_params(harness.cfg, rng);
  const NetworkParams analytic = harness.analytic_grad(params);

  auto refs = collect_refs(params);
  NetworkParams& mutable_analytic = const_cast<NetworkParams&>(analytic);
  auto analytic_refs = collect_refs(mutable_analytic);

  Eigen::Index total = 0;
  for (const auto& r : refs) total += r.size;

  RngStream pick(13);
  double max_err = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    Eigen::Index flat = static_cast<Eigen::Index>(pick.index(total));
    size_t group = 0;
    while (flat >= refs[group].size) {
      flat -= refs[group].size;
      ++group;
    }
    const double fd = oracles::central_difference(
        [&]() { return harness.loss(params); }, refs[group].data + flat);
    const double an = analytic_refs[group].data[flat];
    max_err = std::max(max_err, oracles::relative_error(an, fd));
  }
  REQUIRE(max_err < 1e-3);
}

TEST_CASE("per-layer gradcheck") {
  GradcheckHarness harness(14);
  RngStream rng(15);
  NetworkParams params = init_params(harness.cfg, rng);
  const NetworkParams analytic = harness.analytic_grad(params);
  auto refs = collect_refs(params);
  auto analytic_refs =
      collect_refs(const_cast<NetworkParams&>(analytic));

  RngStream pick(16);
  for (size_t group = 0; group < refs.size(); ++group) {
    double max_err = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
      const Eigen::Index i =
          static_cast<Eigen::Index>(pick.index(refs[group].size));
      const double fd = oracles::central_difference(
          [&]() { return harness.loss(params); }, refs[group].data + i);
      max_err = std::max(
          max_err, oracles::relative_error(analytic_refs[group].data[i], fd));
    }
    INFO("parameter group " << group << " (" << refs[group].name << ")");
    REQUIRE(max_err < 1e-4);
  }
}

TEST_CASE("backward rejects traces from other parameters") {
  const NetworkConfig cfg = small_config();
  RngStream rng(17);
  NetworkParams a = init_params(cfg, rng);
  NetworkParams b = init_params(cfg, rng);
  const Matrix x = random_input(cfg, 5, 18);
  const ForwardTrace t = forward(cfg, a, x, neighbors_for(x, 4));
  OutputGrads up;
  up.d_base = Matrix::Zero(cfg.n_base_classes, 5);
  REQUIRE_THROWS_AS(backward(cfg, b, t, up), TraceMismatch);

  a.revision++;  // simulate an update after tracing
  REQUIRE_THROWS_AS(backward(cfg, a, t, up), TraceMismatch);
}

TEST_CASE("checkpoints round-trip float32 parameters exactly") {
  const NetworkConfig cfg = small_config();
  RngStream rng(19);
  NetworkParams params = init_params(cfg, rng);
  params.quantize_f32();
  const std::string path =
      (std::filesystem::temp_directory_path() / "ncdseg_params.ckpt").string();
  save_params(cfg, params, path);
  auto [loaded_cfg, loaded] = load_params(path);
  REQUIRE(loaded_cfg == cfg);
  auto a = collect_refs(params);
  auto b = collect_refs(loaded);
  for (size_t g = 0; g < a.size(); ++g)
    for (Eigen::Index i = 0; i < a[g].size; ++i)
      REQUIRE(a[g].data[i] == b[g].data[i]);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint config mismatch is detected") {
  const NetworkConfig cfg = small_config();
  RngStream rng(20);
  NetworkParams params = init_params(cfg, rng);
  const std::string path =
      (std::filesystem::temp_directory_path() / "ncdseg_bad.ckpt").string();
  save_params(cfg, params, path);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(12);  // inside the config block
  const int32_t corrupted = 999;
  f.write(reinterpret_cast<const char*>(&corrupted), 4);
  f.close();
  REQUIRE_THROWS_AS(load_params(path), CheckpointMismatch);
  std::filesystem::remove(path);
}
