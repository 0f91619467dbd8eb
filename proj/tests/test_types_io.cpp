#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ncdseg/io.hpp"
#include "ncdseg/types.hpp"

using namespace ncdseg;
namespace fs = std::filesystem;

namespace {

LabeledCloud tiny_cloud(std::vector<int> labels, std::vector<uint8_t> mask) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  Eigen::Matrix3Xd coords(3, n);
  for (Eigen::Index i = 0; i < n; ++i)
    coords.col(i) = Eigen::Vector3d(double(i), 0.0, 0.0);
  return LabeledCloud(coords, Eigen::Matrix3Xd(3, 0), std::move(labels),
                      std::move(mask));
}

NcdTaskSpec tiny_task() {
  NcdTaskSpec t;
  t.base_classes = {0, 1};
  t.novel_classes = {2, 3};
  t.class_names = {{0, "a"}, {1, "b"}, {2, "c"}, {3, "d"}};
  t.split_name = "tiny";
  return t;
}

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("validate_task accepts a consistent split") {
  const auto cloud = tiny_cloud({0, 1, 2, 3}, {0, 0, 1, 1});
  REQUIRE_NOTHROW(validate_task(cloud, tiny_task()));
}

TEST_CASE("validate_task rejects overlapping class sets") {
  auto task = tiny_task();
  task.novel_classes = {1, 2};
  const auto cloud = tiny_cloud({0, 1}, {0, 0});
  REQUIRE_THROWS_AS(validate_task(cloud, task), DisjointnessViolation);
}

TEST_CASE("validate_task rejects a base point with a novel label") {
  const auto cloud = tiny_cloud({0, 2}, {0, 0});
  REQUIRE_THROWS_AS(validate_task(cloud, tiny_task()), LabelOutOfSplit);
}

TEST_CASE("validate_task is idempotent") {
  const auto cloud = tiny_cloud({0, 1, 2}, {0, 0, 1});
  const auto& once = validate_task(cloud, tiny_task());
  const auto& twice = validate_task(once, tiny_task());
  REQUIRE(&twice == &cloud);
}

TEST_CASE("constructor enforces equal lengths") {
  Eigen::Matrix3Xd coords(3, 2);
  coords.setZero();
  REQUIRE_THROWS_AS(
      LabeledCloud(coords, Eigen::Matrix3Xd(3, 0), {0}, {0, 0}),
      LengthMismatch);
  REQUIRE_THROWS_AS(
      LabeledCloud(Eigen::Matrix3Xd(3, 0), Eigen::Matrix3Xd(3, 0), {}, {}),
      EmptyCloud);
}

TEST_CASE("training code sees novel labels as unlabeled") {
  const auto cloud = tiny_cloud({0, 2}, {0, 1});
  REQUIRE(cloud.train_label(0) == 0);
  REQUIRE(cloud.train_label(1) == kUnlabeled);
  REQUIRE(cloud.eval_label_reads() == 0);
  REQUIRE(cloud.eval_view().label(1) == 2);
  REQUIRE(cloud.eval_label_reads() == 1);
  cloud.reset_eval_audit();
  REQUIRE(cloud.eval_label_reads() == 0);
}

TEST_CASE("normalize_columns rejects near-zero columns") {
  FeatureMatrix f(3, 2);
  f << 1, 0, 0, 0, 0, 0;
  REQUIRE_THROWS_AS(normalize_columns(f), NormalizationDegenerate);
  f(1, 1) = 2.0;
  const FeatureMatrix z = normalize_columns(f);
  REQUIRE(z.col(0).norm() == Catch::Approx(1.0));
  REQUIRE(z.col(1).norm() == Catch::Approx(1.0));
}

TEST_CASE("cloud file format parses the documented example") {
  const std::string path = temp_path("ncdseg_example.ncdpc");
  {
    std::ofstream out(path);
    out << "ncdpc v1 3 0 0\n";
    out << "0 0 0 -1 1\n";
    out << "1 0 0 2 0\n";
    out << "0 1 0 2 0\n";
  }
  const LabeledCloud cloud = load_cloud(path);
  REQUIRE(cloud.size() == 3);
  REQUIRE_FALSE(cloud.has_color());
  REQUIRE(cloud.novel_mask[0] == 1);
  REQUIRE(cloud.novel_mask[1] == 0);
  REQUIRE(cloud.train_label(0) == kUnlabeled);
  REQUIRE(cloud.train_label(1) == 2);
  fs::remove(path);
}

TEST_CASE("empty cloud file is rejected") {
  const std::string path = temp_path("ncdseg_empty.ncdpc");
  std::ofstream(path).close();
  REQUIRE_THROWS_AS(load_cloud(path), EmptyCloud);
  fs::remove(path);
}

TEST_CASE("row arity mismatch is a parse error") {
  const std::string path = temp_path("ncdseg_badrow.ncdpc");
  {
    std::ofstream out(path);
    out << "ncdpc v1 1 0 0\n";
    out << "0 0 0 1\n";  // 4 fields, 5 declared
  }
  REQUIRE_THROWS_AS(load_cloud(path), ParseError);
  fs::remove(path);
}

TEST_CASE("cloud save/load round trip is bit-exact") {
  auto [cloud, aux] = generate_synthetic_scene(separable_scene_spec(3, 0));
  const std::string p1 = temp_path("ncdseg_rt1.ncdpc");
  const std::string p2 = temp_path("ncdseg_rt2.ncdpc");
  save_cloud(cloud, p1);
  const LabeledCloud reloaded = load_cloud(p1);
  save_cloud(reloaded, p2);
  REQUIRE(slurp(p1) == slurp(p2));
  REQUIRE(reloaded.size() == cloud.size());
  for (Eigen::Index i = 0; i < cloud.coords.cols(); ++i)
    for (int a = 0; a < 3; ++a)
      REQUIRE(reloaded.coords(a, i) == cloud.coords(a, i));  // bitwise
  for (size_t i = 0; i < cloud.size(); ++i) {
    REQUIRE(reloaded.novel_mask[i] == cloud.novel_mask[i]);
    REQUIRE(reloaded.eval_view().label(i) == cloud.eval_view().label(i));
  }
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("aux features round trip and validate counts") {
  auto [cloud, aux] = generate_synthetic_scene(separable_scene_spec(3, 1));
  const std::string path = temp_path("ncdseg_rt.aux");
  save_aux_features(aux, "scene", path);
  const FeatureMatrix reloaded = load_aux_features(path, cloud);
  REQUIRE(reloaded.rows() == aux.rows());
  REQUIRE((reloaded - aux).cwiseAbs().maxCoeff() == 0.0);

  const auto small = tiny_cloud({0}, {0});
  REQUIRE_THROWS_AS(load_aux_features(path, small), CountMismatch);
  fs::remove(path);
}

TEST_CASE("aux file with non-finite value is rejected") {
  const auto cloud = tiny_cloud({0}, {0});
  const std::string path = temp_path("ncdseg_nan.aux");
  {
    std::ofstream out(path);
    out << "ncdaux v1 1 2 c\n";
    out << "0.5 nan\n";
  }
  REQUIRE_THROWS_AS(load_aux_features(path, cloud), ParseError);
  fs::remove(path);
}

TEST_CASE("shipped POSS-3^3 split") {
  const NcdTaskSpec task = load_split(std::string(NCDSEG_DATA_DIR) +
                                      "/splits/poss-3_3.split");
  REQUIRE(task.num_novel() == 3);
  REQUIRE(task.class_name(task.novel_classes[0]) == "cone-stone");
  REQUIRE(task.class_name(task.novel_classes[1]) == "rider");
  REQUIRE(task.class_name(task.novel_classes[2]) == "trashcan");
  REQUIRE(task.num_classes() == 13);
}

TEST_CASE("shipped KITTI-4^3 split") {
  const NcdTaskSpec task = load_split(std::string(NCDSEG_DATA_DIR) +
                                      "/splits/kitti-4_3.split");
  REQUIRE(task.num_novel() == 4);
  std::vector<std::string> names;
  for (int id : task.novel_classes) names.push_back(task.class_name(id));
  REQUIRE(names == std::vector<std::string>{"bicycle", "bicyclist",
                                            "motorcyclist", "person"});
  REQUIRE(task.num_base() == 15);
}

TEST_CASE("split with a class in both sets is rejected") {
  const std::string path = temp_path("ncdseg_dup.split");
  {
    std::ofstream out(path);
    out << "dataset = x\nsplit = x\n";
    out << "classes = wall:0 floor:1\n";
    out << "base = wall\n";
    out << "novel = wall floor\n";
  }
  REQUIRE_THROWS_AS(load_split(path), DisjointnessViolation);
  fs::remove(path);
}

TEST_CASE("split with an unknown class name is rejected") {
  const std::string path = temp_path("ncdseg_unknown.split");
  {
    std::ofstream out(path);
    out << "classes = wall:0\nbase = wall\nnovel = ghost\n";
  }
  REQUIRE_THROWS_AS(load_split(path), UnknownClassName);
  fs::remove(path);
}

TEST_CASE("split save/load round trip") {
  const NcdTaskSpec task = separable_task();
  const std::string p1 = temp_path("ncdseg_rt1.split");
  const std::string p2 = temp_path("ncdseg_rt2.split");
  save_split(task, p1);
  const NcdTaskSpec reloaded = load_split(p1);
  save_split(reloaded, p2);
  REQUIRE(slurp(p1) == slurp(p2));
  REQUIRE(reloaded.base_classes == task.base_classes);
  REQUIRE(reloaded.novel_classes == task.novel_classes);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("synthetic scenes honour budgets and are reproducible") {
  SynthSceneSpec spec = separable_scene_spec(7, 0);
  spec.classes.resize(2);
  spec.classes[0].point_budget = 100;
  spec.classes[1].point_budget = 100;
  auto [c1, a1] = generate_synthetic_scene(spec);
  auto [c2, a2] = generate_synthetic_scene(spec);
  REQUIRE(c1.size() == 200);
  long first = 0;
  for (size_t i = 0; i < c1.size(); ++i)
    first += c1.train_label(i) == spec.classes[0].class_id;
  REQUIRE(first == 100);

  REQUIRE((c1.coords - c2.coords).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a1 - a2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero aux noise gives identical per-class features") {
  SynthSceneSpec spec = separable_scene_spec(7, 0);
  spec.aux_embedding_sigma = 0.0;
  auto [cloud, aux] = generate_synthetic_scene(spec);
  const auto view = cloud.eval_view();
  std::map<int, Vector> anchor;
  for (size_t i = 0; i < cloud.size(); ++i) {
    const int label = view.label(i);
    const Vector f = aux.col(static_cast<Eigen::Index>(i));
    auto it = anchor.find(label);
    if (it == anchor.end())
      anchor[label] = f;
    else
      REQUIRE((it->second - f).cwiseAbs().maxCoeff() == 0.0);
  }
  REQUIRE(anchor.size() == 7);
}

TEST_CASE("apply_split_mask stamps novelty from the task") {
  auto [cloud, aux] = generate_synthetic_scene(separable_scene_spec(7, 2));
  const auto masked = apply_split_mask(cloud, separable_task());
  const auto view = masked.eval_view();
  for (size_t i = 0; i < masked.size(); ++i)
    REQUIRE(int(masked.novel_mask[i]) == int(view.label(i) >= 4));
}
