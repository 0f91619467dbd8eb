#pragma once

#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ncdseg/evaluation.hpp"
#include "ncdseg/io.hpp"
#include "ncdseg/types.hpp"

namespace ncdseg {

/// Precomputed class text embeddings: one unit vector per synonym x template
/// combination, plus the synonym names for bookkeeping. Text encoding happens
/// offline; this module only consumes the vectors.
struct ClassEmbeddingBank {
  int dim = 0;
  // class id -> (synonym name, unit embedding)
  std::map<int, std::vector<std::pair<std::string, Vector>>> classes;
};

/// Renormalized mean of a class's synonym embeddings.
inline Vector ensemble_embed(const ClassEmbeddingBank& bank, int class_id) {
  auto it = bank.classes.find(class_id);
  if (it == bank.classes.end() || it->second.empty())
    throw UnknownClass("class " + std::to_string(class_id) +
                       " is not in the embedding bank");
  Vector mean = Vector::Zero(bank.dim);
  for (const auto& [name, v] : it->second) mean += v;
  mean /= static_cast<double>(it->second.size());
  const double n = mean.norm();
  if (n < 1e-8)
    throw ZeroEnsemble("synonym embeddings of class " +
                       std::to_string(class_id) + " cancel out");
  return mean / n;
}

struct ZeroShotMatch {
  std::vector<int> predicted;
  std::vector<double> score;  // cosine to the winning ensemble
};

/// Per-point argmax of cosine similarity against every class ensemble.
/// Ties go to the lowest class id.
inline ZeroShotMatch match_points(const FeatureMatrix& features,
                                  const ClassEmbeddingBank& bank) {
  if (features.rows() != bank.dim)
    throw DimensionMismatch("feature dim differs from embedding dim");
  std::vector<std::pair<int, Vector>> ensembles;
  for (const auto& [id, vecs] : bank.classes)
    ensembles.emplace_back(id, ensemble_embed(bank, id));

  ZeroShotMatch out;
  out.predicted.resize(static_cast<size_t>(features.cols()));
  out.score.resize(static_cast<size_t>(features.cols()));
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    const double fn = features.col(j).norm();
    int best_id = ensembles.front().first;
    double best = -2.0;
    for (const auto& [id, e] : ensembles) {
      const double cos =
          fn < 1e-12 ? 0.0 : features.col(j).dot(e) / fn;
      if (cos > best) {
        best = cos;
        best_id = id;
      }
    }
    out.predicted[static_cast<size_t>(j)] = best_id;
    out.score[static_cast<size_t>(j)] = best;
  }
  return out;
}

/// Scores zero-shot predictions with the usual report format. No prototype
/// mapping is involved: bank classes are already named.
inline MiouReport zeroshot_report(const LabeledCloud& cloud,
                                  const FeatureMatrix& features,
                                  const ClassEmbeddingBank& bank,
                                  const NcdTaskSpec& task) {
  if (static_cast<size_t>(features.cols()) != cloud.size())
    throw CountMismatch("features do not cover every point");
  const ZeroShotMatch match = match_points(features, bank);

  MiouReport report;
  report.task = task;
  report.head = -1;
  ConfusionMatrix conf(task.num_classes());
  const auto view = cloud.eval_view();
  for (size_t i = 0; i < cloud.size(); ++i)
    conf.add(view.label(i), match.predicted[i]);
  report.per_class_iou = iou_per_class(conf);
  std::vector<double> novel_ious, base_ious;
  for (int id : task.novel_classes)
    novel_ious.push_back(report.per_class_iou[static_cast<size_t>(id)]);
  for (int id : task.base_classes)
    base_ious.push_back(report.per_class_iou[static_cast<size_t>(id)]);
  report.miou_novel = mean_defined(novel_ious);
  report.miou_base = mean_defined(base_ious);
  report.miou_all = mean_defined(report.per_class_iou);
  return report;
}

// ---------------------------------------------------------------------------
// Bank file format:
//
//   ncdbank v1 <n_classes> <D_a>
//   class <id> <n_synonyms>
//   <synonym-name> v_0 ... v_{D_a-1}     (one line per synonym)
// ---------------------------------------------------------------------------

inline ClassEmbeddingBank load_bank(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding bank " + path);
  std::string header;
  if (!std::getline(in, header)) throw ParseError(path + ": empty file");
  const auto h = split_tokens(header);
  if (h.size() != 4 || h[0] != "ncdbank" || h[1] != "v1")
    throw ParseError(path + ": bad header '" + header + "'");
  const long n_classes = parse_int(h[2], path);
  ClassEmbeddingBank bank;
  bank.dim = static_cast<int>(parse_int(h[3], path));
  if (bank.dim <= 0) throw ParseError(path + ": embedding dim must be positive");

  std::string line;
  for (long c = 0; c < n_classes; ++c) {
    if (!std::getline(in, line))
      throw ParseError(path + ": expected " + std::to_string(n_classes) +
                       " class blocks");
    const auto t = split_tokens(line);
    if (t.size() != 3 || t[0] != "class")
      throw ParseError(path + ": bad class line '" + line + "'");
    const int id = static_cast<int>(parse_int(t[1], path));
    const long n_syn = parse_int(t[2], path);
    if (n_syn < 1) throw ParseError(path + ": class needs >= 1 synonym");
    for (long s = 0; s < n_syn; ++s) {
      if (!std::getline(in, line))
        throw ParseError(path + ": truncated synonym block");
      const auto v = split_tokens(line);
      if (static_cast<long>(v.size()) != bank.dim + 1)
        throw ParseError(path + ": synonym line has wrong arity");
      Vector vec(bank.dim);
      for (int d = 0; d < bank.dim; ++d)
        vec[d] = parse_real(v[static_cast<size_t>(d) + 1], path);
      if (std::abs(vec.norm() - 1.0) > 1e-6)
        throw ParseError(path + ": embedding of '" + v[0] +
                         "' is not unit-norm");
      bank.classes[id].emplace_back(v[0], std::move(vec));
    }
  }
  return bank;
}

inline void save_bank(const ClassEmbeddingBank& bank, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embedding bank " + path);
  out << "ncdbank v1 " << bank.classes.size() << ' ' << bank.dim << '\n';
  for (const auto& [id, vecs] : bank.classes) {
    out << "class " << id << ' ' << vecs.size() << '\n';
    for (const auto& [name, v] : vecs) {
      out << name;
      for (int d = 0; d < bank.dim; ++d) out << ' ' << format_real(v[d]);
      out << '\n';
    }
  }
}

/// Synthetic bank for desk-scale runs: per class, n_synonyms noisy copies of
/// the class anchor, renormalized. sigma = 0 reproduces the anchors exactly.
inline ClassEmbeddingBank synthetic_bank(const NcdTaskSpec& task, int dim,
                                         int n_synonyms, double sigma,
                                         uint64_t seed) {
  ClassEmbeddingBank bank;
  bank.dim = dim;
  RngStream rng(seed, 21);
  for (const auto& [id, name] : task.class_names) {
    const Vector anchor = class_anchor(id, dim);
    for (int s = 0; s < n_synonyms; ++s) {
      Vector v = anchor;
      for (int d = 0; d < dim; ++d) v[d] += rng.normal(0.0, sigma);
      const double n = v.norm();
      if (n < 1e-8) {
        v = anchor;
      } else {
        v /= n;
      }
      for (int d = 0; d < dim; ++d) v[d] = quantize_f32(v[d]);
      v /= v.norm();  // stay unit-norm after float32 rounding
      bank.classes[id].emplace_back(
          name + (s == 0 ? "" : "-" + std::to_string(s)), v);
    }
  }
  return bank;
}

}  // namespace ncdseg
