#pragma once

#include <string>
#include <vector>

#include "lreid/data/synth.hpp"
#include "lreid/eval/featstore.hpp"
#include "lreid/eval/metrics.hpp"
#include "lreid/model/params.hpp"

namespace lreid::eval {

inline std::string dataset_name(int task) { return "task_" + std::to_string(task); }

inline FeatureSet concat_sets(const std::vector<FeatureSet>& sets, DatasetTag tag) {
  std::size_t rows = 0;
  for (const auto& s : sets) rows += s.rows();
  if (sets.empty() || rows == 0) throw DegenerateInputError("concat_sets: nothing to concatenate");
  FeatureSet out;
  out.extractor_version = 0;  // mixed
  out.tag = std::move(tag);
  out.features = Tensor({rows, sets.front().dim()});
  std::size_t r = 0;
  for (const auto& s : sets) {
    std::copy(s.features.data().begin(), s.features.data().end(), out.features.ptr() + r * out.dim());
    r += s.rows();
    out.identities.insert(out.identities.end(), s.identities.begin(), s.identities.end());
    out.cameras.insert(out.cameras.end(), s.cameras.begin(), s.cameras.end());
  }
  return out;
}

/// Queries of every task embedded by `final_model`, ranked against the stored
/// gallery set of the same task (embedded by whichever model wrote it).
inline MetricsTable evaluate_per_dataset(const model::ModelParams& final_model,
                                         const std::vector<data::TaskDataset>& suite, const FeatureStore& store) {
  MetricsTable table;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const int t = static_cast<int>(i) + 1;
    const FeatureSet gallery = store.load({t, "gallery"});
    const FeatureSet queries = extract_features(final_model, suite[i].query, {t, "query"});
    const auto s = evaluate_retrieval(queries, gallery);
    table.rows.push_back({dataset_name(t), s.mAP, s.rank1});
  }
  return table;
}

/// Control: galleries re-embedded by `final_model` instead of the stored sets.
inline MetricsTable evaluate_backfilled(const model::ModelParams& final_model,
                                        const std::vector<data::TaskDataset>& suite) {
  MetricsTable table;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const int t = static_cast<int>(i) + 1;
    const auto gallery = extract_features(final_model, suite[i].gallery, {t, "gallery"});
    const auto queries = extract_features(final_model, suite[i].query, {t, "query"});
    const auto s = evaluate_retrieval(queries, gallery);
    table.rows.push_back({dataset_name(t), s.mAP, s.rank1});
  }
  return table;
}

/// All stored gallery sets concatenated in task order; all queries ranked against them.
inline RetrievalScore evaluate_unified(const model::ModelParams& final_model,
                                       const std::vector<data::TaskDataset>& suite, const FeatureStore& store) {
  std::vector<FeatureSet> galleries, queries;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const int t = static_cast<int>(i) + 1;
    galleries.push_back(store.load({t, "gallery"}));
    queries.push_back(extract_features(final_model, suite[i].query, {t, "query"}));
  }
  return evaluate_retrieval(concat_sets(queries, {0, "query"}), concat_sets(galleries, {0, "gallery"}));
}

/// Entry (i, j): mAP of task-j queries embedded by models[i] against the
/// stored task-j gallery set.
inline std::vector<std::vector<double>> compatibility_matrix(const std::vector<model::ModelParams>& models,
                                                             const std::vector<data::TaskDataset>& suite,
                                                             const FeatureStore& store) {
  std::vector<FeatureSet> galleries;
  for (std::size_t j = 0; j < suite.size(); ++j) galleries.push_back(store.load({static_cast<int>(j) + 1, "gallery"}));
  std::vector<std::vector<double>> out(models.size(), std::vector<double>(suite.size(), 0.0));
  for (std::size_t i = 0; i < models.size(); ++i)
    for (std::size_t j = 0; j < suite.size(); ++j) {
      const auto q = extract_features(models[i], suite[j].query, {static_cast<int>(j) + 1, "query"});
      out[i][j] = evaluate_retrieval(q, galleries[j]).mAP;
    }
  return out;
}

}  // namespace lreid::eval
