#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lreid/error.hpp"
#include "lreid/eval/featstore.hpp"

namespace lreid::eval {

/// Gallery order for one query after the same-identity-same-camera exclusion.
struct RankedList {
  std::vector<std::size_t> order;     // gallery rows, best first
  std::vector<double> similarity;     // aligned with order
  std::vector<std::uint8_t> matches;  // aligned with order
};

inline double dot(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j) s += a[j] * b[j];
  return s;
}

/// Sorts by descending cosine similarity; equal similarities keep ascending row order.
inline RankedList rank(const double* query, std::int64_t identity, int camera, const FeatureSet& gallery) {
  if (gallery.rows() == 0) throw DegenerateInputError("rank: empty gallery");
  std::vector<std::size_t> rows;
  std::vector<double> sim(gallery.rows());
  for (std::size_t g = 0; g < gallery.rows(); ++g) {
    if (gallery.identities[g] == identity && gallery.cameras[g] == camera) continue;
    rows.push_back(g);
    sim[g] = dot(query, gallery.row(g), gallery.dim());
  }
  std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  RankedList rl;
  rl.order = rows;
  for (auto g : rows) {
    rl.similarity.push_back(sim[g]);
    rl.matches.push_back(gallery.identities[g] == identity ? 1 : 0);
  }
  return rl;
}

/// (1/#matches) * sum over match ranks k of (matches within top k)/k; nullopt without matches.
inline std::optional<double> average_precision(const RankedList& rl) {
  double hits = 0.0, sum = 0.0;
  for (std::size_t k = 0; k < rl.matches.size(); ++k)
    if (rl.matches[k]) {
      hits += 1.0;
      sum += hits / static_cast<double>(k + 1);
    }
  if (hits == 0.0) return std::nullopt;
  return sum / hits;
}

struct RetrievalScore {
  double mAP = 0.0;
  double rank1 = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // queries without a valid match
};

/// Ranks every query row against the gallery. Per-query terms are summed in query order.
inline RetrievalScore evaluate_retrieval(const FeatureSet& queries, const FeatureSet& gallery) {
  if (queries.rows() > 0 && queries.dim() != gallery.dim())
    throw DimensionError("evaluate_retrieval: query dim " + std::to_string(queries.dim()) + " vs gallery dim " +
                         std::to_string(gallery.dim()));
  RetrievalScore s;
  double ap_sum = 0.0, r1_sum = 0.0;
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    const auto rl = rank(queries.row(q), queries.identities[q], queries.cameras[q], gallery);
    const auto ap = average_precision(rl);
    if (!ap) {
      ++s.skipped;
      continue;
    }
    ++s.evaluated;
    ap_sum += *ap;
    r1_sum += rl.matches.front() ? 1.0 : 0.0;
  }
  if (s.evaluated > 0) {
    s.mAP = ap_sum / static_cast<double>(s.evaluated);
    s.rank1 = r1_sum / static_cast<double>(s.evaluated);
  }
  return s;
}

struct MetricsRow {
  std::string dataset;
  double mAP = 0.0;
  double rank1 = 0.0;
};

/// Per-dataset rows plus an unweighted Average row.
struct MetricsTable {
  std::vector<MetricsRow> rows;

  MetricsRow average() const {
    MetricsRow avg{"Average", 0.0, 0.0};
    if (rows.empty()) return avg;
    for (const auto& r : rows) {
      avg.mAP += r.mAP;
      avg.rank1 += r.rank1;
    }
    avg.mAP /= static_cast<double>(rows.size());
    avg.rank1 /= static_cast<double>(rows.size());
    return avg;
  }

  std::string to_csv() const {
    std::string out = "dataset,mAP,rank1\n";
    auto line = [&](const MetricsRow& r) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", r.dataset.c_str(), r.mAP, r.rank1);
      out += buf;
    };
    for (const auto& r : rows) line(r);
    line(average());
    return out;
  }
};

}  // namespace lreid::eval
