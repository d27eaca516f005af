#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lreid/autodiff/ops.hpp"
#include "lreid/error.hpp"

namespace lreid::loss {

using ad::Graph;
using ad::Var;

struct LossWeights {
  double lambda_ce = 1.0;
  double lambda_tri = 1.0;
  double lambda_cmcl = 0.1;
  double lambda_pcl = 1.0;
  double margin = 0.3;
  double tau = 0.5;
  std::size_t parts = 5;

  void validate() const {
    if (!(lambda_ce >= 0 && lambda_tri >= 0 && lambda_cmcl >= 0 && lambda_pcl >= 0))
      throw ConfigError("loss weights must be >= 0");
    if (!(margin >= 0)) throw ConfigError("loss.margin must be >= 0");
    if (!(tau > 0)) throw ConfigError("loss.tau must be > 0");
    if (parts < 2) throw ConfigError("loss.parts must be >= 2");
  }
};

/// Mean over rows of -log softmax(logits)[label].
inline Var loss_ce(const Var& logits, std::span<const std::size_t> labels) {
  return ad::softmax_cross_entropy(logits, labels);
}

struct HardPair {
  std::size_t positive;
  std::size_t negative;
};

/// Euclidean distance, summed in coordinate order.
inline double euclidean(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return std::sqrt(s);
}

/// Batch-hard mining on [B,D] features. For anchor i: the farthest same-label
/// row other than i, and the nearest different-label row. Ties go to the
/// lowest row index.
inline std::vector<HardPair> mine_hard_pairs(const Tensor& feats, std::span<const std::int64_t> labels) {
  if (feats.rank() != 2 || feats.dim(0) != labels.size())
    throw DimensionError("mine_hard_pairs: features " + shape_str(feats.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t n = feats.dim(0), dim = feats.dim(1);
  std::vector<HardPair> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::optional<std::size_t> pos, neg;
    double d_pos = 0.0, d_neg = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = euclidean(feats.ptr() + i * dim, feats.ptr() + j * dim, dim);
      if (labels[j] == labels[i]) {
        if (!pos || d > d_pos) pos = j, d_pos = d;
      } else if (!neg || d < d_neg) {
        neg = j, d_neg = d;
      }
    }
    if (!pos || !neg)
      throw BatchCompositionError("mine_hard_pairs: anchor " + std::to_string(i) + " has no " +
                                  (pos ? "negative" : "positive"));
    out[i] = {*pos, *neg};
  }
  return out;
}

/// Batch-hard triplet loss on raw features [B,D]:
/// mean_i max(d(i, p_i) - d(i, n_i) + margin, 0).
/// At a zero distance the distance's subgradient is taken as 0.
inline Var loss_triplet(const Var& feats, std::span<const std::int64_t> labels, double margin) {
  const Tensor& f = feats.value();
  const auto pairs = mine_hard_pairs(f, labels);
  const std::size_t n = f.dim(0), dim = f.dim(1);
  double loss = 0.0;
  std::vector<double> dp(n), dn(n);
  for (std::size_t i = 0; i < n; ++i) {
    dp[i] = euclidean(f.ptr() + i * dim, f.ptr() + pairs[i].positive * dim, dim);
    dn[i] = euclidean(f.ptr() + i * dim, f.ptr() + pairs[i].negative * dim, dim);
    loss += std::max(dp[i] - dn[i] + margin, 0.0);
  }
  loss /= static_cast<double>(n);
  const auto fid = feats.id();
  return feats.graph().record(
      Tensor::scalar(loss), {feats},
      [fid, n, dim, margin, pairs, dp = std::move(dp), dn = std::move(dn)](Graph& g, std::size_t self) {
        const double go = g.grad(self)[0] / static_cast<double>(n);
        const Tensor& f = g.value(fid);
        Tensor& gf = g.grad_buffer(fid);
        // Contribution of +sign * d(i, j).
        auto push = [&](std::size_t i, std::size_t j, double d, double sign) {
          if (d == 0.0) return;
          for (std::size_t k = 0; k < dim; ++k) {
            const double u = sign * go * (f[i * dim + k] - f[j * dim + k]) / d;
            gf[i * dim + k] += u;
            gf[j * dim + k] -= u;
          }
        };
        for (std::size_t i = 0; i < n; ++i) {
          if (!(dp[i] - dn[i] + margin > 0.0)) continue;
          push(i, pairs[i].positive, dp[i], 1.0);
          push(i, pairs[i].negative, dn[i], -1.0);
        }
      });
}

inline Var loss_base(const Var& ce, const Var& tri, const LossWeights& w) {
  return ad::weighted_sum({{w.lambda_ce, ce}, {w.lambda_tri, tri}});
}

/// Stored replay features with their identities; rows of `features` are unit vectors.
struct ReplayBank {
  Tensor features;  // [M,D]
  std::vector<std::int64_t> identities;
};

/// Cross-model compatibility loss.
///
/// anchors [R,D]: current-model features of replay images; batch [B,D]:
/// current-model features of the new-task batch. Per anchor, the candidates
/// are every bank row followed by every batch row; positives are the bank rows
/// sharing the anchor's identity. Similarities are dot products over tau; with
/// `normalize` the anchors and batch rows are projected to unit norm first.
inline Var loss_cmcl(const Var& anchors, std::span<const std::int64_t> anchor_ids, const ReplayBank& bank,
                     const Var& batch, double tau, bool normalize = true) {
  if (bank.identities.empty()) throw ProtocolError("loss_cmcl: replay bank is empty");
  if (!(tau > 0.0)) throw ConfigError("loss_cmcl: tau must be > 0");
  if (bank.features.rank() != 2 || bank.features.dim(0) != bank.identities.size())
    throw DimensionError("loss_cmcl: bank features " + shape_str(bank.features.shape()) + " vs " +
                         std::to_string(bank.identities.size()) + " identities");
  if (anchors.shape().size() != 2 || anchors.shape()[0] != anchor_ids.size())
    throw DimensionError("loss_cmcl: anchors " + shape_str(anchors.shape()) + " vs " +
                         std::to_string(anchor_ids.size()) + " identities");
  const std::size_t rows = anchor_ids.size(), m = bank.identities.size(), b = batch.shape()[0];
  Graph& g = anchors.graph();
  const Var a = normalize ? ad::l2_normalize(anchors) : anchors;
  const Var x = normalize ? ad::l2_normalize(batch) : batch;
  const Var bank_sim = ad::matmul_nt(a, g.constant(bank.features));
  const Var batch_sim = ad::matmul_nt(a, x);
  const Var logits = ad::scale(ad::concat_cols(bank_sim, batch_sim), 1.0 / tau);
  std::vector<std::uint8_t> positive(rows * (m + b), 0);
  for (std::size_t r = 0; r < rows; ++r) {
    bool any = false;
    for (std::size_t j = 0; j < m; ++j)
      if (bank.identities[j] == anchor_ids[r]) positive[r * (m + b) + j] = 1, any = true;
    if (!any)
      throw IntegrityError("loss_cmcl: anchor identity " + std::to_string(anchor_ids[r]) + " has no bank entry");
  }
  return ad::multi_positive_nll(logits, positive);
}

/// Part logits [B*N, N]; row r targets part r mod N.
inline Var part_ce(const Var& logits) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] % s[1] != 0)
    throw DimensionError("part_ce: logits must be [B*N,N], got " + shape_str(s));
  std::vector<std::size_t> labels(s[0]);
  for (std::size_t r = 0; r < s[0]; ++r) labels[r] = r % s[1];
  return ad::softmax_cross_entropy(logits, labels);
}

/// New-head part loss, or the mean of the new- and old-head losses.
inline Var loss_pcl(const Var& new_logits, const std::optional<Var>& old_logits) {
  if (!old_logits) return part_ce(new_logits);
  if (old_logits->shape() != new_logits.shape())
    throw DimensionError("loss_pcl: head outputs differ " + shape_str(new_logits.shape()) + " vs " +
                         shape_str(old_logits->shape()));
  return ad::weighted_sum({{0.5, part_ce(new_logits)}, {0.5, part_ce(*old_logits)}});
}

struct LossTerms {
  Var ce;
  Var tri;
  std::optional<Var> cmcl;
  std::optional<Var> pcl;
};

/// base + lambda_cmcl * cmcl + lambda_pcl * pcl. Absent terms are skipped; cmcl is never used at t = 1.
inline Var loss_total(const LossTerms& terms, const LossWeights& w, int task) {
  std::vector<std::pair<double, Var>> parts{{w.lambda_ce, terms.ce}, {w.lambda_tri, terms.tri}};
  if (terms.cmcl && task >= 2) parts.emplace_back(w.lambda_cmcl, *terms.cmcl);
  if (terms.pcl) parts.emplace_back(w.lambda_pcl, *terms.pcl);
  return ad::weighted_sum(parts);
}

}  // namespace lreid::loss
