#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lreid/data/synth.hpp"
#include "lreid/error.hpp"
#include "lreid/rng.hpp"

namespace lreid::train {

/// Sample indices grouped by identity; identities in ascending order.
struct IdentityIndex {
  std::vector<std::int64_t> identities;
  std::vector<std::vector<std::size_t>> members;

  explicit IdentityIndex(const std::vector<data::Sample>& samples) {
    std::map<std::int64_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < samples.size(); ++i) groups[samples[i].identity].push_back(i);
    for (auto& [id, idx] : groups) {
      identities.push_back(id);
      members.push_back(std::move(idx));
    }
  }

  std::size_t size() const { return identities.size(); }

  /// Dense class label of an identity (its rank among the identities).
  std::size_t label_of(std::int64_t identity) const {
    auto it = std::lower_bound(identities.begin(), identities.end(), identity);
    if (it == identities.end() || *it != identity) throw LabelError("unknown identity " + std::to_string(identity));
    return static_cast<std::size_t>(it - identities.begin());
  }
};

/// Draws `count` items from `pool`: without replacement while possible, with replacement otherwise.
inline std::vector<std::size_t> draw(const std::vector<std::size_t>& pool, std::size_t count, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(count);
  if (count <= pool.size()) {
    std::vector<std::size_t> tmp = pool;
    for (std::size_t i = 0; i < count; ++i) {
      std::swap(tmp[i], tmp[i + rng.below(tmp.size() - i)]);
      out.push_back(tmp[i]);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) out.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

/// P identities x K instances; returns dataset indices grouped by identity.
/// Identities with fewer than K images are drawn with replacement; identities
/// with a single image are not eligible.
inline std::vector<std::size_t> sample_pk_batch(const IdentityIndex& index, std::size_t p, std::size_t k, Rng& rng) {
  if (p < 2 || k < 2) throw ConfigError("sample_pk_batch: need P >= 2 and K >= 2");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < index.size(); ++i)
    if (index.members[i].size() >= 2) eligible.push_back(i);
  if (eligible.size() < p)
    throw BatchCompositionError("sample_pk_batch: " + std::to_string(eligible.size()) +
                                " identities with >= 2 images, need P = " + std::to_string(p));
  std::vector<std::size_t> batch;
  batch.reserve(p * k);
  for (auto id : draw(eligible, p, rng))
    for (auto s : draw(index.members[id], k, rng)) batch.push_back(s);
  return batch;
}

inline std::vector<std::size_t> sample_pk_batch(const std::vector<data::Sample>& samples, std::size_t p,
                                                std::size_t k, Rng& rng) {
  return sample_pk_batch(IdentityIndex(samples), p, k, rng);
}

}  // namespace lreid::train
