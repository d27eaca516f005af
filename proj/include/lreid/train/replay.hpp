#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lreid/data/synth.hpp"
#include "lreid/error.hpp"
#include "lreid/io.hpp"
#include "lreid/losses.hpp"
#include "lreid/model/forward.hpp"
#include "lreid/rng.hpp"
#include "lreid/train/sampling.hpp"

namespace lreid::train {

struct ReplayEntry {
  Tensor image;  // [3,40,16]
  std::int64_t identity = 0;
  int task = 0;
  Tensor feature;  // [32], unit norm, extracted by the model of `task`

  friend bool operator==(const ReplayEntry&, const ReplayEntry&) = default;
};

/// Exemplars and their frozen features, one block per finished task.
class ReplayStore {
 public:
  bool empty() const { return blocks_.empty(); }
  std::size_t task_count() const { return blocks_.size(); }
  const std::vector<ReplayEntry>& task(int t) const { return blocks_.at(static_cast<std::size_t>(t - 1)); }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.size();
    return n;
  }

  /// Blocks must arrive in task order; an existing block is never touched again.
  void add_task(int t, std::vector<ReplayEntry> entries) {
    if (t != static_cast<int>(blocks_.size()) + 1)
      throw ProtocolError("replay store: expected task " + std::to_string(blocks_.size() + 1) + ", got " +
                          std::to_string(t));
    blocks_.push_back(std::move(entries));
  }

  std::uint64_t task_hash(int t) const {
    io::Fnv1a h;
    std::vector<std::uint8_t> buf;
    for (const auto& e : task(t)) encode_entry(buf, e);
    h.update(buf);
    return h.digest();
  }

  /// Every stored feature with its identity, in task then insertion order.
  loss::ReplayBank bank() const {
    const std::size_t n = size();
    if (n == 0) throw ProtocolError("replay store is empty");
    loss::ReplayBank b{Tensor({n, model::kFeatureDim}), {}};
    std::size_t r = 0;
    for (const auto& block : blocks_)
      for (const auto& e : block) {
        std::copy(e.feature.data().begin(), e.feature.data().end(), b.features.ptr() + r++ * model::kFeatureDim);
        b.identities.push_back(e.identity);
      }
    return b;
  }

  // magic[8] | u64 task count | per task: u64 n, entries | u64 FNV-1a of the preceding bytes
  std::vector<std::uint8_t> encode() const {
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    io::put_u64(out, blocks_.size());
    for (const auto& block : blocks_) {
      io::put_u64(out, block.size());
      for (const auto& e : block) encode_entry(out, e);
    }
    io::put_u64(out, io::fnv1a(out));
    return out;
  }

  static ReplayStore decode(std::span<const std::uint8_t> bytes, const std::string& source) {
    if (bytes.size() < 16) throw FormatError(source + ": truncated replay store");
    io::Reader tail(bytes.last(8), source);
    const auto body = bytes.first(bytes.size() - 8);
    if (tail.u64() != io::fnv1a(body)) throw FormatError(source + ": replay store checksum mismatch");
    io::Reader rd(body, source);
    const auto magic = rd.raw(8);
    if (!std::equal(magic.begin(), magic.end(), kMagic)) throw FormatError(source + ": not a replay store");
    ReplayStore store;
    const auto tasks = rd.u64();
    for (std::uint64_t t = 0; t < tasks; ++t) {
      std::vector<ReplayEntry> block(rd.u64());
      for (auto& e : block) {
        e.identity = static_cast<std::int64_t>(rd.u64());
        e.task = static_cast<int>(rd.u64());
        e.image = Tensor({data::kChannels, data::kHeight, data::kWidth});
        rd.f64s(e.image.data());
        e.feature = Tensor({model::kFeatureDim});
        rd.f64s(e.feature.data());
      }
      store.blocks_.push_back(std::move(block));
    }
    if (rd.remaining() != 0) throw FormatError(source + ": trailing bytes in replay store");
    return store;
  }

  /// store.bin plus a manifest with per-task counts and hashes.
  void save(const std::filesystem::path& dir) const {
    io::write_file(dir / "store.bin", encode());
    nlohmann::json tasks = nlohmann::json::array();
    for (std::size_t t = 1; t <= blocks_.size(); ++t)
      tasks.push_back({{"task", std::to_string(t)},
                       {"entries", std::to_string(blocks_[t - 1].size())},
                       {"hash", io::hex64(task_hash(static_cast<int>(t)))}});
    nlohmann::json manifest{{"format", "lreid-replay"}, {"version", "1"}, {"file", "store.bin"}, {"tasks", tasks}};
    io::write_text(dir / "manifest.json", manifest.dump(1) + "\n");
  }

  static ReplayStore load(const std::filesystem::path& dir) {
    return decode(io::read_file(dir / "store.bin"), (dir / "store.bin").string());
  }

  friend bool operator==(const ReplayStore&, const ReplayStore&) = default;

 private:
  static constexpr std::uint8_t kMagic[8] = {'L', 'R', 'E', 'I', 'D', 'R', 'P', 'L'};

  static void encode_entry(std::vector<std::uint8_t>& out, const ReplayEntry& e) {
    io::put_u64(out, static_cast<std::uint64_t>(e.identity));
    io::put_u64(out, static_cast<std::uint64_t>(e.task));
    io::put_f64s(out, e.image.data());
    io::put_f64s(out, e.feature.data());
  }

  std::vector<std::vector<ReplayEntry>> blocks_;
};

/// Tasks visited round-robin in ascending order; entries uniform within a task.
inline std::vector<const ReplayEntry*> sample_replay_batch(const ReplayStore& store, std::size_t size, Rng& rng) {
  if (store.empty() || store.size() == 0) throw ProtocolError("sample_replay_batch: replay store is empty");
  const std::size_t tasks = store.task_count();
  std::vector<std::size_t> quota(tasks, 0);
  for (std::size_t i = 0; i < size; ++i) ++quota[i % tasks];
  std::vector<std::vector<std::size_t>> picks(tasks);
  for (std::size_t t = 0; t < tasks; ++t) {
    const auto& block = store.task(static_cast<int>(t) + 1);
    if (block.empty()) throw ProtocolError("sample_replay_batch: task " + std::to_string(t + 1) + " has no entries");
    std::vector<std::size_t> pool(block.size());
    for (std::size_t j = 0; j < pool.size(); ++j) pool[j] = j;
    picks[t] = draw(pool, quota[t], rng);
  }
  std::vector<const ReplayEntry*> out;
  out.reserve(size);
  std::vector<std::size_t> cursor(tasks, 0);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t t = i % tasks;
    out.push_back(&store.task(static_cast<int>(t) + 1)[picks[t][cursor[t]++]]);
  }
  return out;
}

struct ReplayPolicy {
  std::size_t max_identities = 50;
  std::size_t per_identity = 2;
};

/// Picks min(max_identities, |ids|) identities and per_identity images of each,
/// uniformly, and stores them with features from `params`.
inline std::vector<ReplayEntry> select_replay(const model::ModelParams& params, const std::vector<data::Sample>& train,
                                              int task, const ReplayPolicy& policy, Rng& rng) {
  const IdentityIndex index(train);
  std::vector<std::size_t> ids(index.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  const auto chosen = draw(ids, std::min(policy.max_identities, ids.size()), rng);
  std::vector<ReplayEntry> out;
  std::vector<const Tensor*> images;
  for (auto id : chosen)
    for (auto s : draw(index.members[id], std::min(policy.per_identity, index.members[id].size()), rng)) {
      out.push_back({train[s].image, train[s].identity, task, Tensor{}});
      images.push_back(&train[s].image);
    }
  if (out.empty()) return out;
  const Tensor feats = model::embed(params, images);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i].feature = Tensor({model::kFeatureDim}, std::vector<double>(feats.ptr() + i * model::kFeatureDim,
                                                                      feats.ptr() + (i + 1) * model::kFeatureDim));
  return out;
}

inline void update_replay_store(ReplayStore& store, const model::ModelParams& params,
                                const std::vector<data::Sample>& train, int task, const ReplayPolicy& policy,
                                Rng& rng) {
  store.add_task(task, select_replay(params, train, task, policy, rng));
}

}  // namespace lreid::train
