#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lreid/error.hpp"
#include "lreid/io.hpp"
#include "lreid/model/params.hpp"

namespace lreid::model {

inline constexpr char kCheckpointMagic[8] = {'L', 'R', 'E', 'I', 'D', 'C', 'K', 'P'};
inline constexpr std::uint64_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  std::optional<FrozenOldHead> old_head;
};

// Layout (little-endian):
//   magic[8] | u64 version | u64 task_index | u64 entry count
//   entries: str name | u64 rank | u64 dims[rank] | f64 payload
//   u64 FNV-1a of every preceding byte
inline std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params, const FrozenOldHead* old_head) {
  std::vector<std::pair<std::string, const Tensor*>> table;
  for (const auto& [name, p] : params.named()) table.emplace_back(name, &p->value);
  const Tensor mode = Tensor::scalar(static_cast<double>(params.consolidation));
  table.emplace_back("inference.consolidation", &mode);
  if (old_head) table.emplace_back("frozen_old_head.part_head", &old_head->part_head);

  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  io::put_u64(out, kCheckpointVersion);
  io::put_u64(out, static_cast<std::uint64_t>(params.task_index));
  io::put_u64(out, table.size());
  for (const auto& [name, t] : table) {
    io::put_str(out, name);
    io::put_u64(out, t->rank());
    for (auto d : t->shape()) io::put_u64(out, d);
    io::put_f64s(out, t->data());
  }
  io::put_u64(out, io::fnv1a(out));
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < sizeof kCheckpointMagic + 8) throw FormatError(source + ": truncated checkpoint");
  const auto body = bytes.first(bytes.size() - 8);
  io::Reader tail(bytes.last(8), source);
  if (tail.u64() != io::fnv1a(body)) throw FormatError(source + ": checkpoint checksum mismatch");

  io::Reader rd(body, source);
  const auto magic = rd.raw(sizeof kCheckpointMagic);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kCheckpointMagic),
                  [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); }))
    throw FormatError(source + ": not a checkpoint file");
  if (const auto v = rd.u64(); v != kCheckpointVersion)
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(v));
  const auto task = rd.u64();
  const auto count = rd.u64();
  std::map<std::string, Tensor> table;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = rd.str();
    const auto rank = rd.u64();
    if (rank == 0 || rank > 8) throw FormatError(source + ": bad rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = rd.u64();
    Tensor t;
    try {
      t = Tensor(shape);
    } catch (const DimensionError&) {
      throw FormatError(source + ": bad shape for '" + name + "'");
    }
    rd.f64s(t.data());
    if (!table.emplace(std::move(name), std::move(t)).second) throw FormatError(source + ": duplicate entry");
  }
  if (rd.remaining() != 0) throw FormatError(source + ": trailing bytes before checksum");

  auto take = [&](const std::string& name, const Shape& expect) {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError(source + ": missing tensor '" + name + "'");
    if (!expect.empty() && it->second.shape() != expect)
      throw FormatError(source + ": tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                        ", expected " + shape_str(expect));
    Tensor t = std::move(it->second);
    table.erase(it);
    return t;
  };

  Checkpoint ck;
  ModelParams& p = ck.params;
  p.task_index = static_cast<int>(task);
  if (p.task_index < 1) throw FormatError(source + ": task_index must be >= 1");
  p.conv1 = Param(take("encoder.conv1", {16, 3, 3, 3}));
  p.conv2 = Param(take("encoder.conv2", {32, 16, 3, 3}));
  p.conv3 = Param(take("encoder.conv3", {32, 32, 3, 3}));
  p.attn_new.w1 = Param(take("attn_new.w1", {kFeatureDim, kAttnHidden}));
  p.attn_new.w2 = Param(take("attn_new.w2", {kAttnHidden, kFeatureDim}));
  p.attn_old.w1 = Param(take("attn_old.w1", {kFeatureDim, kAttnHidden}));
  p.attn_old.w2 = Param(take("attn_old.w2", {kAttnHidden, kFeatureDim}));
  p.id_head = Param(take("id_head", {}));
  p.part_head = Param(take("part_head", {}));
  if (p.id_head.value.rank() != 2 || p.id_head.value.dim(0) != kFeatureDim)
    throw FormatError(source + ": id_head must be [32,Z]");
  if (p.part_head.value.rank() != 2 || p.part_head.value.dim(0) != kFeatureDim)
    throw FormatError(source + ": part_head must be [32,N]");
  const double mode = take("inference.consolidation", {1}).item();
  if (mode != 0.0 && mode != 1.0 && mode != 2.0) throw FormatError(source + ": bad consolidation code");
  p.consolidation = static_cast<Consolidation>(static_cast<int>(mode));
  if (table.contains("frozen_old_head.part_head"))
    ck.old_head = FrozenOldHead{take("frozen_old_head.part_head", p.part_head.value.shape())};
  if (!table.empty()) throw FormatError(source + ": unknown tensor '" + table.begin()->first + "'");
  return ck;
}

inline void checkpoint_save(const ModelParams& params, const FrozenOldHead* old_head,
                            const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(params, old_head));
}

inline Checkpoint checkpoint_load(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace lreid::model
