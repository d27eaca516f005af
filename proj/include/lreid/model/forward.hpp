#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "lreid/autodiff/ops.hpp"
#include "lreid/data/synth.hpp"
#include "lreid/model/params.hpp"

namespace lreid::model {

using ad::Graph;
using ad::Var;

/// Parameters of one model bound as leaves of a graph.
struct BoundModel {
  Var conv1, conv2, conv3;
  Var attn_new_w1, attn_new_w2, attn_old_w1, attn_old_w2;
  Var id_head, part_head;
  std::optional<Var> old_part_head;  // frozen, constant leaf
  int task_index = 1;
  Consolidation consolidation = Consolidation::multiply;
};

/// Binds trainable params (gradients flow into them) and, when given, the frozen old head.
inline BoundModel bind(Graph& g, ModelParams& p, const FrozenOldHead* old_head = nullptr) {
  BoundModel b{g.param(p.conv1),       g.param(p.conv2),       g.param(p.conv3),   g.param(p.attn_new.w1),
               g.param(p.attn_new.w2), g.param(p.attn_old.w1), g.param(p.attn_old.w2), g.param(p.id_head),
               g.param(p.part_head),   std::nullopt,           p.task_index,       p.consolidation};
  if (old_head) b.old_part_head = g.constant(old_head->part_head);
  return b;
}

/// Binds every value as a constant; for gradient-free inference.
inline BoundModel bind_constant(Graph& g, const ModelParams& p) {
  return {g.constant(p.conv1.value),       g.constant(p.conv2.value),       g.constant(p.conv3.value),
          g.constant(p.attn_new.w1.value), g.constant(p.attn_new.w2.value), g.constant(p.attn_old.w1.value),
          g.constant(p.attn_old.w2.value), g.constant(p.id_head.value),     g.constant(p.part_head.value),
          std::nullopt,                    p.task_index,                    p.consolidation};
}

/// images [B,3,40,16] -> feature map [B,32,20,8]
inline Var encoder_forward(const BoundModel& m, const Var& images) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != data::kChannels || s[2] != data::kHeight || s[3] != data::kWidth)
    throw DimensionError("encoder_forward: expected [B,3,40,16], got " + shape_str(s));
  Var x = ad::relu(ad::conv2d(images, m.conv1, 1, 1));
  x = ad::relu(ad::conv2d(x, m.conv2, 2, 1));
  return ad::relu(ad::conv2d(x, m.conv3, 1, 1));
}

/// Per-sample channel mask [B,32] with entries in (0,1).
inline Var attention_mask(const Var& w1, const Var& w2, const Var& map) {
  if (map.shape().size() != 4 || map.shape()[1] != kFeatureDim)
    throw DimensionError("attention_mask: map must have 32 channels, got " + shape_str(map.shape()));
  Var pooled = ad::spatial_mean(map);
  return ad::sigmoid(ad::matmul(ad::relu(ad::matmul(pooled, w1)), w2));
}

/// multiply: elementwise product; average: elementwise mean.
inline Var consolidate_masks(const Var& m_old, const Var& m_new, Consolidation mode) {
  if (m_old.shape() != m_new.shape())
    throw DimensionError("consolidate_masks: mask shapes differ " + shape_str(m_old.shape()) + " vs " +
                         shape_str(m_new.shape()));
  switch (mode) {
    case Consolidation::multiply: return ad::mul(m_old, m_new);
    case Consolidation::average: return ad::scale(ad::add(m_old, m_new), 0.5);
    case Consolidation::off: break;
  }
  throw ConfigError("consolidate_masks: mode must be multiply or average");
}

struct GlobalFeature {
  Var raw;         // [B,32] GeM output
  Var normalized;  // [B,32] unit rows
};

/// GeM (p=3) of the masked map; a missing mask means all ones.
inline GlobalFeature global_feature(const Var& map, const std::optional<Var>& mask) {
  Var src = mask ? ad::channel_mask(map, *mask) : map;
  Var raw = ad::gem_pool(src, kGemP, kGemEps);
  return {raw, ad::l2_normalize(raw)};
}

/// N horizontal slabs of the masked map, each GeM-pooled: [B,N,32]; part 0 is the top slab.
inline Var part_features(const Var& map, const Var& mask, std::size_t parts) {
  return ad::gem_pool_parts(ad::channel_mask(map, mask), parts, kGemP, kGemEps);
}

/// raw [B,32] x id_head [32,Z] -> logits [B,Z]
inline Var classify_identity(const Var& id_head, const Var& raw) { return ad::matmul(raw, id_head); }

/// parts [B,N,32] x head [32,N] -> logits [B*N, N]; row b*N+n has target n.
inline Var classify_parts(const Var& part_head, const Var& parts) {
  const auto& s = parts.shape();
  if (s.size() != 3 || s[2] != part_head.shape()[0] || part_head.shape()[1] != s[1])
    throw DimensionError("classify_parts: parts " + shape_str(s) + " incompatible with head " +
                         shape_str(part_head.shape()));
  return ad::matmul(ad::reshape(parts, {s[0] * s[1], s[2]}), part_head);
}

struct ForwardOptions {
  bool part_branches = true;
};

struct ForwardResult {
  Var map;
  Var mask_new;
  std::optional<Var> mask_old;     // task >= 2 only
  std::optional<Var> mask_global;  // absent when consolidation is off
  GlobalFeature global;
  std::optional<Var> parts_new;  // [B,N,32]
  std::optional<Var> parts_old;  // [B,N,32], task >= 2 with a frozen head
};

/// Full training-time wiring:
///   old branch    map * m_old -> part pooling -> frozen old head
///   new branch    map * m_new -> part pooling -> part head
///   global branch map * m_cac -> GeM
inline ForwardResult forward(const BoundModel& m, const Var& images, const ForwardOptions& opt = {}) {
  ForwardResult r;
  r.map = encoder_forward(m, images);
  r.mask_new = attention_mask(m.attn_new_w1, m.attn_new_w2, r.map);
  if (m.task_index >= 2) r.mask_old = attention_mask(m.attn_old_w1, m.attn_old_w2, r.map);
  if (m.consolidation != Consolidation::off)
    r.mask_global = r.mask_old ? consolidate_masks(*r.mask_old, r.mask_new, m.consolidation) : r.mask_new;
  r.global = global_feature(r.map, r.mask_global);
  if (opt.part_branches) {
    const std::size_t parts = m.part_head.shape()[1];
    r.parts_new = part_features(r.map, r.mask_new, parts);
    if (r.mask_old && m.old_part_head) r.parts_old = part_features(r.map, *r.mask_old, parts);
  }
  return r;
}

/// Stacks sample images into a [B,3,40,16] tensor.
inline Tensor stack_images(const std::vector<const Tensor*>& images) {
  Tensor out({images.size(), data::kChannels, data::kHeight, data::kWidth});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->size() != data::kImageSize)
      throw DimensionError("stack_images: image " + std::to_string(i) + " has shape " +
                           shape_str(images[i]->shape()));
    std::copy(images[i]->data().begin(), images[i]->data().end(), out.ptr() + i * data::kImageSize);
  }
  return out;
}

/// Inference path: encoder -> masks -> consolidation -> normalized global feature.
/// Returns [B,32]. Pure; no parameter is touched.
inline Tensor embed(const ModelParams& params, const std::vector<const Tensor*>& images, std::size_t chunk = 64) {
  if (images.empty()) throw DimensionError("embed: no images");
  Tensor out({images.size(), kFeatureDim});
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t end = std::min(images.size(), begin + chunk);
    Graph g;
    auto m = bind_constant(g, params);
    std::vector<const Tensor*> slice(images.begin() + begin, images.begin() + end);
    auto r = forward(m, g.constant(stack_images(slice)), {.part_branches = false});
    const auto& v = r.global.normalized.value();
    std::copy(v.data().begin(), v.data().end(), out.ptr() + begin * kFeatureDim);
  }
  return out;
}

inline Tensor embed(const ModelParams& params, const std::vector<data::Sample>& samples, std::size_t chunk = 64) {
  std::vector<const Tensor*> imgs;
  imgs.reserve(samples.size());
  for (const auto& s : samples) imgs.push_back(&s.image);
  return embed(params, imgs, chunk);
}

}  // namespace lreid::model
