#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lreid/error.hpp"
#include "lreid/io.hpp"
#include "lreid/rng.hpp"
#include "lreid/tensor.hpp"

namespace lreid::model {

inline constexpr std::size_t kFeatureDim = 32;
inline constexpr std::size_t kAttnHidden = 8;
inline constexpr std::size_t kDefaultParts = 5;
inline constexpr double kGemP = 3.0;
inline constexpr double kGemEps = 1e-6;

/// How the old- and new-task attention masks combine before global pooling.
enum class Consolidation { off, multiply, average };

inline std::string to_string(Consolidation c) {
  switch (c) {
    case Consolidation::off: return "off";
    case Consolidation::multiply: return "multiply";
    case Consolidation::average: return "average";
  }
  return "off";
}

inline Consolidation consolidation_from_string(const std::string& s) {
  if (s == "off") return Consolidation::off;
  if (s == "multiply") return Consolidation::multiply;
  if (s == "average") return Consolidation::average;
  throw ConfigError("unknown consolidation mode '" + s + "' (expected off|multiply|average)");
}

/// Squeeze-excitation style channel attention: sigmoid(relu(gap · w1) · w2).
struct AttentionParams {
  Param w1;  // [32, 8]
  Param w2;  // [8, 32]
};

struct ModelParams {
  Param conv1;  // [16, 3, 3, 3]  stride 1
  Param conv2;  // [32, 16, 3, 3] stride 2
  Param conv3;  // [32, 32, 3, 3] stride 1
  AttentionParams attn_new;
  AttentionParams attn_old;
  Param id_head;    // [32, Z_t]
  Param part_head;  // [32, N]
  int task_index = 1;
  Consolidation consolidation = Consolidation::multiply;

  std::size_t identity_count() const { return id_head.value.dim(1); }
  std::size_t part_count() const { return part_head.value.dim(1); }

  std::vector<std::pair<std::string, Param*>> named() {
    return {{"encoder.conv1", &conv1},     {"encoder.conv2", &conv2},     {"encoder.conv3", &conv3},
            {"attn_new.w1", &attn_new.w1}, {"attn_new.w2", &attn_new.w2}, {"attn_old.w1", &attn_old.w1},
            {"attn_old.w2", &attn_old.w2}, {"id_head", &id_head},         {"part_head", &part_head}};
  }
  std::vector<std::pair<std::string, const Param*>> named() const {
    auto v = const_cast<ModelParams*>(this)->named();
    return {v.begin(), v.end()};
  }

  void zero_grad() {
    for (auto& [name, p] : named()) p->zero_grad();
  }
};

/// Part classifier of the previous task. Never updated.
struct FrozenOldHead {
  Tensor part_head;  // [32, N]

  std::uint64_t hash() const {
    return io::fnv1a({reinterpret_cast<const std::uint8_t*>(part_head.ptr()), part_head.size() * sizeof(double)});
  }
  friend bool operator==(const FrozenOldHead&, const FrozenOldHead&) = default;
};

namespace detail {

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

inline Tensor he_conv(std::size_t out, std::size_t in, Rng& rng) {
  return normal_tensor({out, in, 3, 3}, std::sqrt(2.0 / static_cast<double>(in * 9)), rng);
}

}  // namespace detail

inline AttentionParams init_attention(Rng& rng) {
  return {Param(detail::normal_tensor({kFeatureDim, kAttnHidden}, std::sqrt(2.0 / kFeatureDim), rng)),
          Param(detail::normal_tensor({kAttnHidden, kFeatureDim}, 0.1, rng))};
}

inline Param init_id_head(std::size_t identities, Rng& rng) {
  return Param(detail::normal_tensor({kFeatureDim, identities}, 0.1, rng));
}

/// Fresh task-1 model with `identities` output classes and `parts` part classes.
inline ModelParams init_model(std::size_t identities, std::size_t parts, Consolidation consolidation, Rng& rng) {
  ModelParams m;
  m.conv1 = Param(detail::he_conv(16, 3, rng));
  m.conv2 = Param(detail::he_conv(32, 16, rng));
  m.conv3 = Param(detail::he_conv(32, 32, rng));
  m.attn_new = init_attention(rng);
  m.attn_old = init_attention(rng);
  m.id_head = init_id_head(identities, rng);
  m.part_head = Param(detail::normal_tensor({kFeatureDim, parts}, 0.1, rng));
  m.task_index = 1;
  m.consolidation = consolidation;
  return m;
}

}  // namespace lreid::model
