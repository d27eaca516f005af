#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "lreid/error.hpp"
#include "lreid/rng.hpp"
#include "lreid/tensor.hpp"

namespace lreid::data {

inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kHeight = 40;
inline constexpr std::size_t kWidth = 16;
inline constexpr std::size_t kImageSize = kChannels * kHeight * kWidth;
inline constexpr std::size_t kLatentDim = 16;
inline constexpr std::size_t kBands = 5;

struct Identity {
  std::int64_t id = 0;
  std::array<double, kLatentDim> latent{};
  int domain = 1;
};

/// Per-domain appearance shift. Cameras carry their own gain/bias pair.
struct DomainSpec {
  int index = 1;
  std::array<double, 9> color_matrix{};  // row-major 3x3
  std::array<double, 3> color_offset{};
  double texture_frequency = 1.0;
  double noise_sigma = 0.0;
  int camera_count = 2;
  std::vector<double> camera_gain;
  std::vector<double> camera_bias;

  double determinant() const {
    const auto& m = color_matrix;
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct Sample {
  Tensor image;  // [3,40,16], values in [0,1]
  std::int64_t identity = 0;
  int camera = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct TaskDataset {
  DomainSpec domain;
  std::vector<Sample> train;
  std::vector<Sample> query;
  std::vector<Sample> gallery;

  friend bool operator==(const TaskDataset&, const TaskDataset&) = default;
};

struct BenchmarkConfig {
  int tasks = 4;
  int ids_train = 40;
  int ids_eval = 10;
  int images_per_id = 16;
  int camera_count = 4;
  double noise_sigma = 0.03;
  // Lower bound on the pairwise difference of domain mean intensities.
  double offset_gap = 0.05;

  void validate() const {
    if (tasks < 2) throw ConfigError("benchmark.tasks must be >= 2");
    if (ids_train < 1) throw ConfigError("benchmark.ids_train must be >= 1");
    if (ids_eval < 5) throw ConfigError("benchmark.ids_eval must be >= 5");
    if (images_per_id < 4) throw ConfigError("benchmark.images_per_id must be >= 4");
    if (camera_count < 2) throw ConfigError("benchmark.camera_count must be >= 2");
    if (!(noise_sigma >= 0.0)) throw ConfigError("benchmark.noise_sigma must be >= 0");
    if (!(offset_gap >= 0.0)) throw ConfigError("benchmark.offset_gap must be >= 0");
  }
};

namespace detail {

// Fixed body model shared by every domain: how a latent vector maps to band
// colors and textures. It is independent of the benchmark seed so that
// render_image is a pure function of its arguments.
struct BodyModel {
  std::array<std::array<std::array<double, kLatentDim>, kChannels>, kBands> color_proj{};
  std::array<std::array<double, kLatentDim>, kBands> phase_proj{};
  std::array<std::array<double, kLatentDim>, kBands> amp_proj{};
  std::array<std::array<double, kChannels>, kBands> tint{};

  BodyModel() {
    Rng rng(0x5eed'b0d7ULL);
    const double s = 1.0 / std::sqrt(static_cast<double>(kLatentDim));
    for (auto& band : color_proj)
      for (auto& ch : band)
        for (auto& v : ch) v = rng.normal() * s;
    for (auto& band : phase_proj)
      for (auto& v : band) v = rng.normal() * s;
    for (auto& band : amp_proj)
      for (auto& v : band) v = rng.normal() * s;
    // Fixed per-band tint, zero mean over channels, so parts are told apart by
    // structure rather than by a global brightness change.
    for (std::size_t b = 0; b < kBands; ++b) {
      const double a = 0.08 * std::cos(2.0 * std::numbers::pi * b / kBands);
      const double c = 0.08 * std::sin(2.0 * std::numbers::pi * b / kBands);
      tint[b] = {a, c, -a - c};
    }
  }
};

inline const BodyModel& body_model() {
  static const BodyModel model;
  return model;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double dot(const std::array<double, kLatentDim>& a, const std::array<double, kLatentDim>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < kLatentDim; ++i) s += a[i] * b[i];
  return s;
}

inline DomainSpec make_domain(int index, const BenchmarkConfig& cfg, Rng& rng) {
  DomainSpec d;
  d.index = index;
  do {
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c)
        d.color_matrix[r * 3 + c] = r == c ? rng.uniform(0.7, 1.1) : rng.uniform(-0.25, 0.25);
  } while (std::abs(d.determinant()) <= 0.1);
  const double center = 0.5 * (cfg.tasks - 1);
  const double shift = 2.0 * cfg.offset_gap * ((index - 1) - center);
  const double ta = rng.uniform(-0.04, 0.04), tb = rng.uniform(-0.04, 0.04);
  d.color_offset = {shift + ta, shift + tb, shift - ta - tb};
  d.texture_frequency = 1.0 + 0.5 * (index - 1);
  d.noise_sigma = cfg.noise_sigma;
  d.camera_count = cfg.camera_count;
  for (int c = 0; c < cfg.camera_count; ++c) {
    d.camera_gain.push_back(rng.uniform(0.85, 1.15));
    d.camera_bias.push_back(-0.05 + 0.1 * c / (cfg.camera_count - 1) + rng.uniform(-0.01, 0.01));
  }
  return d;
}

}  // namespace detail

/// Renders one 3x40x16 image of `identity` as seen by `camera` in `domain`.
///
/// Five horizontal bands of 8 rows each; band colors and stripe textures are
/// functions of the identity latent. The domain color transform, the camera
/// gain/bias and pixel noise are applied in that order, then values are
/// clipped to [0,1].
inline Tensor render_image(const Identity& identity, const DomainSpec& domain, int camera,
                           std::uint64_t instance_seed) {
  if (camera < 0 || camera >= domain.camera_count)
    throw ConfigError("render_image: camera " + std::to_string(camera) + " outside domain camera range");
  const auto& body = detail::body_model();
  Rng rng(instance_seed);
  const double pose = rng.normal() * 0.3;
  const double jitter = rng.normal() * 0.03;

  std::array<std::array<double, kChannels>, kBands> color{};
  std::array<double, kBands> amp{}, phase{};
  for (std::size_t b = 0; b < kBands; ++b) {
    for (std::size_t c = 0; c < kChannels; ++c)
      color[b][c] = detail::logistic(1.5 * detail::dot(body.color_proj[b][c], identity.latent)) * 0.6 + 0.2 +
                    body.tint[b][c];
    amp[b] = 0.05 + 0.1 * detail::logistic(detail::dot(body.amp_proj[b], identity.latent));
    phase[b] = std::numbers::pi * std::tanh(detail::dot(body.phase_proj[b], identity.latent)) + pose;
  }

  const auto& m = domain.color_matrix;
  const double gain = domain.camera_gain.at(camera), bias = domain.camera_bias.at(camera);
  Tensor img({kChannels, kHeight, kWidth});
  const std::size_t band_rows = kHeight / kBands;
  for (std::size_t y = 0; y < kHeight; ++y) {
    const std::size_t b = y / band_rows;
    const double freq = domain.texture_frequency * (1.0 + 0.5 * static_cast<double>(b));
    for (std::size_t x = 0; x < kWidth; ++x) {
      const double tex =
          amp[b] * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(x) / kWidth + phase[b]);
      std::array<double, kChannels> v{};
      for (std::size_t c = 0; c < kChannels; ++c) v[c] = color[b][c] + tex + jitter - 0.5;
      for (std::size_t c = 0; c < kChannels; ++c) {
        double out = m[c * 3] * v[0] + m[c * 3 + 1] * v[1] + m[c * 3 + 2] * v[2] + 0.5 + domain.color_offset[c];
        out = gain * (out - 0.5) + 0.5 + bias;
        img[(c * kHeight + y) * kWidth + x] = out;
      }
    }
  }
  if (domain.noise_sigma > 0.0)
    for (auto& v : img.data()) v += domain.noise_sigma * rng.normal();
  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

/// Generates `cfg.tasks` domain-shifted datasets with globally disjoint
/// identities. Train identities are disjoint from the evaluation identities
/// within each task; evaluation identities are split into query and gallery.
inline std::vector<TaskDataset> gen_benchmark(const BenchmarkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<TaskDataset> suite;
  const std::int64_t ids_per_domain = cfg.ids_train + cfg.ids_eval;
  for (int t = 1; t <= cfg.tasks; ++t) {
    Rng domain_rng(mix_seed(seed, 0x100 + t));
    TaskDataset task;
    task.domain = detail::make_domain(t, cfg, domain_rng);
    Rng id_rng(mix_seed(seed, 0x200 + t));
    for (std::int64_t k = 0; k < ids_per_domain; ++k) {
      Identity ident;
      ident.id = (t - 1) * ids_per_domain + k;
      ident.domain = t;
      for (auto& v : ident.latent) v = id_rng.normal();
      const bool is_train = k < cfg.ids_train;
      for (int j = 0; j < cfg.images_per_id; ++j) {
        const int camera = j % cfg.camera_count;
        const auto instance = mix_seed(mix_seed(seed, static_cast<std::uint64_t>(ident.id)), j);
        Sample s{render_image(ident, task.domain, camera, instance), ident.id, camera};
        if (is_train)
          task.train.push_back(std::move(s));
        else if (j < 2)
          task.query.push_back(std::move(s));  // cameras 0 and 1
        else
          task.gallery.push_back(std::move(s));
      }
    }
    suite.push_back(std::move(task));
  }
  return suite;
}

}  // namespace lreid::data
