#pragma once

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lreid/data/synth.hpp"
#include "lreid/error.hpp"
#include "lreid/eval/featstore.hpp"
#include "lreid/losses.hpp"
#include "lreid/model/checkpoint.hpp"
#include "lreid/model/forward.hpp"
#include "lreid/train/optim.hpp"
#include "lreid/train/replay.hpp"
#include "lreid/train/sampling.hpp"

namespace lreid::train {

namespace fs = std::filesystem;
using model::Consolidation;

/// Which parts of the full objective and architecture are active.
struct Ablation {
  bool cmcl = true;
  bool pcl = true;
  Consolidation cac = Consolidation::multiply;
  bool cmcl_normalize = true;

  static Ablation proposed() { return {}; }
  static Ablation finetune() { return {false, false, Consolidation::off, true}; }

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct TrainConfig {
  std::size_t epochs_per_task = 20;
  std::size_t steps_per_epoch = 0;  // 0: |train| / (P*K)
  std::size_t p = 8;
  std::size_t k = 4;
  std::size_t replay_batch = 16;
  double lr = 0.05;
  double momentum = 0.9;
  ReplayPolicy replay;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs_per_task < 1) throw ConfigError("train.epochs_per_task must be >= 1");
    if (k < 2) throw ConfigError("train.K must be >= 2");
    if (p < 2) throw ConfigError("train.P must be >= 2");
    if (replay_batch < 1) throw ConfigError("train.replay_batch must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0,1)");
    if (replay.max_identities < 1 || replay.per_identity < 1) throw ConfigError("train.replay sizes must be >= 1");
  }

  std::size_t steps_for(std::size_t train_size) const {
    if (steps_per_epoch > 0) return steps_per_epoch;
    return std::max<std::size_t>(1, train_size / (p * k));
  }
};

struct StepLog {
  int task = 0;
  std::size_t step = 0;
  double total = 0, ce = 0, tri = 0;
  double cmcl = std::numeric_limits<double>::quiet_NaN();
  double pcl = std::numeric_limits<double>::quiet_NaN();
};

struct TaskReport {
  int task = 0;
  std::size_t identities = 0;
  std::size_t steps = 0;
  std::vector<StepLog> log;
  std::optional<std::uint64_t> old_head_hash_before, old_head_hash_after;
  // Largest |dL/d input| of the frozen head over the task; 0 when the old branch is unused.
  double old_branch_grad_max = 0.0;
};

struct TrainerState {
  model::ModelParams params;
  std::optional<model::FrozenOldHead> old_head;
  ReplayStore replay;
  int task = 0;
  Rng rng;

  explicit TrainerState(std::uint64_t seed) : rng(mix_seed(seed, 0x7a11)) {}
};

namespace detail {

inline std::string nan_text(double v) { return std::isnan(v) ? "" : std::to_string(v); }

}  // namespace detail

/// Trains the next task of the sequence in place.
inline TaskReport train_task(TrainerState& st, const data::TaskDataset& task, const TrainConfig& cfg,
                             const loss::LossWeights& w, const Ablation& ab) {
  cfg.validate();
  w.validate();
  const IdentityIndex index(task.train);
  const int t = st.task + 1;
  if (index.size() < 2) throw BatchCompositionError("task " + std::to_string(t) + ": fewer than 2 identities");

  if (t == 1) {
    st.params = model::init_model(index.size(), w.parts, ab.cac, st.rng);
  } else {
    for (std::size_t b = 1; b <= st.replay.task_count(); ++b)
      for (const auto& e : st.replay.task(static_cast<int>(b)))
        if (std::binary_search(index.identities.begin(), index.identities.end(), e.identity))
          throw ProtocolError("task " + std::to_string(t) + ": identity " + std::to_string(e.identity) +
                              " also present in replay memory");
    st.old_head = model::FrozenOldHead{st.params.part_head.value};
    // The old encoder is paired with the frozen old head; letting it drift makes
    // the consolidated mask differ between task models.
    st.params.attn_old = st.params.attn_new;
    st.params.attn_old.w1.requires_grad = false;
    st.params.attn_old.w2.requires_grad = false;
    st.params.id_head = model::init_id_head(index.size(), st.rng);
    st.params.consolidation = ab.cac;
  }
  st.params.task_index = t;
  st.task = t;

  TaskReport rep;
  rep.task = t;
  rep.identities = index.size();
  if (st.old_head) rep.old_head_hash_before = st.old_head->hash();

  const bool use_cmcl = ab.cmcl && t >= 2 && !st.replay.empty();
  std::optional<loss::ReplayBank> bank;
  if (use_cmcl) bank = st.replay.bank();
  MomentumSgd sgd(cfg.lr, cfg.momentum);
  const std::size_t steps = cfg.steps_for(task.train.size()) * cfg.epochs_per_task;

  for (std::size_t step = 0; step < steps; ++step) {
    try {
      st.params.zero_grad();
      const auto idx = sample_pk_batch(index, cfg.p, cfg.k, st.rng);
      std::vector<const Tensor*> images;
      std::vector<std::int64_t> ids;
      std::vector<std::size_t> labels;
      for (auto i : idx) {
        images.push_back(&task.train[i].image);
        ids.push_back(task.train[i].identity);
        labels.push_back(index.label_of(task.train[i].identity));
      }
      std::vector<const ReplayEntry*> replay;
      if (use_cmcl) replay = sample_replay_batch(st.replay, cfg.replay_batch, st.rng);

      ad::Graph g;
      const auto m = model::bind(g, st.params, st.old_head ? &*st.old_head : nullptr);
      const auto r = model::forward(m, g.constant(model::stack_images(images)), {.part_branches = ab.pcl});
      loss::LossTerms terms{loss::loss_ce(model::classify_identity(m.id_head, r.global.raw), labels),
                            loss::loss_triplet(r.global.raw, ids, w.margin), std::nullopt, std::nullopt};
      if (ab.pcl) {
        std::optional<ad::Var> old_logits;
        if (r.parts_old) old_logits = model::classify_parts(*m.old_part_head, *r.parts_old);
        terms.pcl = loss::loss_pcl(model::classify_parts(m.part_head, *r.parts_new), old_logits);
      }
      if (use_cmcl) {
        std::vector<const Tensor*> rimg;
        std::vector<std::int64_t> rids;
        for (const auto* e : replay) {
          rimg.push_back(&e->image);
          rids.push_back(e->identity);
        }
        const auto rr = model::forward(m, g.constant(model::stack_images(rimg)), {.part_branches = false});
        terms.cmcl = loss::loss_cmcl(rr.global.raw, rids, *bank, r.global.raw, w.tau, ab.cmcl_normalize);
      }
      const auto total = loss::loss_total(terms, w, t);
      g.backward(total);

      StepLog log{t, step, total.value().item(), terms.ce.value().item(), terms.tri.value().item()};
      if (terms.cmcl) log.cmcl = terms.cmcl->value().item();
      if (terms.pcl) log.pcl = terms.pcl->value().item();
      rep.log.push_back(log);
      if (r.parts_old && ab.pcl) {
        const Tensor old_grad = r.parts_old->grad();
        for (double v : old_grad.data()) rep.old_branch_grad_max = std::max(rep.old_branch_grad_max, std::abs(v));
      }

      sgd.step(st.params);
      for (const auto& [name, p] : st.params.named())
        if (!p->value.all_finite()) throw NumericError("parameter " + name + " became non-finite");
    } catch (const NumericError& e) {
      throw NumericError("task " + std::to_string(t) + " step " + std::to_string(step) + ": " + e.what());
    }
  }
  rep.steps = steps;
  if (st.old_head) rep.old_head_hash_after = st.old_head->hash();
  return rep;
}

struct SequenceResult {
  std::vector<model::ModelParams> models;  // models[t-1] is the model after task t
  std::vector<TaskReport> reports;
  ReplayStore replay;
  // Gallery set digests taken right after each set was written.
  std::vector<std::uint64_t> gallery_hashes;
};

inline void write_train_log(const std::vector<TaskReport>& reports, const fs::path& path) {
  std::string out = "task,step,total,ce,tri,cmcl,pcl\n";
  for (const auto& r : reports)
    for (const auto& s : r.log)
      out += std::to_string(s.task) + "," + std::to_string(s.step) + "," + std::to_string(s.total) + "," +
             std::to_string(s.ce) + "," + std::to_string(s.tri) + "," + detail::nan_text(s.cmcl) + "," +
             detail::nan_text(s.pcl) + "\n";
  io::write_text(path, out);
}

/// Per-task summary: frozen-head digests, old-branch gradient magnitude and the
/// gallery set digest taken when the set was written.
inline void write_task_reports(const SequenceResult& res, const fs::path& path) {
  auto hex = [](const std::optional<std::uint64_t>& h) { return h ? nlohmann::json(io::hex64(*h)) : nlohmann::json(); };
  nlohmann::json tasks = nlohmann::json::array();
  for (std::size_t i = 0; i < res.reports.size(); ++i) {
    const auto& r = res.reports[i];
    char grad[32];
    std::snprintf(grad, sizeof grad, "%.17g", r.old_branch_grad_max);
    tasks.push_back({{"task", r.task},
                     {"identities", r.identities},
                     {"steps", r.steps},
                     {"old_head_hash_before", hex(r.old_head_hash_before)},
                     {"old_head_hash_after", hex(r.old_head_hash_after)},
                     {"old_branch_grad_max", grad}});
  }
  nlohmann::json galleries = nlohmann::json::array();
  for (auto h : res.gallery_hashes) galleries.push_back(io::hex64(h));
  io::write_text(path, nlohmann::json{{"tasks", tasks}, {"gallery_hashes", galleries}}.dump(1) + "\n");
}

/// Sequential training over the suite. After task t: checkpoint, gallery
/// features of task t embedded once by the task-t model, and (except after the
/// last task) replay exemplars of task t.
///
/// Writes under `out`: checkpoints/task_<t>.ckpt, features/task_<t>.gallery.*,
/// replay/, train_log.csv, task_reports.json.
inline SequenceResult train_sequence(const std::vector<data::TaskDataset>& suite, const TrainConfig& cfg,
                                     const loss::LossWeights& w, const Ablation& ab, const fs::path& out) {
  if (suite.size() < 2) throw ConfigError("train_sequence: need at least 2 tasks");
  TrainerState st(cfg.seed);
  Rng replay_rng(mix_seed(cfg.seed, 0x4e91));
  const eval::FeatureStore store(out / "features");
  SequenceResult res;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const int t = static_cast<int>(i) + 1;
    res.reports.push_back(train_task(st, suite[i], cfg, w, ab));
    model::checkpoint_save(st.params, st.old_head ? &*st.old_head : nullptr,
                           out / "checkpoints" / ("task_" + std::to_string(t) + ".ckpt"));
    const eval::DatasetTag tag{t, "gallery"};
    store.append(eval::extract_features(st.params, suite[i].gallery, tag));
    res.gallery_hashes.push_back(store.file_hash(tag));
    if (i + 1 < suite.size()) update_replay_store(st.replay, st.params, suite[i].train, t, cfg.replay, replay_rng);
    res.models.push_back(st.params);
  }
  st.replay.save(out / "replay");
  write_train_log(res.reports, out / "train_log.csv");
  write_task_reports(res, out / "task_reports.json");
  res.replay = std::move(st.replay);
  return res;
}

/// Single merged task over every training split with L_base only. Every
/// gallery set is embedded by the one resulting model (extractor version 1).
inline SequenceResult train_joint(const std::vector<data::TaskDataset>& suite, const TrainConfig& cfg,
                                  const loss::LossWeights& w, const fs::path& out) {
  if (suite.empty()) throw ConfigError("train_joint: empty suite");
  data::TaskDataset merged;
  merged.domain = suite.front().domain;
  for (const auto& ds : suite) merged.train.insert(merged.train.end(), ds.train.begin(), ds.train.end());
  TrainerState st(cfg.seed);
  SequenceResult res;
  res.reports.push_back(train_task(st, merged, cfg, w, Ablation::finetune()));
  model::checkpoint_save(st.params, nullptr, out / "checkpoints" / "task_1.ckpt");
  const eval::FeatureStore store(out / "features");
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const eval::DatasetTag tag{static_cast<int>(i) + 1, "gallery"};
    store.append(eval::extract_features(st.params, suite[i].gallery, tag));
    res.gallery_hashes.push_back(store.file_hash(tag));
  }
  res.models.push_back(st.params);
  st.replay.save(out / "replay");
  write_train_log(res.reports, out / "train_log.csv");
  write_task_reports(res, out / "task_reports.json");
  return res;
}

}  // namespace lreid::train
