// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lreid/autodiff/grad_check.hpp"
#include "lreid/cli/commands.hpp"
#include "lreid/eval/protocol.hpp"
#include "lreid/losses.hpp"
#include "lreid/model/checkpoint.hpp"
#include "lreid/model/forward.hpp"
#include "oracles.hpp"
#include "toy.hpp"

namespace {

using namespace lreid;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using ad::Graph;
using ad::Var;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor unit_rows(Tensor t) {
  const std::size_t d = t.dim(1);
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += t[r * d + j] * t[r * d + j];
    for (std::size_t j = 0; j < d; ++j) t[r * d + j] /= std::sqrt(s);
  }
  return t;
}

std::vector<std::int64_t> pk_labels(std::size_t p, std::size_t k) {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < k; ++j) out.push_back(static_cast<std::int64_t>(10 * i + 3));
  return out;
}

// ---- 1 -------------------------------------------------------------------

Verdict gradient_fidelity() {
  const auto t0 = Clock::now();
  constexpr double h = 1e-5;
  std::map<std::string, double> err;
  Rng rng(101);

  const std::vector<std::size_t> y{0, 2, 1, 2, 0, 1};
  err["ce"] = ad::grad_check([&](Graph&, std::span<const Var> v) { return loss::loss_ce(v[0], y); },
                             {oracle::random_tensor({6, 3}, rng)}, h);

  // Continuous random features: distinct distances, no zero distances.
  const auto labels = pk_labels(3, 3);
  err["tri"] = ad::grad_check([&](Graph&, std::span<const Var> v) { return loss::loss_triplet(v[0], labels, 0.3); },
                              {oracle::random_tensor({9, 6}, rng, 0.3)}, h);

  const loss::ReplayBank bank{unit_rows(oracle::random_tensor({5, 6}, rng)), {1, 2, 1, 3, 2}};
  const std::vector<std::int64_t> ids{1, 2, 3};
  err["cmcl"] = ad::grad_check(
      [&](Graph&, std::span<const Var> v) { return loss::loss_cmcl(v[0], ids, bank, v[1], 0.5); },
      {oracle::random_tensor({3, 6}, rng), oracle::random_tensor({4, 6}, rng)}, h);

  err["pcl"] = ad::grad_check([&](Graph&, std::span<const Var> v) { return loss::loss_pcl(v[0], v[1]); },
                              {oracle::random_tensor({10, 5}, rng), oracle::random_tensor({10, 5}, rng)}, h);

  const auto problem = toy::make_problem(7);
  err["total(toy)"] = ad::grad_check(
      [&](Graph& g, std::span<const Var> v) { return toy::objective(g, v, problem, toy::Flags{}); }, problem.params,
      h);

  double worst = 0.0;
  std::string detail;
  for (const auto& [name, e] : err) {
    worst = std::max(worst, e);
    detail += name + " " + fmt("%.2e", e) + ", ";
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, detail + "time " + fmt("%.1f", secs) + " s"};
}

// ---- 2 -------------------------------------------------------------------

eval::FeatureSet random_set(std::size_t rows, std::size_t ids, int cams, Rng& rng) {
  eval::FeatureSet s;
  s.features = unit_rows(oracle::random_tensor({rows, 16}, rng));
  for (std::size_t r = 0; r < rows; ++r) {
    s.identities.push_back(static_cast<std::int64_t>(rng.below(ids)));
    s.cameras.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cams))));
  }
  return s;
}

Verdict metric_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t evaluated = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    Rng rng(5000 + i);
    const auto q = random_set(1 + rng.below(10), 6, 3, rng);
    const auto g = random_set(1 + rng.below(50), 6, 3, rng);
    const auto got = eval::evaluate_retrieval(q, g);
    const auto ref = oracle::retrieval(q.features, q.identities, q.cameras, g.features, g.identities, g.cameras);
    if (got.evaluated != ref.evaluated) return {false, "instance " + std::to_string(i) + ": evaluated count differs"};
    worst = std::max({worst, std::abs(got.mAP - ref.mAP), std::abs(got.rank1 - ref.rank1)});
    evaluated += got.evaluated;
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && secs < 10.0, "max |diff| " + fmt("%.1e", worst) + " over 200 instances (" +
                                             std::to_string(evaluated) + " scored queries), time " +
                                             fmt("%.2f", secs) + " s"};
}

// ---- 3 -------------------------------------------------------------------

Verdict mining_oracle() {
  std::size_t anchors = 0, tied = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    Rng rng(9000 + i);
    const auto labels = pk_labels(8, 4);
    Tensor f = oracle::random_tensor({32, 8}, rng);
    // Every other batch lives on a coarse grid so distance ties occur.
    if (i % 2 == 1)
      for (auto& v : f.data()) v = std::round(v);
    const auto got = loss::mine_hard_pairs(f, labels);
    const auto ref = oracle::mine(f, labels);
    for (std::size_t a = 0; a < labels.size(); ++a) {
      if (got[a].positive != ref[a].first || got[a].negative != ref[a].second)
        return {false, "batch " + std::to_string(i) + " anchor " + std::to_string(a) + " differs"};
      ++anchors;
    }
    tied += i % 2;
  }
  return {true, "100 PK batches (P=8, K=4), " + std::to_string(anchors) + " anchors, " + std::to_string(tied) +
                    " batches with grid ties"};
}

// ---- 4 -------------------------------------------------------------------

Verdict closed_form_losses() {
  Graph g;
  std::vector<std::size_t> y(12);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % 40;
  const double ce = loss::loss_ce(g.constant(Tensor({12, 40})), y).value().item();

  const double tri = loss::loss_triplet(g.constant(Tensor({8, 32}, 0.25)), pk_labels(2, 4), 0.3).value().item();

  Tensor anchor({1, 4});
  anchor[0] = 1.0;
  Tensor bank_rows({2, 4}), batch({1, 4});
  bank_rows[1] = 1.0;
  bank_rows[4 + 2] = 1.0;
  batch[3] = 1.0;
  const std::vector<std::int64_t> anchor_id{7};
  const double cmcl =
      loss::loss_cmcl(g.constant(anchor), anchor_id, {bank_rows, {7, 8}}, g.constant(batch), 0.5).value().item();

  const double pcl = loss::loss_pcl(g.constant(Tensor({20, 5})), g.constant(Tensor({20, 5}))).value().item();

  const double e_ce = std::abs(ce - std::log(40.0)), e_tri = std::abs(tri - 0.3), e_cmcl = std::abs(cmcl - std::log(3.0)),
               e_pcl = std::abs(pcl - std::log(5.0));
  return {e_ce <= 1e-9 && e_tri <= 1e-12 && e_cmcl <= 1e-9 && e_pcl <= 1e-9,
          "|ce-ln40| " + fmt("%.1e", e_ce) + ", |tri-0.3| " + fmt("%.1e", e_tri) + ", |cmcl-ln3| " +
              fmt("%.1e", e_cmcl) + ", |pcl-ln5| " + fmt("%.1e", e_pcl)};
}

// ---- runs ----------------------------------------------------------------

struct Mode {
  std::string name;
  std::string cli_mode;
  train::Ablation ablation;
};

const std::vector<Mode>& modes() {
  using model::Consolidation;
  static const std::vector<Mode> m = {
      {"finetune", "finetune", train::Ablation::finetune()},
      {"proposed", "proposed", train::Ablation::proposed()},
      {"base+pcl", "ablation", {false, true, Consolidation::off, true}},
      {"base+pcl+cac", "ablation", {false, true, Consolidation::multiply, true}},
      {"base+cmcl", "ablation", {true, false, Consolidation::off, true}},
  };
  return m;
}

struct RunRecord {
  fs::path dir;
  double avg_map = 0.0;
  double seconds = 0.0;
};

class Runs {
 public:
  Runs(fs::path work, std::size_t seeds) : work_(std::move(work)), seeds_(seeds) {}

  fs::path data_dir(std::uint64_t seed) {
    const auto dir = work_ / ("data_seed_" + std::to_string(seed));
    if (!fs::exists(dir)) {
      std::ostringstream sink;
      cli::cmd_gen_data(cli::RunConfig{}, seed, dir, sink);
    }
    return dir;
  }

  RunRecord train(const Mode& mode, std::uint64_t seed, const std::string& suffix = "") {
    cli::RunConfig cfg;
    cfg.mode = mode.cli_mode;
    cfg.ablation = mode.ablation;
    cfg.seeds = {seed};
    const auto out = work_ / ("run_" + mode.name + "_seed_" + std::to_string(seed) + suffix);
    std::ostringstream sink;
    const auto t0 = Clock::now();
    cli::cmd_train(cfg, seed, data_dir(seed), out, sink);
    RunRecord r{out, cli::detail::read_metrics_csv(out / "metrics.csv").average().mAP, seconds_since(t0)};
    std::cout << "  trained " << mode.name << " seed " << seed << suffix << ": average mAP " << fmt("%.4f", r.avg_map)
              << " (" << fmt("%.0f", r.seconds) << " s)\n"
              << std::flush;
    return r;
  }

  const RunRecord& get(const std::string& mode, std::uint64_t seed) {
    const auto key = mode + "/" + std::to_string(seed);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      const auto m = std::find_if(modes().begin(), modes().end(), [&](const Mode& x) { return x.name == mode; });
      it = cache_.emplace(key, train(*m, seed)).first;
    }
    return it->second;
  }

  std::size_t seeds() const { return seeds_; }

 private:
  fs::path work_;
  std::size_t seeds_;
  std::map<std::string, RunRecord> cache_;
};

nlohmann::json task_reports(const fs::path& run) {
  return nlohmann::json::parse(io::read_text(run / "task_reports.json"));
}

// ---- 5 -------------------------------------------------------------------

Verdict backfill_free(Runs& runs) {
  const auto& run = runs.get("proposed", 1);
  const auto recorded = task_reports(run.dir).at("gallery_hashes");
  std::ostringstream sink;
  cli::cmd_evaluate(run.dir, sink);
  const eval::FeatureStore store(run.dir / "features");
  std::size_t equal = 0;
  for (std::size_t t = 1; t <= recorded.size(); ++t)
    equal += io::hex64(store.file_hash({static_cast<int>(t), "gallery"})) == recorded[t - 1].get<std::string>();

  bool rejected = false;
  try {
    const auto ckpt = model::checkpoint_load(run.dir / "checkpoints" / "task_4.ckpt");
    const auto suite = data::load_benchmark(runs.data_dir(1));
    store.append(eval::extract_features(ckpt.params, suite[0].gallery, {1, "gallery"}));
  } catch (const ProtocolError&) {
    rejected = true;
  }
  return {recorded.size() == 4 && equal == 4 && rejected,
          std::to_string(equal) + "/" + std::to_string(recorded.size()) +
              " gallery hashes unchanged after final evaluation; duplicate append " +
              (rejected ? "rejected with protocol error" : "NOT rejected")};
}

// ---- 6 -------------------------------------------------------------------

Verdict desk_benefit(Runs& runs) {
  std::size_t wins = 0;
  double margin = 0.0, slowest = 0.0;
  std::string per_seed;
  for (std::uint64_t s = 1; s <= runs.seeds(); ++s) {
    const auto& p = runs.get("proposed", s);
    const auto& f = runs.get("finetune", s);
    wins += p.avg_map > f.avg_map;
    margin += p.avg_map - f.avg_map;
    slowest = std::max({slowest, p.seconds, f.seconds});
    per_seed += " " + fmt("%+.1f", 100.0 * (p.avg_map - f.avg_map));
  }
  margin /= static_cast<double>(runs.seeds());
  const std::size_t need = runs.seeds() - runs.seeds() / 5;
  return {wins >= need && slowest < 900.0,
          "proposed > finetune in " + std::to_string(wins) + "/" + std::to_string(runs.seeds()) +
              " seeds (per-seed mAP points:" + per_seed + "), mean margin " + fmt("%.1f", 100.0 * margin) +
              " points (target 5), slowest run " + fmt("%.0f", slowest) + " s"};
}

// ---- 7 -------------------------------------------------------------------

Verdict ablation_ordering(Runs& runs) {
  std::map<std::string, double> mean;
  for (const char* m : {"finetune", "base+pcl", "base+pcl+cac", "base+cmcl"}) {
    for (std::uint64_t s = 1; s <= runs.seeds(); ++s) mean[m] += runs.get(m, s).avg_map;
    mean[m] /= static_cast<double>(runs.seeds());
  }
  const double base = mean["finetune"], pcl = mean["base+pcl"], cac = mean["base+pcl+cac"], cmcl = mean["base+cmcl"];
  return {base <= pcl && pcl <= cac && base < cmcl,
          "mean mAP base " + fmt("%.4f", base) + " | +pcl " + fmt("%.4f", pcl) + " | +pcl+cac " + fmt("%.4f", cac) +
              " | +cmcl " + fmt("%.4f", cmcl) + "; base<=pcl " + (base <= pcl ? "yes" : "no") + ", pcl<=pcl+cac " +
              (pcl <= cac ? "yes" : "no") + ", base<cmcl " + (base < cmcl ? "yes" : "no")};
}

// ---- 8 -------------------------------------------------------------------

Verdict cac_invariants(Runs& runs) {
  const auto& run = runs.get("proposed", 1);
  const auto suite = data::load_benchmark(runs.data_dir(1));
  std::vector<model::ModelParams> models;
  for (int t = 1; t <= 4; ++t)
    models.push_back(model::checkpoint_load(run.dir / "checkpoints" / ("task_" + std::to_string(t) + ".ckpt")).params);
  Rng init(77);
  models.push_back(model::init_model(40, 5, model::Consolidation::multiply, init));
  models.back().task_index = 2;  // untrained weights, both masks present

  std::size_t values = 0;
  double lo = 1.0, hi = 0.0, excess = -1.0, avg_err = 0.0;
  for (const auto& params : models) {
    for (const auto& ds : suite) {
      std::vector<const Tensor*> images;
      for (std::size_t i = 0; i < ds.query.size(); ++i) images.push_back(&ds.query[i].image);
      Graph g;
      const auto m = model::bind_constant(g, params);
      const auto r = model::forward(m, g.constant(model::stack_images(images)), {.part_branches = false});
      for (const auto* mask : {&r.mask_new, r.mask_old ? &*r.mask_old : nullptr}) {
        if (!mask) continue;
        for (double v : mask->value().data()) lo = std::min(lo, v), hi = std::max(hi, v), ++values;
      }
      if (!r.mask_old) continue;
      const Tensor a = r.mask_old->value(), b = r.mask_new.value();
      const Tensor mul = model::consolidate_masks(*r.mask_old, r.mask_new, model::Consolidation::multiply).value();
      const Tensor avg = model::consolidate_masks(*r.mask_old, r.mask_new, model::Consolidation::average).value();
      for (std::size_t i = 0; i < a.size(); ++i) {
        excess = std::max(excess, mul[i] - std::min(a[i], b[i]));
        avg_err = std::max(avg_err, std::abs(avg[i] - 0.5 * (a[i] + b[i])));
      }
    }
  }
  const bool open_interval = lo > 0.0 && hi < 1.0;
  return {open_interval && excess <= 0.0 && avg_err <= 1e-12,
          std::to_string(values) + " mask entries in [" + fmt("%.3g", lo) + ", " + fmt("%.6g", hi) +
              "]; max(multiply - min) " + fmt("%.2e", excess) + "; max |average - mean| " + fmt("%.1e", avg_err)};
}

// ---- 9 -------------------------------------------------------------------

Verdict frozen_head(Runs& runs) {
  std::size_t checked = 0, equal = 0, flowing = 0;
  double smallest = INFINITY;
  for (const char* mode : {"proposed", "base+pcl"}) {
    const auto& run = runs.get(mode, 1);
    const auto reports = task_reports(run.dir);
    for (const auto& t : reports.at("tasks")) {
      if (t.at("task").get<int>() < 2) continue;
      ++checked;
      equal += !t.at("old_head_hash_before").is_null() && t.at("old_head_hash_before") == t.at("old_head_hash_after");
      const double grad = std::stod(t.at("old_branch_grad_max").get<std::string>());
      flowing += grad > 0.0;
      smallest = std::min(smallest, grad);
    }
    // The stored frozen head of task t is byte-identical to the part head of task t-1.
    for (int t = 2; t <= 4; ++t) {
      const auto prev = model::checkpoint_load(run.dir / "checkpoints" / ("task_" + std::to_string(t - 1) + ".ckpt"));
      const auto cur = model::checkpoint_load(run.dir / "checkpoints" / ("task_" + std::to_string(t) + ".ckpt"));
      if (!cur.old_head || cur.old_head->part_head != prev.params.part_head.value)
        return {false, std::string(mode) + ": frozen head of task " + std::to_string(t) + " differs from task " +
                           std::to_string(t - 1) + " part head"};
    }
  }
  return {checked == 6 && equal == checked && flowing == checked,
          std::to_string(equal) + "/" + std::to_string(checked) + " task transitions hash-identical; old-branch " +
              "input gradient nonzero in " + std::to_string(flowing) + "/" + std::to_string(checked) +
              " (smallest max |grad| " + fmt("%.2e", smallest) + ")"};
}

// ---- 10 ------------------------------------------------------------------

Verdict determinism(Runs& runs) {
  const auto& first = runs.get("proposed", 1);
  const auto second = runs.train(modes()[1], 1, "_rerun");
  const bool metrics = io::read_text(first.dir / "metrics.csv") == io::read_text(second.dir / "metrics.csv");
  const auto ck = fs::path("checkpoints") / "task_4.ckpt";
  const auto h1 = io::hash_file(first.dir / ck), h2 = io::hash_file(second.dir / ck);
  return {metrics && h1 == h2, std::string("metrics.csv ") + (metrics ? "byte-identical" : "DIFFERS") +
                                   "; final checkpoint " + io::hex64(h1) + (h1 == h2 ? " == " : " != ") +
                                   io::hex64(h2)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work";
  std::size_t seeds = 5;
  std::vector<std::size_t> only;
  app.add_option("--work", work, "scratch directory (recreated)");
  app.add_option("--only", only, "run only these criteria (1-10)")->check(CLI::Range(1, 10));
  app.add_option("--seeds", seeds, "seeds for the benchmark comparisons")->check(CLI::Range(1, 100));
  CLI11_PARSE(app, argc, argv);

  fs::remove_all(work);
  fs::create_directories(work);
  Runs runs(work, seeds);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"metric oracle", metric_oracle},
      {"hard-mining oracle", mining_oracle},
      {"closed-form loss values", closed_form_losses},
      {"backfill-free protocol", [&] { return backfill_free(runs); }},
      {"desk-scale benefit", [&] { return desk_benefit(runs); }},
      {"ablation ordering", [&] { return ablation_ordering(runs); }},
      {"CAC invariants", [&] { return cac_invariants(runs); }},
      {"frozen-head contract", [&] { return frozen_head(runs); }},
      {"determinism", [&] { return determinism(runs); }},
  };

  std::vector<std::string> lines;
  std::size_t passed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& [name, check] = criteria[i];
    if (!only.empty() && std::find(only.begin(), only.end(), i + 1) == only.end()) continue;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    passed += v.pass;
    lines.push_back(std::string(v.pass ? "PASS" : "FAIL") + "  " + std::to_string(i + 1) + ". " + name + ": " +
                    v.detail);
    std::cout << lines.back() << "\n" << std::flush;
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l << "\n";
  std::cout << passed << "/" << lines.size() << " criteria passed\n";
  return passed == lines.size() ? 0 : 1;
}
