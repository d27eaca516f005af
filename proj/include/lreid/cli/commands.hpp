#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lreid/cli/config.hpp"
#include "lreid/data/dataset_io.hpp"
#include "lreid/eval/protocol.hpp"
#include "lreid/model/checkpoint.hpp"
#include "lreid/train/trainer.hpp"

namespace lreid::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 1, kConfig = 2, kNumeric = 3 };

namespace detail {

inline void require_fresh_dir(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_empty(dir))
    throw ConfigError(dir.string() + ": output directory already exists and is not empty");
}

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

inline std::string method_label(const std::string& mode, const train::Ablation& a) {
  if (mode == "proposed") return "Proposed";
  if (mode == "finetune") return "Fine-tuning";
  if (mode == "joint") return "Joint-train";
  std::string s = "Base";
  if (a.cmcl) s += "+CMCL";
  if (a.pcl) s += "+PCL";
  if (a.cac == model::Consolidation::multiply) s += "+CAC_M";
  if (a.cac == model::Consolidation::average) s += "+CAC_A";
  return s;
}

inline eval::MetricsTable read_metrics_csv(const fs::path& path) {
  if (!fs::exists(path)) throw ProtocolError(path.string() + ": metrics not found (run not evaluated)");
  std::istringstream in(io::read_text(path));
  std::string line;
  std::getline(in, line);
  if (line != "dataset,mAP,rank1") throw FormatError(path.string() + ": unexpected header");
  eval::MetricsTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw FormatError(path.string() + ": malformed row '" + line + "'");
    eval::MetricsRow r{line.substr(0, a), std::stod(line.substr(a + 1, b - a - 1)), std::stod(line.substr(b + 1))};
    if (r.dataset != "Average") t.rows.push_back(r);
  }
  return t;
}

inline std::vector<model::ModelParams> load_checkpoints(const fs::path& run) {
  std::vector<model::ModelParams> out;
  for (int t = 1;; ++t) {
    const auto p = run / "checkpoints" / ("task_" + std::to_string(t) + ".ckpt");
    if (!fs::exists(p)) break;
    out.push_back(model::checkpoint_load(p).params);
  }
  if (out.empty()) throw ProtocolError(run.string() + ": no checkpoints");
  return out;
}

inline json read_run_config(const fs::path& run) {
  const auto p = run / "run_config.json";
  if (!fs::exists(p)) throw ProtocolError(run.string() + ": not a run directory (run_config.json missing)");
  try {
    return json::parse(io::read_text(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline std::vector<data::TaskDataset> load_suite(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError(dir.string() + ": dataset directory not found");
  return data::load_benchmark(dir);
}

}  // namespace detail

inline int cmd_gen_data(const RunConfig& cfg, std::uint64_t seed, const fs::path& out, std::ostream& os) {
  detail::require_fresh_dir(out);
  const auto suite = data::gen_benchmark(cfg.benchmark, seed);
  data::save_benchmark(suite, out);
  for (std::size_t t = 0; t < suite.size(); ++t)
    os << "task_" << t + 1 << ": train " << suite[t].train.size() << ", query " << suite[t].query.size()
       << ", gallery " << suite[t].gallery.size() << "\n";
  os << "wrote " << suite.size() << " tasks to " << out.string() << " (hash " << io::hex64(io::hash_tree(out))
     << ")\n";
  return kOk;
}

/// Trains one seed into `out` and writes metrics.csv (stored-gallery protocol).
inline int cmd_train(RunConfig cfg, std::uint64_t seed, const fs::path& data_dir, const fs::path& out,
                     std::ostream& os) {
  cfg.validate();
  const auto suite = detail::load_suite(data_dir);
  detail::require_fresh_dir(out);
  fs::create_directories(out);
  cfg.train.seed = seed;
  const auto ab = cfg.effective_ablation();

  json meta = to_json(cfg);
  meta["seed"] = std::to_string(seed);
  meta["effective_ablation"] = ablation_json(ab);
  meta["dataset"] = {{"path", fs::absolute(data_dir).lexically_normal().string()},
                     {"tasks", std::to_string(suite.size())},
                     {"hash", io::hex64(io::hash_tree(data_dir))}};
  meta["evaluation"] = {{"similarity", "cosine"}, {"exclusion", "same identity and same camera"}};
  io::write_text(out / "run_config.json", meta.dump(1) + "\n");

  const auto res = cfg.mode == "joint" ? train::train_joint(suite, cfg.train, cfg.loss, out)
                                       : train::train_sequence(suite, cfg.train, cfg.loss, ab, out);
  const eval::FeatureStore store(out / "features");
  const auto table = eval::evaluate_per_dataset(res.models.back(), suite, store);
  io::write_text(out / "metrics.csv", table.to_csv());
  os << detail::method_label(cfg.mode, ab) << " seed " << seed << " -> " << out.string() << "\n" << table.to_csv();
  return kOk;
}

/// Per-dataset, unified, backfilled-control and compatibility tables under <run>/eval.
inline int cmd_evaluate(const fs::path& run, std::ostream& os) {
  const auto meta = detail::read_run_config(run);
  const auto suite = detail::load_suite(meta.at("dataset").at("path").get<std::string>());
  const auto models = detail::load_checkpoints(run);
  const eval::FeatureStore store(run / "features");
  std::vector<std::uint64_t> before;
  for (std::size_t t = 1; t <= suite.size(); ++t) {
    const eval::DatasetTag tag{static_cast<int>(t), "gallery"};
    if (!store.contains(tag)) throw ProtocolError(run.string() + ": missing feature set " + tag.str());
    before.push_back(store.file_hash(tag));
  }

  const auto& final_model = models.back();
  const auto per = eval::evaluate_per_dataset(final_model, suite, store);
  const auto unified = eval::evaluate_unified(final_model, suite, store);
  const auto backfilled = eval::evaluate_backfilled(final_model, suite);
  std::string uni_csv = "dataset,mAP,rank1\n";
  {
    char buf[128];
    std::snprintf(buf, sizeof buf, "unified,%.6f,%.6f\n", unified.mAP, unified.rank1);
    uni_csv += buf;
  }
  io::write_text(run / "eval" / "per_dataset.csv", per.to_csv());
  io::write_text(run / "eval" / "unified.csv", uni_csv);
  io::write_text(run / "eval" / "backfilled.csv", backfilled.to_csv());
  if (models.size() == suite.size()) {
    const auto mat = eval::compatibility_matrix(models, suite, store);
    std::string csv = "model";
    for (std::size_t j = 1; j <= suite.size(); ++j) csv += ",task_" + std::to_string(j);
    csv += "\n";
    for (std::size_t i = 0; i < mat.size(); ++i) {
      csv += "model_" + std::to_string(i + 1);
      for (double v : mat[i]) {
        char buf[32];
        std::snprintf(buf, sizeof buf, ",%.6f", v);
        csv += buf;
      }
      csv += "\n";
    }
    io::write_text(run / "eval" / "compatibility.csv", csv);
  }
  for (std::size_t t = 1; t <= suite.size(); ++t)
    if (store.file_hash({static_cast<int>(t), "gallery"}) != before[t - 1])
      throw IntegrityError("gallery set task_" + std::to_string(t) + " changed during evaluation");

  os << "per-dataset (stored galleries)\n" << per.to_csv() << "unified\n" << uni_csv
     << "backfilled control\n" << backfilled.to_csv();
  return kOk;
}

/// Markdown ablation and comparison grids; runs sharing a method label are averaged.
inline std::string render_report(const std::vector<fs::path>& runs) {
  if (runs.empty()) throw ConfigError("report: no run directories given");
  struct Group {
    std::string label;
    train::Ablation ablation;
    std::vector<eval::MetricsTable> tables;
  };
  std::vector<Group> groups;
  std::optional<json> bench;
  std::optional<std::string> data_hash;
  for (const auto& run : runs) {
    const auto meta = detail::read_run_config(run);
    if (!bench) {
      bench = meta.at("benchmark");
      data_hash = meta.at("dataset").at("hash").get<std::string>();
    } else if (*bench != meta.at("benchmark") || *data_hash != meta.at("dataset").at("hash").get<std::string>()) {
      throw ConfigError("report: " + run.string() + " was trained on a different benchmark");
    }
    const auto& ea = meta.at("effective_ablation");
    train::Ablation a{ea.at("cmcl").get<bool>(), ea.at("pcl").get<bool>(),
                      model::consolidation_from_string(ea.at("cac").get<std::string>()),
                      ea.at("cmcl_normalize").get<bool>()};
    const auto label = detail::method_label(meta.at("run").at("mode").get<std::string>(), a);
    const auto per = fs::exists(run / "eval" / "per_dataset.csv") ? run / "eval" / "per_dataset.csv"
                                                                   : run / "metrics.csv";
    auto table = detail::read_metrics_csv(per);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) { return g.label == label; });
    if (it == groups.end()) {
      groups.push_back({label, a, {}});
      it = groups.end() - 1;
    }
    if (!it->tables.empty() && it->tables.front().rows.size() != table.rows.size())
      throw ConfigError("report: " + run.string() + " has a different dataset count");
    it->tables.push_back(std::move(table));
  }

  const std::size_t datasets = groups.front().tables.front().rows.size();
  auto mean_table = [&](const Group& g) {
    eval::MetricsTable m = g.tables.front();
    for (std::size_t d = 0; d < datasets; ++d) {
      double map = 0.0, r1 = 0.0;
      for (const auto& t : g.tables) {
        map += t.rows[d].mAP;
        r1 += t.rows[d].rank1;
      }
      m.rows[d].mAP = map / static_cast<double>(g.tables.size());
      m.rows[d].rank1 = r1 / static_cast<double>(g.tables.size());
    }
    return m;
  };

  std::string md = "## Ablation grid\n\n| CMCL | PCL | CAC | runs |";
  std::string rule = "|:-:|:-:|:-:|--:|";
  for (std::size_t d = 0; d < datasets; ++d) {
    const auto& name = groups.front().tables.front().rows[d].dataset;
    md += " " + name + " mAP | " + name + " R-1 |";
    rule += "--:|--:|";
  }
  md += " Average mAP | Average R-1 |\n" + rule + "--:|--:|\n";
  for (const auto& g : groups) {
    const auto m = mean_table(g);
    md += std::string("| ") + (g.ablation.cmcl ? "✓" : " ") + " | " + (g.ablation.pcl ? "✓" : " ") + " | " +
          (g.ablation.cac == model::Consolidation::off ? " " : model::to_string(g.ablation.cac)) + " | " +
          std::to_string(g.tables.size()) + " |";
    for (const auto& r : m.rows) md += " " + detail::pct(r.mAP) + " | " + detail::pct(r.rank1) + " |";
    md += " " + detail::pct(m.average().mAP) + " | " + detail::pct(m.average().rank1) + " |\n";
  }

  md += "\n## Comparison grid (mAP / R-1)\n\n| Method |";
  rule = "|:--|";
  for (std::size_t d = 0; d < datasets; ++d) {
    md += " " + groups.front().tables.front().rows[d].dataset + " |";
    rule += "--:|";
  }
  md += " Average |\n" + rule + "--:|\n";
  for (const auto& g : groups) {
    const auto m = mean_table(g);
    md += "| " + g.label + " |";
    for (const auto& r : m.rows) md += " " + detail::pct(r.mAP) + " / " + detail::pct(r.rank1) + " |";
    md += " " + detail::pct(m.average().mAP) + " / " + detail::pct(m.average().rank1) + " |\n";
  }
  return md;
}

inline int cmd_report(const std::vector<fs::path>& runs, const std::optional<fs::path>& out, std::ostream& os) {
  const auto md = render_report(runs);
  if (out) io::write_text(*out, md);
  os << md;
  return kOk;
}

/// Full command-line entry point; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& os, std::ostream& es) {
  CLI::App app{"Lifelong backward-compatible re-identification pipeline"};
  app.require_subcommand(1);
  std::string config_path, mode, out, data;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-domain benchmark");
  gen->add_option("--config", config_path, "config file")->required();
  gen->add_option("--seed", seed, "generation seed (default: first of run.seeds)");
  gen->add_option("--out", out, "dataset directory (default: run.data)");

  auto* tr = app.add_subcommand("train", "train a task sequence");
  tr->add_option("--config", config_path, "config file")->required();
  tr->add_option("--mode", mode, "proposed | finetune | joint | ablation (default: run.mode)");
  tr->add_option("--seed", seed, "training seed (default: every seed of run.seeds)");
  tr->add_option("--out", out, "run directory (default: run.out)");
  tr->add_option("--data", data, "dataset directory (default: run.data)");

  auto* ev = app.add_subcommand("evaluate", "evaluate a trained run directory");
  ev->add_option("run", out, "run directory");
  ev->add_option("--out", out, "run directory");

  auto* rep = app.add_subcommand("report", "merge evaluated runs into markdown tables");
  rep->add_option("runs", runs, "run directories")->required();
  rep->add_option("--out", out, "markdown output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    os << o.str();
    es << er.str();
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = load_config(config_path);
      return cmd_gen_data(cfg, seed.value_or(cfg.seeds.front()), out.empty() ? cfg.data_dir : out, os);
    }
    if (tr->parsed()) {
      auto cfg = load_config(config_path);
      if (!mode.empty()) cfg.mode = mode;
      if (!out.empty()) cfg.out_dir = out;
      if (!data.empty()) cfg.data_dir = data;
      cfg.validate();
      if (seed) return cmd_train(cfg, *seed, cfg.data_dir, cfg.out_dir, os);
      if (cfg.seeds.size() == 1) return cmd_train(cfg, cfg.seeds.front(), cfg.data_dir, cfg.out_dir, os);
      for (auto s : cfg.seeds)
        cmd_train(cfg, s, cfg.data_dir, fs::path(cfg.out_dir) / ("seed_" + std::to_string(s)), os);
      return kOk;
    }
    if (ev->parsed()) {
      if (out.empty()) throw ConfigError("evaluate: run directory required");
      return cmd_evaluate(out, os);
    }
    if (rep->parsed()) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      return cmd_report(dirs, out.empty() ? std::nullopt : std::optional<fs::path>(out), os);
    }
  } catch (const NumericError& e) {
    es << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    es << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    es << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kUsage;
}

}  // namespace lreid::cli
