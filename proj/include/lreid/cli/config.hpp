#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lreid/data/synth.hpp"
#include "lreid/error.hpp"
#include "lreid/io.hpp"
#include "lreid/losses.hpp"
#include "lreid/train/trainer.hpp"

namespace lreid::cli {

/// Everything one invocation needs. Parsed from a sectioned `key = value` file.
struct RunConfig {
  data::BenchmarkConfig benchmark;
  train::TrainConfig train;
  loss::LossWeights loss;
  train::Ablation ablation;
  std::vector<std::uint64_t> seeds{1};
  std::string data_dir = "data";
  std::string out_dir = "runs/default";
  std::string mode = "proposed";

  void validate() const {
    benchmark.validate();
    train.validate();
    loss.validate();
    if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
    if (mode != "proposed" && mode != "finetune" && mode != "joint" && mode != "ablation")
      throw ConfigError("run.mode must be proposed|finetune|joint|ablation, got '" + mode + "'");
  }

  /// Flags actually used for training under `mode`.
  train::Ablation effective_ablation() const {
    if (mode == "proposed") return train::Ablation::proposed();
    if (mode == "finetune" || mode == "joint") return train::Ablation::finetune();
    return ablation;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': '" + v + "' is not a valid number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <typename T, typename Get>
Setter number(Get get) {
  return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<T>(k, v); };
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"benchmark.tasks", number<int>([](RunConfig& c) -> int& { return c.benchmark.tasks; })},
      {"benchmark.ids_train", number<int>([](RunConfig& c) -> int& { return c.benchmark.ids_train; })},
      {"benchmark.ids_eval", number<int>([](RunConfig& c) -> int& { return c.benchmark.ids_eval; })},
      {"benchmark.images_per_id", number<int>([](RunConfig& c) -> int& { return c.benchmark.images_per_id; })},
      {"benchmark.cameras", number<int>([](RunConfig& c) -> int& { return c.benchmark.camera_count; })},
      {"benchmark.noise_sigma", number<double>([](RunConfig& c) -> double& { return c.benchmark.noise_sigma; })},
      {"benchmark.offset_gap", number<double>([](RunConfig& c) -> double& { return c.benchmark.offset_gap; })},
      {"train.epochs_per_task",
       number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.epochs_per_task; })},
      {"train.steps_per_epoch",
       number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.steps_per_epoch; })},
      {"train.P", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.p; })},
      {"train.K", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.k; })},
      {"train.replay_batch", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.replay_batch; })},
      {"train.lr", number<double>([](RunConfig& c) -> double& { return c.train.lr; })},
      {"train.momentum", number<double>([](RunConfig& c) -> double& { return c.train.momentum; })},
      {"train.replay_identities",
       number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.replay.max_identities; })},
      {"train.replay_per_identity",
       number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.replay.per_identity; })},
      {"loss.lambda_ce", number<double>([](RunConfig& c) -> double& { return c.loss.lambda_ce; })},
      {"loss.lambda_tri", number<double>([](RunConfig& c) -> double& { return c.loss.lambda_tri; })},
      {"loss.lambda_cmcl", number<double>([](RunConfig& c) -> double& { return c.loss.lambda_cmcl; })},
      {"loss.lambda_pcl", number<double>([](RunConfig& c) -> double& { return c.loss.lambda_pcl; })},
      {"loss.margin", number<double>([](RunConfig& c) -> double& { return c.loss.margin; })},
      {"loss.tau", number<double>([](RunConfig& c) -> double& { return c.loss.tau; })},
      {"loss.parts", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.loss.parts; })},
      {"ablation.cmcl", [](RunConfig& c, const std::string& k, const std::string& v) { c.ablation.cmcl = parse_bool(k, v); }},
      {"ablation.pcl", [](RunConfig& c, const std::string& k, const std::string& v) { c.ablation.pcl = parse_bool(k, v); }},
      {"ablation.cac",
       [](RunConfig& c, const std::string&, const std::string& v) { c.ablation.cac = model::consolidation_from_string(v); }},
      {"ablation.cmcl_normalize",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.ablation.cmcl_normalize = parse_bool(k, v); }},
      {"run.seeds",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.seeds.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) c.seeds.push_back(parse_number<std::uint64_t>(k, trim(item)));
       }},
      {"run.data", [](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; }},
      {"run.out", [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
      {"run.mode", [](RunConfig& c, const std::string&, const std::string& v) { c.mode = v; }},
  };
  return table;
}

}  // namespace detail

/// Parses `[section]` headers and `key = value` lines; `#` and `;` start comments.
/// Unknown sections or keys are errors. Keys not given keep their defaults.
inline RunConfig parse_config(const std::string& text, const std::string& source = "config") {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto cut = line.find_first_of("#;");
    line = detail::trim(cut == std::string::npos ? line : line.substr(0, cut));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    if (section.empty()) throw ConfigError(where + ": key outside of a section");
    const std::string key = section + "." + detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = detail::setters().find(key);
    if (it == detail::setters().end()) throw ConfigError(where + ": unknown key '" + key + "'");
    try {
      it->second(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError(path.string() + ": config file not found");
  return parse_config(io::read_text(path), path.string());
}

inline nlohmann::json ablation_json(const train::Ablation& a) {
  return {{"cmcl", a.cmcl}, {"pcl", a.pcl}, {"cac", model::to_string(a.cac)}, {"cmcl_normalize", a.cmcl_normalize}};
}

inline nlohmann::json benchmark_json(const data::BenchmarkConfig& b) {
  return {{"tasks", b.tasks},
          {"ids_train", b.ids_train},
          {"ids_eval", b.ids_eval},
          {"images_per_id", b.images_per_id},
          {"cameras", b.camera_count},
          {"noise_sigma", b.noise_sigma},
          {"offset_gap", b.offset_gap}};
}

/// Echo of the configuration as it was applied to one run.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json seeds = nlohmann::json::array();
  for (auto s : c.seeds) seeds.push_back(std::to_string(s));
  return {{"benchmark", benchmark_json(c.benchmark)},
          {"train",
           {{"epochs_per_task", c.train.epochs_per_task},
            {"steps_per_epoch", c.train.steps_per_epoch},
            {"P", c.train.p},
            {"K", c.train.k},
            {"replay_batch", c.train.replay_batch},
            {"lr", c.train.lr},
            {"momentum", c.train.momentum},
            {"replay_identities", c.train.replay.max_identities},
            {"replay_per_identity", c.train.replay.per_identity}}},
          {"loss",
           {{"lambda_ce", c.loss.lambda_ce},
            {"lambda_tri", c.loss.lambda_tri},
            {"lambda_cmcl", c.loss.lambda_cmcl},
            {"lambda_pcl", c.loss.lambda_pcl},
            {"margin", c.loss.margin},
            {"tau", c.loss.tau},
            {"parts", c.loss.parts}}},
          {"ablation", ablation_json(c.ablation)},
          {"run", {{"seeds", seeds}, {"data", c.data_dir}, {"out", c.out_dir}, {"mode", c.mode}}}};
}

}  // namespace lreid::cli
