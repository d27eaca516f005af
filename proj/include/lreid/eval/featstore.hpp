#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lreid/data/synth.hpp"
#include "lreid/error.hpp"
#include "lreid/io.hpp"
#include "lreid/model/forward.hpp"

namespace lreid::eval {

namespace fs = std::filesystem;

struct DatasetTag {
  int task = 1;
  std::string split = "gallery";

  std::string str() const { return "task_" + std::to_string(task) + "." + split; }
  friend bool operator==(const DatasetTag&, const DatasetTag&) = default;
};

/// Rows of unit feature vectors with identity and camera labels.
struct FeatureSet {
  int extractor_version = 1;
  DatasetTag tag;
  Tensor features;  // [R,32]
  std::vector<std::int64_t> identities;
  std::vector<int> cameras;

  std::size_t rows() const { return identities.size(); }
  std::size_t dim() const { return features.dim(1); }
  const double* row(std::size_t r) const { return features.ptr() + r * dim(); }

  std::vector<std::uint8_t> payload() const {
    std::vector<std::uint8_t> out;
    io::put_f64s(out, features.data());
    return out;
  }

  /// FNV-1a over the f64 payload followed by "identity,camera\n" for each row.
  std::uint64_t content_hash() const {
    io::Fnv1a h;
    h.update(payload());
    for (std::size_t r = 0; r < rows(); ++r) h.update(std::to_string(identities[r]) + "," + std::to_string(cameras[r]) + "\n");
    return h.digest();
  }

  void validate() const {
    if (features.rank() != 2 || features.dim(0) != identities.size() || cameras.size() != identities.size())
      throw DimensionError("feature set " + tag.str() + ": shape " + shape_str(features.shape()) + " vs " +
                           std::to_string(identities.size()) + " labels");
    for (std::size_t r = 0; r < rows(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim(); ++j) s += row(r)[j] * row(r)[j];
      if (std::abs(std::sqrt(s) - 1.0) > 1e-9)
        throw DegenerateInputError("feature set " + tag.str() + ": row " + std::to_string(r) + " is not unit norm");
    }
  }

  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;
};

/// Embeds `samples` with the inference path of `params`; rows keep input order.
inline FeatureSet extract_features(const model::ModelParams& params, const std::vector<data::Sample>& samples,
                                   DatasetTag tag) {
  FeatureSet fs;
  fs.extractor_version = params.task_index;
  fs.tag = std::move(tag);
  fs.features = model::embed(params, samples);
  for (const auto& s : samples) {
    fs.identities.push_back(s.identity);
    fs.cameras.push_back(s.camera);
  }
  return fs;
}

/// Append-only directory of feature sets: <tag>.json manifest + <tag>.f64 payload.
class FeatureStore {
 public:
  explicit FeatureStore(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }
  fs::path manifest_path(const DatasetTag& tag) const { return dir_ / (tag.str() + ".json"); }
  fs::path payload_path(const DatasetTag& tag) const { return dir_ / (tag.str() + ".f64"); }
  bool contains(const DatasetTag& tag) const { return fs::exists(manifest_path(tag)); }

  void append(const FeatureSet& set) const {
    set.validate();
    if (contains(set.tag) || fs::exists(payload_path(set.tag)))
      throw ProtocolError("feature store: '" + set.tag.str() + "' already exists (sets are append-only)");
    std::vector<std::string> ids, cams;
    for (std::size_t r = 0; r < set.rows(); ++r) {
      ids.push_back(std::to_string(set.identities[r]));
      cams.push_back(std::to_string(set.cameras[r]));
    }
    nlohmann::json m{{"format", "lreid-features"},
                     {"version", "1"},
                     {"extractor_version", std::to_string(set.extractor_version)},
                     {"dataset_tag", {{"task", std::to_string(set.tag.task)}, {"split", set.tag.split}}},
                     {"rows", std::to_string(set.rows())},
                     {"dim", std::to_string(set.dim())},
                     {"dtype", "f64"},
                     {"endianness", "little"},
                     {"file", payload_path(set.tag).filename().string()},
                     {"hash", io::hex64(set.content_hash())},
                     {"identities", ids},
                     {"cameras", cams}};
    io::write_file(payload_path(set.tag), set.payload());
    io::write_text(manifest_path(set.tag), m.dump(1) + "\n");
  }

  FeatureSet load(const DatasetTag& tag) const {
    const fs::path mpath = manifest_path(tag);
    if (!contains(tag)) throw ProtocolError("feature store: no set '" + tag.str() + "' in " + dir_.string());
    FeatureSet set;
    std::string recorded;
    try {
      const auto m = nlohmann::json::parse(io::read_text(mpath));
      auto num = [&](const nlohmann::json& j) { return std::stoll(j.get<std::string>()); };
      set.extractor_version = static_cast<int>(num(m.at("extractor_version")));
      set.tag = {static_cast<int>(num(m.at("dataset_tag").at("task"))), m.at("dataset_tag").at("split")};
      const auto rows = static_cast<std::size_t>(num(m.at("rows")));
      const auto dim = static_cast<std::size_t>(num(m.at("dim")));
      for (const auto& v : m.at("identities")) set.identities.push_back(num(v));
      for (const auto& v : m.at("cameras")) set.cameras.push_back(static_cast<int>(num(v)));
      recorded = m.at("hash").get<std::string>();
      if (set.tag != tag) throw FormatError(mpath.string() + ": tag mismatch");
      if (set.identities.size() != rows || set.cameras.size() != rows || rows == 0 || dim == 0)
        throw FormatError(mpath.string() + ": row count mismatch");
      const auto blob = io::read_file(payload_path(tag));
      if (blob.size() != rows * dim * 8)
        throw IntegrityError(payload_path(tag).string() + ": payload size does not match manifest");
      set.features = Tensor({rows, dim});
      io::Reader(blob, payload_path(tag).string()).f64s(set.features.data());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(mpath.string() + ": malformed manifest (" + e.what() + ")");
    } catch (const std::invalid_argument&) {
      throw FormatError(mpath.string() + ": malformed integer field");
    }
    if (io::hex64(set.content_hash()) != recorded)
      throw IntegrityError("feature store: hash mismatch for '" + tag.str() + "'");
    return set;
  }

  /// Digest of both files of a set; used to prove sets are never rewritten.
  std::uint64_t file_hash(const DatasetTag& tag) const {
    io::Fnv1a h;
    h.update(io::read_file(manifest_path(tag)));
    h.update(io::read_file(payload_path(tag)));
    return h.digest();
  }

 private:
  fs::path dir_;
};

}  // namespace lreid::eval
