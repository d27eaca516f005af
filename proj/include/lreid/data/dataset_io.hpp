#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lreid/data/synth.hpp"
#include "lreid/error.hpp"
#include "lreid/io.hpp"

namespace lreid::data {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kDatasetFormat = "lreid-dataset";
inline constexpr const char* kDatasetVersion = "1";

namespace detail {

inline const std::array<const char*, 3> kSplits = {"train", "query", "gallery"};

inline std::vector<Sample>& split_of(TaskDataset& ds, std::size_t i) {
  return i == 0 ? ds.train : i == 1 ? ds.query : ds.gallery;
}
inline const std::vector<Sample>& split_of(const TaskDataset& ds, std::size_t i) {
  return i == 0 ? ds.train : i == 1 ? ds.query : ds.gallery;
}

template <typename T>
json decimal_strings(const std::vector<T>& v) {
  json out = json::array();
  for (auto x : v) out.push_back(std::to_string(x));
  return out;
}

inline std::int64_t parse_int(const json& j, const fs::path& file, const std::string& field) {
  if (!j.is_string()) throw FormatError(file.string() + ": field '" + field + "' must be a decimal string");
  const auto& s = j.get_ref<const std::string&>();
  std::size_t used = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty())
    throw FormatError(file.string() + ": field '" + field + "' is not a decimal integer");
  return v;
}

inline json domain_to_json(const DomainSpec& d) {
  return json{{"index", std::to_string(d.index)},
              {"color_matrix", d.color_matrix},
              {"color_offset", d.color_offset},
              {"texture_frequency", d.texture_frequency},
              {"noise_sigma", d.noise_sigma},
              {"camera_count", std::to_string(d.camera_count)},
              {"camera_gain", d.camera_gain},
              {"camera_bias", d.camera_bias}};
}

inline DomainSpec domain_from_json(const json& j, const fs::path& file) {
  DomainSpec d;
  d.index = static_cast<int>(parse_int(j.at("index"), file, "domain.index"));
  d.color_matrix = j.at("color_matrix").get<std::array<double, 9>>();
  d.color_offset = j.at("color_offset").get<std::array<double, 3>>();
  d.texture_frequency = j.at("texture_frequency").get<double>();
  d.noise_sigma = j.at("noise_sigma").get<double>();
  d.camera_count = static_cast<int>(parse_int(j.at("camera_count"), file, "domain.camera_count"));
  d.camera_gain = j.at("camera_gain").get<std::vector<double>>();
  d.camera_bias = j.at("camera_bias").get<std::vector<double>>();
  if (d.camera_gain.size() != static_cast<std::size_t>(d.camera_count) ||
      d.camera_bias.size() != static_cast<std::size_t>(d.camera_count))
    throw FormatError(file.string() + ": camera table length differs from camera_count");
  return d;
}

}  // namespace detail

/// Writes manifest.json plus one raw little-endian f64 blob per split.
inline void save_dataset(const TaskDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest{{"format", kDatasetFormat},
                {"version", kDatasetVersion},
                {"dtype", "f64"},
                {"endianness", "little"},
                {"layout", "row-major, image-major"},
                {"image_shape", json::array({std::to_string(kChannels), std::to_string(kHeight),
                                             std::to_string(kWidth)})},
                {"domain", detail::domain_to_json(ds.domain)}};
  json splits = json::object();
  for (std::size_t i = 0; i < detail::kSplits.size(); ++i) {
    const auto& items = detail::split_of(ds, i);
    const std::string file = std::string(detail::kSplits[i]) + ".f64";
    std::vector<std::int64_t> ids;
    std::vector<int> cams;
    std::vector<std::uint8_t> blob;
    blob.reserve(items.size() * kImageSize * 8);
    for (const auto& s : items) {
      if (s.image.shape() != Shape{kChannels, kHeight, kWidth})
        throw DimensionError("save_dataset: image shape " + shape_str(s.image.shape()));
      io::put_f64s(blob, s.image.data());
      ids.push_back(s.identity);
      cams.push_back(s.camera);
    }
    io::write_file(dir / file, blob);
    splits[detail::kSplits[i]] = json{{"file", file},
                                      {"count", std::to_string(items.size())},
                                      {"identities", detail::decimal_strings(ids)},
                                      {"cameras", detail::decimal_strings(cams)}};
  }
  manifest["splits"] = splits;
  io::write_text(dir / "manifest.json", manifest.dump(1) + "\n");
}

inline TaskDataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  json manifest;
  try {
    manifest = json::parse(io::read_text(mpath));
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": malformed manifest (" + e.what() + ")");
  }
  TaskDataset ds;
  try {
    if (manifest.at("format") != kDatasetFormat || manifest.at("version") != kDatasetVersion)
      throw FormatError(mpath.string() + ": unsupported format or version");
    if (manifest.at("dtype") != "f64" || manifest.at("endianness") != "little")
      throw FormatError(mpath.string() + ": unsupported dtype or endianness");
    const auto& shape = manifest.at("image_shape");
    if (!shape.is_array() || shape.size() != 3 ||
        detail::parse_int(shape[0], mpath, "image_shape") != static_cast<std::int64_t>(kChannels) ||
        detail::parse_int(shape[1], mpath, "image_shape") != static_cast<std::int64_t>(kHeight) ||
        detail::parse_int(shape[2], mpath, "image_shape") != static_cast<std::int64_t>(kWidth))
      throw FormatError(mpath.string() + ": unexpected image_shape");
    ds.domain = detail::domain_from_json(manifest.at("domain"), mpath);
    for (std::size_t i = 0; i < detail::kSplits.size(); ++i) {
      const auto& sj = manifest.at("splits").at(detail::kSplits[i]);
      const auto count = static_cast<std::size_t>(detail::parse_int(sj.at("count"), mpath, "count"));
      const auto& ids = sj.at("identities");
      const auto& cams = sj.at("cameras");
      if (ids.size() != count || cams.size() != count)
        throw FormatError(mpath.string() + ": label columns of '" + detail::kSplits[i] + "' differ from count");
      const fs::path blob_path = dir / sj.at("file").get<std::string>();
      if (!fs::exists(blob_path)) throw FormatError(blob_path.string() + ": missing tensor file");
      const auto blob = io::read_file(blob_path);
      if (blob.size() != count * kImageSize * 8)
        throw FormatError(blob_path.string() + ": expected " + std::to_string(count * kImageSize * 8) +
                          " bytes, found " + std::to_string(blob.size()));
      io::Reader rd(blob, blob_path.string());
      auto& items = detail::split_of(ds, i);
      items.reserve(count);
      for (std::size_t k = 0; k < count; ++k) {
        Sample s;
        s.image = Tensor({kChannels, kHeight, kWidth});
        rd.f64s(s.image.data());
        s.identity = detail::parse_int(ids[k], mpath, "identities");
        s.camera = static_cast<int>(detail::parse_int(cams[k], mpath, "cameras"));
        items.push_back(std::move(s));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": malformed manifest (" + e.what() + ")");
  }
  return ds;
}

inline fs::path task_dir(const fs::path& root, int task) { return root / ("task_" + std::to_string(task)); }

inline void save_benchmark(const std::vector<TaskDataset>& suite, const fs::path& root) {
  for (std::size_t t = 0; t < suite.size(); ++t) save_dataset(suite[t], task_dir(root, static_cast<int>(t) + 1));
}

/// Loads task_1, task_2, ... until the first missing directory.
inline std::vector<TaskDataset> load_benchmark(const fs::path& root) {
  if (!fs::is_directory(root)) throw FormatError(root.string() + ": dataset directory not found");
  std::vector<TaskDataset> suite;
  for (int t = 1; fs::is_directory(task_dir(root, t)); ++t) suite.push_back(load_dataset(task_dir(root, t)));
  if (suite.empty()) throw FormatError(root.string() + ": no task_1 directory");
  return suite;
}

}  // namespace lreid::data
