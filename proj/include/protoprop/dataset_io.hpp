#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protoprop/synthdata.hpp"
#include "protoprop/tensor_io.hpp"

namespace protoprop {

namespace detail {

inline nlohmann::json labels_json(const SplitData& s) {
  nlohmann::json j;
  j["attributes"] = s.attr_labels;
  j["objects"] = s.obj_labels;
  return j;
}

inline void read_labels(const nlohmann::json& j, SplitData& s) {
  s.attr_labels = j.at("attributes").get<std::vector<std::size_t>>();
  s.obj_labels = j.at("objects").get<std::vector<std::size_t>>();
  if (s.attr_labels.size() != s.obj_labels.size()) {
    throw ContractError("dataset meta: label arrays have different lengths");
  }
}

inline std::vector<std::vector<std::size_t>> comps_json(
    const std::vector<CompositionalLabel>& comps) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& c : comps) out.push_back({c.attribute, c.object});
  return out;
}

inline std::vector<CompositionalLabel> comps_from_json(
    const nlohmann::json& j) {
  std::vector<CompositionalLabel> out;
  for (const auto& pair : j) {
    if (!pair.is_array() || pair.size() != 2) {
      throw ContractError("dataset meta: malformed composition entry");
    }
    out.push_back({pair[0].get<std::size_t>(), pair[1].get<std::size_t>()});
  }
  return out;
}

inline nlohmann::json vocab_json(const PrimitiveVocab& v) {
  nlohmann::json j;
  for (const auto& a : v.attributes) {
    j["attributes"].push_back({{"name", a.name}, {"rgb", a.rgb}});
  }
  for (const auto& o : v.objects) {
    j["objects"].push_back(
        {{"name", o.name}, {"stencil", static_cast<int>(o.stencil)}});
  }
  return j;
}

inline PrimitiveVocab vocab_from_json(const nlohmann::json& j) {
  PrimitiveVocab v;
  for (const auto& a : j.at("attributes")) {
    v.attributes.push_back({a.at("name").get<std::string>(),
                            a.at("rgb").get<std::array<double, 3>>()});
  }
  for (const auto& o : j.at("objects")) {
    v.objects.push_back({o.at("name").get<std::string>(),
                         static_cast<Stencil>(o.at("stencil").get<int>())});
  }
  return v;
}

}  // namespace detail

// On disk a dataset is a directory holding meta.json (vocabulary, split
// assignment, label arrays, generation settings) and one tensor blob per
// split with the raw image stacks.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["format"] = "protoprop-dataset-v1";
  meta["vocab"] = detail::vocab_json(ds.vocab);
  meta["seed"] = ds.spec.seed;
  meta["ratio"] = {ds.spec.ratio_unseen, ds.spec.ratio_seen};
  meta["train_per_seen"] = ds.spec.train_per_seen;
  meta["val_per_class"] = ds.spec.val_per_class;
  meta["test_per_class"] = ds.spec.test_per_class;
  meta["bias_mode"] = ds.spec.bias_mode;
  meta["seen"] = detail::comps_json(ds.seen);
  meta["unseen"] = detail::comps_json(ds.unseen);
  meta["labels"]["train"] = detail::labels_json(ds.train);
  meta["labels"]["val"] = detail::labels_json(ds.val);
  meta["labels"]["test"] = detail::labels_json(ds.test);

  std::ofstream mf(dir / "meta.json");
  if (!mf) throw ContractError("save_dataset: cannot write meta.json");
  mf << meta.dump(2) << "\n";
  mf.close();

  save_tensor((dir / "train.ppt").string(), ds.train.images);
  save_tensor((dir / "val.ppt").string(), ds.val.images);
  save_tensor((dir / "test.ppt").string(), ds.test.images);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) {
    throw ContractError("load_dataset: missing " +
                        (dir / "meta.json").string());
  }
  nlohmann::json meta = nlohmann::json::parse(mf);
  if (meta.value("format", "") != "protoprop-dataset-v1") {
    throw ContractError("load_dataset: unrecognized dataset format");
  }

  Dataset ds;
  ds.vocab = detail::vocab_from_json(meta.at("vocab"));
  ds.spec.seed = meta.at("seed").get<std::uint64_t>();
  ds.spec.ratio_unseen = meta.at("ratio")[0].get<std::size_t>();
  ds.spec.ratio_seen = meta.at("ratio")[1].get<std::size_t>();
  ds.spec.train_per_seen = meta.at("train_per_seen").get<std::size_t>();
  ds.spec.val_per_class = meta.at("val_per_class").get<std::size_t>();
  ds.spec.test_per_class = meta.at("test_per_class").get<std::size_t>();
  ds.spec.bias_mode = meta.at("bias_mode").get<bool>();
  ds.seen = detail::comps_from_json(meta.at("seen"));
  ds.unseen = detail::comps_from_json(meta.at("unseen"));
  detail::read_labels(meta.at("labels").at("train"), ds.train);
  detail::read_labels(meta.at("labels").at("val"), ds.val);
  detail::read_labels(meta.at("labels").at("test"), ds.test);
  ds.train.images = load_tensor((dir / "train.ppt").string());
  ds.val.images = load_tensor((dir / "val.ppt").string());
  ds.test.images = load_tensor((dir / "test.ppt").string());
  check_dataset(ds);
  return ds;
}

}  // namespace protoprop
