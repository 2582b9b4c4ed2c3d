#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vton/image.hpp"

namespace vton {

// Pixel rectangle [left, left+width) x [top, top+height).
struct PixelBox {
  double left = 0, top = 0, width = 0, height = 0;
  nlohmann::json to_json() const { return {left, top, width, height}; }
  static PixelBox from_json(const nlohmann::json& j);
};

struct PairRecord {
  std::string id;
  std::string split;  // "train" or "test"
  std::string person;
  std::string garment;
  std::string mask;
  std::string agnostic;  // optional clothes-agnostic person
  std::string flow;      // optional
  std::string ground_truth;  // optional garment annotation JSON
};

// `index.json` at the dataset root; paths are relative to the root.
struct PairedDatasetIndex {
  std::filesystem::path root;
  std::vector<PairRecord> records;

  static PairedDatasetIndex load(const std::filesystem::path& root);
  void save() const;
  // "train", "test", or "all"; `limit` > 0 keeps the first records only.
  std::vector<PairRecord> select(const std::string& split, int limit = 0) const;
  std::filesystem::path path(const std::string& relative) const { return root / relative; }
};

struct LoadedPair {
  Image person;
  Image garment;
  Mask mask;
  Image agnostic;
  Image flow;  // empty when the record has none
};

// Reads a record's files and checks that sizes agree and the mask is binary.
LoadedPair load_pair(const PairedDatasetIndex& index, const PairRecord& record);

// Garment annotation boxes (glyphs, collar, sleeves) from a ground-truth JSON.
std::vector<PixelBox> annotation_boxes(const nlohmann::json& ground_truth);
nlohmann::json read_json(const std::filesystem::path& file);
void write_json(const nlohmann::json& j, const std::filesystem::path& file);

}  // namespace vton
