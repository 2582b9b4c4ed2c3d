#include "vton/dataset.hpp"

#include <fstream>

#include "vton/diffusion.hpp"
#include "vton/errors.hpp"

namespace vton {

PixelBox PixelBox::from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw ConfigError("box must be [left, top, width, height]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

nlohmann::json read_json(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot read " + file.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file);
  if (!os) throw IoError("cannot write " + file.string());
  os << j.dump(2) << "\n";
}

PairedDatasetIndex PairedDatasetIndex::load(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw ConfigError("dataset root " + root.string() + " does not exist");
  const nlohmann::json j = read_json(root / "index.json");
  PairedDatasetIndex idx;
  idx.root = root;
  try {
    for (const auto& r : j.at("pairs")) {
      PairRecord rec;
      rec.id = r.at("id");
      rec.split = r.at("split");
      rec.person = r.at("person");
      rec.garment = r.at("garment");
      rec.mask = r.at("mask");
      rec.agnostic = r.value("agnostic", "");
      rec.flow = r.value("flow", "");
      rec.ground_truth = r.value("ground_truth", "");
      idx.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed dataset index: " + std::string(e.what()));
  }
  return idx;
}

void PairedDatasetIndex::save() const {
  nlohmann::json pairs = nlohmann::json::array();
  for (const PairRecord& r : records) {
    nlohmann::json e = {{"id", r.id}, {"split", r.split}, {"person", r.person}, {"garment", r.garment}, {"mask", r.mask}};
    if (!r.agnostic.empty()) e["agnostic"] = r.agnostic;
    if (!r.flow.empty()) e["flow"] = r.flow;
    if (!r.ground_truth.empty()) e["ground_truth"] = r.ground_truth;
    pairs.push_back(std::move(e));
  }
  write_json({{"pairs", pairs}}, root / "index.json");
}

std::vector<PairRecord> PairedDatasetIndex::select(const std::string& split, int limit) const {
  std::vector<PairRecord> out;
  for (const PairRecord& r : records) {
    if (split != "all" && r.split != split) continue;
    out.push_back(r);
    if (limit > 0 && static_cast<int>(out.size()) >= limit) break;
  }
  return out;
}

LoadedPair load_pair(const PairedDatasetIndex& index, const PairRecord& record) {
  LoadedPair p;
  p.person = read_image(index.path(record.person));
  p.garment = read_image(index.path(record.garment));
  p.mask = read_mask(index.path(record.mask));
  p.agnostic = record.agnostic.empty() ? Image() : read_image(index.path(record.agnostic));
  if (!record.flow.empty()) {
    p.flow = read_flow(index.path(record.flow));
  }
  auto same = [&](const Image& img) { return img.height() == p.person.height() && img.width() == p.person.width(); };
  if (!same(p.garment) || !same(p.mask) || (!p.agnostic.empty() && !same(p.agnostic)) ||
      (!p.flow.empty() && !same(p.flow))) {
    throw ConfigError("record " + record.id + ": person, garment, mask, and flow sizes differ");
  }
  return p;
}

std::vector<PixelBox> annotation_boxes(const nlohmann::json& gt) {
  std::vector<PixelBox> boxes;
  for (const auto& g : gt.value("glyphs", nlohmann::json::array())) boxes.push_back(PixelBox::from_json(g.at("box")));
  if (gt.contains("collar")) boxes.push_back(PixelBox::from_json(gt.at("collar").at("box")));
  for (const auto& s : gt.value("sleeves", nlohmann::json::array())) boxes.push_back(PixelBox::from_json(s.at("box")));
  return boxes;
}

}  // namespace vton
