#pragma once

// Dataset persistence: one binary-P6 PPM per image plus one JSON annotation
// file per split: {images:[{file, boxes:[{x1,y1,x2,y2,class}]}],
// classes:[names]}.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdfsod/dataset.hpp"
#include "cdfsod/harness.hpp"

namespace cdfsod {

inline void export_dataset(const std::filesystem::path& dir, const std::string& split,
                           const std::vector<LabeledImage>& images, const DomainSpec& spec) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["classes"] = nlohmann::json::array();
  for (const ClassDef& c : spec.class_defs) j["classes"].push_back(c.name);
  j["images"] = nlohmann::json::array();
  for (size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%s_%04zu.ppm", split.c_str(), i);
    write_ppm((dir / name).string(), images[i].image);
    nlohmann::json entry;
    entry["file"] = name;
    entry["boxes"] = nlohmann::json::array();
    for (size_t b = 0; b < images[i].boxes.size(); ++b) {
      const Box& bx = images[i].boxes[b];
      entry["boxes"].push_back({{"x1", bx.x1},
                                {"y1", bx.y1},
                                {"x2", bx.x2},
                                {"y2", bx.y2},
                                {"class", images[i].classes[b]}});
    }
    j["images"].push_back(std::move(entry));
  }
  atomic_write(dir / (split + ".json"), j.dump(2) + "\n");
}

struct ImportedDataset {
  std::vector<LabeledImage> images;
  std::vector<std::string> classes;
};

inline ImportedDataset import_dataset(const std::filesystem::path& dir, const std::string& split) {
  nlohmann::json j = nlohmann::json::parse(read_file(dir / (split + ".json")));
  ImportedDataset out;
  for (const auto& c : j.at("classes")) out.classes.push_back(c.get<std::string>());
  for (const auto& entry : j.at("images")) {
    LabeledImage li;
    li.image = read_ppm((dir / entry.at("file").get<std::string>()).string());
    for (const auto& b : entry.at("boxes")) {
      li.boxes.push_back(Box{b.at("x1").get<double>(), b.at("y1").get<double>(),
                             b.at("x2").get<double>(), b.at("y2").get<double>()});
      li.classes.push_back(b.at("class").get<int>());
    }
    out.images.push_back(std::move(li));
  }
  return out;
}

}  // namespace cdfsod
