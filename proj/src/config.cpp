#include "flopnet/config.hpp"

#include <map>
#include <sstream>

namespace flopnet {

std::string to_string(Family f) {
  switch (f) {
    case Family::resmlp: return "resmlp";
    case Family::vit: return "vit";
    case Family::convnext_iso: return "convnext_iso";
  }
  throw ConfigError("unknown family");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::equivariant: return "equivariant";
    case Variant::hybrid: return "hybrid";
  }
  throw ConfigError("unknown variant");
}

Family family_from_string(const std::string& s) {
  if (s == "resmlp") return Family::resmlp;
  if (s == "vit") return Family::vit;
  if (s == "convnext_iso") return Family::convnext_iso;
  throw ConfigError("unknown family: " + s);
}

Variant variant_from_string(const std::string& s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "equivariant") return Variant::equivariant;
  if (s == "hybrid") return Variant::hybrid;
  throw ConfigError("unknown variant: " + s);
}

std::string ModelConfig::display_name() const {
  std::ostringstream os;
  os << to_string(family) << "-d" << depth << "w" << width << "p" << patch << "-"
     << to_string(variant);
  return os.str();
}

void ModelConfig::validate() const {
  if (depth < 1 || width < 1 || patch < 1 || image_size < 1)
    throw ConfigError("depth, width, patch and image size must be positive");
  if (num_classes < 2) throw ConfigError("need at least two classes");
  if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
  if (image_size % patch != 0)
    throw ConfigError("image size must be divisible by the patch size");
  if (grid() % 2 != 0)
    throw ConfigError("patch grid width must be even (odd grids have a fixed middle column)");
  if (variant == Variant::hybrid && family != Family::vit)
    throw ConfigError("hybrid models are defined for the vit family only");
  if (variant != Variant::baseline) {
    if (width % 2 != 0) throw ConfigError("equivariant variants need an even width");
    if (patch % 2 != 0) throw ConfigError("equivariant variants need an even patch size");
    if (hidden() % 2 != 0) throw ConfigError("equivariant variants need an even MLP width");
  }
  if (family == Family::vit) {
    if (heads < 1) throw ConfigError("vit needs at least one attention head");
    if (width % heads != 0) throw ConfigError("width must divide evenly into heads");
    if (variant != Variant::baseline && (width / heads) % 2 != 0)
      throw ConfigError("equivariant attention needs an even per-head width");
  }
}

nlohmann::ordered_json ModelConfig::to_json() const {
  return nlohmann::ordered_json{
      {"family", to_string(family)},   {"depth", depth},
      {"width", width},                {"patch", patch},
      {"image_size", image_size},      {"heads", heads},
      {"mlp_ratio", mlp_ratio},        {"num_classes", num_classes},
      {"variant", to_string(variant)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {"family", "depth",      "width",
                                                 "patch",  "image_size", "heads",
                                                 "mlp_ratio", "num_classes", "variant"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown config field: " + it.key());
  }
  ModelConfig cfg;
  cfg.family = family_from_string(j.at("family").get<std::string>());
  cfg.depth = j.at("depth").get<int>();
  cfg.width = j.at("width").get<int>();
  cfg.patch = j.at("patch").get<int>();
  cfg.image_size = j.at("image_size").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.mlp_ratio = j.at("mlp_ratio").get<double>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.variant = variant_from_string(j.at("variant").get<std::string>());
  cfg.validate();
  return cfg;
}

namespace {

struct SizeSpec {
  int depth;
  int width;
  int patch;
  int image;
  int heads;
  int classes;
};

const std::map<std::string, SizeSpec>& size_table(Family family) {
  // Depth/width tiers from the published model table; ViT-H uses 14x14
  // patches, everything else 16x16 at 224. XT is the desk-scale tier.
  static const std::map<std::string, SizeSpec> resmlp = {
      {"XT", {2, 16, 8, 32, 0, 10}},   {"T", {12, 384, 16, 224, 0, 1000}},
      {"S", {24, 384, 16, 224, 0, 1000}}, {"B", {24, 768, 16, 224, 0, 1000}},
      {"L", {24, 1280, 16, 224, 0, 1000}}};
  static const std::map<std::string, SizeSpec> vit = {
      {"XT", {2, 16, 8, 32, 2, 10}},      {"S", {12, 384, 16, 224, 6, 1000}},
      {"B", {12, 768, 16, 224, 12, 1000}}, {"L", {24, 1024, 16, 224, 16, 1000}},
      {"H", {32, 1280, 14, 224, 16, 1000}}};
  static const std::map<std::string, SizeSpec> convnext = {
      {"XT", {2, 16, 8, 32, 0, 10}},      {"S", {18, 384, 16, 224, 0, 1000}},
      {"B", {18, 768, 16, 224, 0, 1000}}, {"L", {36, 1024, 16, 224, 0, 1000}}};
  switch (family) {
    case Family::resmlp: return resmlp;
    case Family::vit: return vit;
    case Family::convnext_iso: return convnext;
  }
  throw ConfigError("unknown family");
}

}  // namespace

ModelConfig named_config(Family family, const std::string& size, Variant variant) {
  const auto& table = size_table(family);
  auto it = table.find(size);
  if (it == table.end())
    throw ConfigError("unknown size '" + size + "' for family " + to_string(family));
  const SizeSpec& s = it->second;
  ModelConfig cfg;
  cfg.family = family;
  cfg.depth = s.depth;
  cfg.width = s.width;
  cfg.patch = s.patch;
  cfg.image_size = s.image;
  cfg.heads = s.heads;
  cfg.num_classes = s.classes;
  cfg.variant = variant;
  cfg.validate();
  return cfg;
}

std::vector<std::string> family_sizes(Family family) {
  std::vector<std::string> out;
  for (const auto& [k, v] : size_table(family)) out.push_back(k);
  return out;
}

std::vector<ModelConfig> paper_configs() {
  std::vector<ModelConfig> out;
  auto add = [&out](Family f, const std::string& size) {
    out.push_back(named_config(f, size, Variant::baseline));
    out.push_back(named_config(f, size, Variant::equivariant));
    if (f == Family::vit) out.push_back(named_config(f, size, Variant::hybrid));
  };
  add(Family::resmlp, "T");
  add(Family::resmlp, "S");
  add(Family::resmlp, "B");
  add(Family::resmlp, "L");
  add(Family::vit, "S");
  add(Family::vit, "B");
  add(Family::vit, "L");
  add(Family::vit, "H");
  add(Family::convnext_iso, "S");
  add(Family::convnext_iso, "B");
  add(Family::convnext_iso, "L");
  return out;
}

}  // namespace flopnet
