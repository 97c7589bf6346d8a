#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "flopnet/tensor.hpp"

namespace flopnet {

enum class Family { resmlp, vit, convnext_iso };
enum class Variant { baseline, equivariant, hybrid };

std::string to_string(Family f);
std::string to_string(Variant v);
Family family_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);

// Architecture description driving both the builders and the counters.
struct ModelConfig {
  Family family = Family::vit;
  int depth = 0;
  int width = 0;
  int patch = 0;
  int image_size = 224;
  int heads = 0;  // ViT only; 0 elsewhere
  double mlp_ratio = 4.0;
  int num_classes = 1000;
  Variant variant = Variant::baseline;

  int grid() const { return image_size / patch; }
  int grid_tokens() const { return grid() * grid(); }
  int tokens() const { return grid_tokens() + (family == Family::vit ? 1 : 0); }
  int hidden() const { return static_cast<int>(width * mlp_ratio); }
  bool equivariant_embed() const { return variant != Variant::baseline; }
  // Number of leading equivariant residual blocks.
  int equivariant_depth() const {
    if (variant == Variant::equivariant) return depth;
    if (variant == Variant::hybrid) return depth / 2;
    return 0;
  }

  std::string display_name() const;
  void validate() const;  // throws ConfigError on violation

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);  // rejects unknown fields
};

// Named size tiers per family ("XT" is the desk-scale tier; the rest follow
// the published depth/width table).
ModelConfig named_config(Family family, const std::string& size, Variant variant);
std::vector<std::string> family_sizes(Family family);

// All published architectures in every applicable variant
// (baseline + equivariant everywhere, hybrid for ViT).
std::vector<ModelConfig> paper_configs();

}  // namespace flopnet
