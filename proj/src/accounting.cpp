#include "flopnet/accounting.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <sstream>
#include <tuple>

namespace flopnet {

const char* const kFlopConvention =
    "MAC=1; elementwise add/mul=1; GELU=6/elem (+4 equivariant butterfly); "
    "softmax=5/elem; layernorm=8/elem (+4 equivariant butterfly)";

std::uint64_t FlopReport::total() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.flops;
  return t;
}

std::uint64_t FlopReport::total_of_kind(const std::string& kind) const {
  std::uint64_t t = 0;
  for (const auto& e : entries)
    if (e.kind == kind) t += e.flops;
  return t;
}

std::uint64_t FlopReport::matmul_conv_macs() const {
  return total_of_kind("matmul") + total_of_kind("conv");
}

nlohmann::ordered_json FlopReport::to_json() const {
  nlohmann::ordered_json entries_json = nlohmann::ordered_json::array();
  for (const auto& e : entries)
    entries_json.push_back(
        nlohmann::ordered_json{{"name", e.name}, {"kind", e.kind}, {"flops", e.flops}});
  return nlohmann::ordered_json{{"config", config_name},
                                {"convention", convention},
                                {"total_flops", total()},
                                {"matmul_conv_macs", matmul_conv_macs()},
                                {"potential_dw_mult_reduction", potential_dw_mult_reduction},
                                {"entries", entries_json}};
}

std::uint64_t ParamReport::total() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.free_params;
  return t;
}

nlohmann::ordered_json ParamReport::to_json() const {
  nlohmann::ordered_json entries_json = nlohmann::ordered_json::array();
  for (const auto& e : entries)
    entries_json.push_back(
        nlohmann::ordered_json{{"name", e.name}, {"free_params", e.free_params}});
  return nlohmann::ordered_json{
      {"config", config_name}, {"total_params", total()}, {"entries", entries_json}};
}

namespace {

using u64 = std::uint64_t;

struct FlopAcc {
  FlopReport* report;
  void add(const std::string& name, const std::string& kind, u64 flops) {
    if (flops > 0) report->entries.push_back(FlopEntry{name, kind, flops});
  }
};

struct Dims {
  u64 grid_tokens;  // patch-grid tokens
  u64 tokens;       // incl. classification token for ViT
  u64 d;            // width
  u64 h;            // MLP hidden width
  u64 heads;
  u64 classes;
  u64 grid;
  u64 patch;
};

Dims dims_of(const ModelConfig& cfg) {
  Dims m;
  m.grid_tokens = static_cast<u64>(cfg.grid_tokens());
  m.tokens = static_cast<u64>(cfg.tokens());
  m.d = static_cast<u64>(cfg.width);
  m.h = static_cast<u64>(cfg.hidden());
  m.heads = static_cast<u64>(cfg.heads);
  m.classes = static_cast<u64>(cfg.num_classes);
  m.grid = static_cast<u64>(cfg.grid());
  m.patch = static_cast<u64>(cfg.patch);
  return m;
}

// One linear layer over `t` positions: MACs plus bias adds (bias only on the
// invariant half when equivariant).
void linear_flops(FlopAcc& acc, const std::string& name, u64 t, u64 c, u64 d, bool equi) {
  acc.add(name, "matmul", equi ? t * c * d / 2 : t * c * d);
  acc.add(name + ".bias", "add", equi ? t * d / 2 : t * d);
}

void layernorm_flops(FlopAcc& acc, const std::string& name, u64 t, u64 d, bool equi) {
  acc.add(name, "norm", t * d * (equi ? 12 : 8));
}

void activation_flops(FlopAcc& acc, const std::string& name, u64 t, u64 h, bool equi) {
  acc.add(name, "activation", t * h * (equi ? 10 : 6));
}

void mlp_flops(FlopAcc& acc, const std::string& p, u64 t, u64 d, u64 h, bool equi) {
  linear_flops(acc, p + ".fc1", t, d, h, equi);
  activation_flops(acc, p + ".gelu", t, h, equi);
  linear_flops(acc, p + ".fc2", t, h, d, equi);
}

void attention_flops(FlopAcc& acc, const std::string& p, u64 t, u64 d, u64 heads, bool equi) {
  linear_flops(acc, p + ".wq", t, d, d, equi);
  linear_flops(acc, p + ".wk", t, d, d, equi);
  linear_flops(acc, p + ".wv", t, d, d, equi);
  acc.add(p + ".scores", "matmul", t * t * d);
  acc.add(p + ".scale", "mul", t * t * heads);
  acc.add(p + ".softmax", "softmax", 5 * t * t * heads);
  acc.add(p + ".attend", "matmul", t * t * d);
  linear_flops(acc, p + ".wo", t, d, d, equi);
}

void patch_embed_flops(FlopAcc& acc, const ModelConfig& cfg) {
  const Dims m = dims_of(cfg);
  if (cfg.equivariant_embed()) {
    // Folded half-column form: mirrored patch columns are pre-combined, then
    // the free half-filters apply as a linear map at half the dense MACs.
    acc.add("patch_embed.fold", "add", m.grid_tokens * 3 * m.patch * m.patch);
    acc.add("patch_embed", "matmul", m.grid_tokens * m.d * 3 * m.patch * m.patch / 2);
    acc.add("patch_embed.bias", "add", m.grid_tokens * m.d / 2);
  } else {
    acc.add("patch_embed.conv", "conv", m.grid_tokens * m.d * 3 * m.patch * m.patch);
    acc.add("patch_embed.bias", "add", m.grid_tokens * m.d);
  }
}

void head_flops(FlopAcc& acc, const ModelConfig& cfg) {
  const Dims m = dims_of(cfg);
  const u64 in = cfg.variant == Variant::equivariant ? m.d / 2 : m.d;
  acc.add("head", "matmul", in * m.classes);
  acc.add("head.bias", "add", m.classes);
}

void count_vit(FlopAcc& acc, const ModelConfig& cfg) {
  const Dims m = dims_of(cfg);
  patch_embed_flops(acc, cfg);
  acc.add("pos_embed.add", "add", m.grid_tokens * m.d);
  for (int i = 0; i < cfg.depth; ++i) {
    const bool equi = i < cfg.equivariant_depth();
    const std::string p = "block" + std::to_string(i);
    layernorm_flops(acc, p + ".ln1", m.tokens, m.d, equi);
    attention_flops(acc, p + ".attn", m.tokens, m.d, m.heads, equi);
    acc.add(p + ".ls1", "mul", m.tokens * m.d);
    acc.add(p + ".res1", "add", m.tokens * m.d);
    layernorm_flops(acc, p + ".ln2", m.tokens, m.d, equi);
    mlp_flops(acc, p + ".mlp", m.tokens, m.d, m.h, equi);
    acc.add(p + ".ls2", "mul", m.tokens * m.d);
    acc.add(p + ".res2", "add", m.tokens * m.d);
  }
  layernorm_flops(acc, "final_ln", m.tokens, m.d, cfg.variant == Variant::equivariant);
  head_flops(acc, cfg);
}

void count_resmlp(FlopAcc& acc, const ModelConfig& cfg) {
  const Dims m = dims_of(cfg);
  const bool equi_model = cfg.variant == Variant::equivariant;
  patch_embed_flops(acc, cfg);
  for (int i = 0; i < cfg.depth; ++i) {
    const bool equi = i < cfg.equivariant_depth();
    const std::string p = "block" + std::to_string(i);
    acc.add(p + ".aff1", "mul", m.grid_tokens * m.d);
    acc.add(p + ".aff1.bias", "add", equi ? m.grid_tokens * m.d / 2 : m.grid_tokens * m.d);
    if (equi) {
      acc.add(p + ".mix.butterfly", "add", 4 * m.grid_tokens * m.d);
      acc.add(p + ".mix", "matmul", m.grid_tokens * m.grid_tokens * m.d / 2);
    } else {
      acc.add(p + ".mix", "matmul", m.grid_tokens * m.grid_tokens * m.d);
      acc.add(p + ".mix.bias", "add", m.grid_tokens * m.d);
    }
    acc.add(p + ".ls1", "mul", m.grid_tokens * m.d);
    acc.add(p + ".res1", "add", m.grid_tokens * m.d);
    acc.add(p + ".aff2", "mul", m.grid_tokens * m.d);
    acc.add(p + ".aff2.bias", "add", equi ? m.grid_tokens * m.d / 2 : m.grid_tokens * m.d);
    mlp_flops(acc, p + ".mlp", m.grid_tokens, m.d, m.h, equi);
    acc.add(p + ".ls2", "mul", m.grid_tokens * m.d);
    acc.add(p + ".res2", "add", m.grid_tokens * m.d);
  }
  acc.add("final_affine", "mul", m.grid_tokens * m.d);
  acc.add("final_affine.bias", "add", equi_model ? m.grid_tokens * m.d / 2 : m.grid_tokens * m.d);
  acc.add("pool", "add", m.grid_tokens * m.d + m.d);
  head_flops(acc, cfg);
}

void count_convnext(FlopAcc& acc, const ModelConfig& cfg, FlopReport& report) {
  const Dims m = dims_of(cfg);
  const bool equi_model = cfg.variant == Variant::equivariant;
  patch_embed_flops(acc, cfg);
  for (int i = 0; i < cfg.depth; ++i) {
    const bool equi = i < cfg.equivariant_depth();
    const std::string p = "block" + std::to_string(i);
    acc.add(p + ".dwconv", "conv", m.grid_tokens * m.d * 49);
    acc.add(p + ".dwconv.bias", "add", equi ? m.grid_tokens * m.d / 2 : m.grid_tokens * m.d);
    if (equi) {
      // Reduced (anti)symmetric row schedules would need 28 (sym) / 21 (anti)
      // multiplications per output instead of 49; reported, not applied.
      report.potential_dw_mult_reduction +=
          m.grid_tokens * (m.d / 2) * (49 - 28) + m.grid_tokens * (m.d / 2) * (49 - 21);
    }
    layernorm_flops(acc, p + ".ln", m.grid_tokens, m.d, equi);
    acc.add(p + ".res1", "add", m.grid_tokens * m.d);
    mlp_flops(acc, p + ".mlp", m.grid_tokens, m.d, m.h, equi);
    acc.add(p + ".ls", "mul", m.grid_tokens * m.d);
    acc.add(p + ".res2", "add", m.grid_tokens * m.d);
  }
  acc.add("pool", "add", m.grid_tokens * m.d + m.d);
  layernorm_flops(acc, "final_ln", 1, m.d, equi_model);
  head_flops(acc, cfg);
}

}  // namespace

std::uint64_t dense_linear_flops(std::uint64_t t, std::uint64_t c, std::uint64_t d, bool bias) {
  return t * c * d + (bias ? t * d : 0);
}

FlopReport count_flops(const ModelConfig& cfg) {
  cfg.validate();
  FlopReport report;
  report.config_name = cfg.display_name();
  report.convention = kFlopConvention;
  FlopAcc acc{&report};
  switch (cfg.family) {
    case Family::vit: count_vit(acc, cfg); break;
    case Family::resmlp: count_resmlp(acc, cfg); break;
    case Family::convnext_iso: count_convnext(acc, cfg, report); break;
  }
  return report;
}

namespace {

void linear_params(ParamReport& r, const std::string& name, u64 c, u64 d, bool equi) {
  r.entries.push_back({name + ".weight", equi ? c * d / 2 : c * d});
  r.entries.push_back({name + ".bias", equi ? d / 2 : d});
}

void layernorm_params(ParamReport& r, const std::string& name, u64 d, bool equi) {
  r.entries.push_back({name + ".gamma", d});
  r.entries.push_back({name + ".beta", equi ? d / 2 : d});
}

void affine_params(ParamReport& r, const std::string& name, u64 d, bool equi) {
  r.entries.push_back({name + ".alpha", d});
  r.entries.push_back({name + ".beta", equi ? d / 2 : d});
}

void mlp_params(ParamReport& r, const std::string& p, u64 d, u64 h, bool equi) {
  linear_params(r, p + ".fc1", d, h, equi);
  linear_params(r, p + ".fc2", h, d, equi);
}

}  // namespace

ParamReport count_params(const ModelConfig& cfg) {
  cfg.validate();
  ParamReport r;
  r.config_name = cfg.display_name();
  const Dims m = dims_of(cfg);
  const bool equi_embed = cfg.equivariant_embed();
  const bool equi_model = cfg.variant == Variant::equivariant;

  if (equi_embed) {
    // Half-column free filters: F*C*P*(P/2), bias on symmetric outputs only.
    r.entries.push_back({"patch_embed.filters", m.d * 3 * m.patch * (m.patch / 2)});
    r.entries.push_back({"patch_embed.bias", m.d / 2});
  } else {
    r.entries.push_back({"patch_embed.filters", m.d * 3 * m.patch * m.patch});
    r.entries.push_back({"patch_embed.bias", m.d});
  }

  if (cfg.family == Family::vit) {
    r.entries.push_back({"pos_embed", equi_embed ? m.grid_tokens * m.d / 2 : m.grid_tokens * m.d});
    r.entries.push_back({"cls_token", equi_embed ? m.d / 2 : m.d});
  }

  for (int i = 0; i < cfg.depth; ++i) {
    const bool equi = i < cfg.equivariant_depth();
    const std::string p = "block" + std::to_string(i);
    switch (cfg.family) {
      case Family::vit:
        layernorm_params(r, p + ".ln1", m.d, equi);
        linear_params(r, p + ".wq", m.d, m.d, equi);
        linear_params(r, p + ".wk", m.d, m.d, equi);
        linear_params(r, p + ".wv", m.d, m.d, equi);
        linear_params(r, p + ".wo", m.d, m.d, equi);
        layernorm_params(r, p + ".ln2", m.d, equi);
        mlp_params(r, p + ".mlp", m.d, m.h, equi);
        r.entries.push_back({p + ".ls", 2 * m.d});
        break;
      case Family::resmlp:
        affine_params(r, p + ".aff1", m.d, equi);
        if (equi) {
          // Two half-size patch matrices; no bias (a token bias shared over
          // all channels cannot be equivariant).
          r.entries.push_back({p + ".mix", 2 * (m.grid_tokens / 2) * (m.grid_tokens / 2)});
        } else {
          r.entries.push_back({p + ".mix", m.grid_tokens * m.grid_tokens + m.grid_tokens});
        }
        affine_params(r, p + ".aff2", m.d, equi);
        mlp_params(r, p + ".mlp", m.d, m.h, equi);
        r.entries.push_back({p + ".ls", 2 * m.d});
        break;
      case Family::convnext_iso:
        if (equi) {
          // 7x4 free columns for symmetric filters, 7x3 for antisymmetric.
          r.entries.push_back({p + ".dwconv.filters", (m.d / 2) * 28 + (m.d / 2) * 21});
          r.entries.push_back({p + ".dwconv.bias", m.d / 2});
        } else {
          r.entries.push_back({p + ".dwconv.filters", m.d * 49});
          r.entries.push_back({p + ".dwconv.bias", m.d});
        }
        layernorm_params(r, p + ".ln", m.d, equi);
        mlp_params(r, p + ".mlp", m.d, m.h, equi);
        r.entries.push_back({p + ".ls", m.d});
        break;
    }
  }

  if (cfg.family == Family::resmlp)
    affine_params(r, "final_affine", m.d, equi_model);
  else
    layernorm_params(r, "final_ln", m.d, equi_model);

  const u64 head_in = equi_model ? m.d / 2 : m.d;
  r.entries.push_back({"head.weight", head_in * m.classes});
  r.entries.push_back({"head.bias", m.classes});
  return r;
}

std::vector<RatioRow> ratio_table(const std::vector<ModelConfig>& configs) {
  auto arch_key = [](const ModelConfig& c) {
    return std::make_tuple(c.family, c.depth, c.width, c.patch, c.image_size, c.heads,
                           c.mlp_ratio, c.num_classes);
  };
  std::map<decltype(arch_key(configs[0])), std::pair<u64, u64>> baselines;
  for (const auto& cfg : configs) {
    if (cfg.variant != Variant::baseline) continue;
    baselines[arch_key(cfg)] = {count_params(cfg).total(), count_flops(cfg).total()};
  }
  std::vector<RatioRow> rows;
  for (const auto& cfg : configs) {
    RatioRow row;
    row.cfg = cfg;
    row.params = count_params(cfg).total();
    row.flops = count_flops(cfg).total();
    auto it = baselines.find(arch_key(cfg));
    if (it == baselines.end())
      throw UsageError("no baseline partner for config " + cfg.display_name());
    row.param_ratio = static_cast<double>(row.params) / static_cast<double>(it->second.first);
    row.flop_ratio = static_cast<double>(row.flops) / static_cast<double>(it->second.second);
    rows.push_back(row);
  }
  return rows;
}

nlohmann::ordered_json ratio_table_json(const std::vector<RatioRow>& rows) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    out.push_back(nlohmann::ordered_json{{"config", r.cfg.to_json()},
                                         {"params", r.params},
                                         {"flops", r.flops},
                                         {"param_ratio", r.param_ratio},
                                         {"flop_ratio", r.flop_ratio}});
  return out;
}

std::string render_ratio_table(const std::vector<RatioRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(34) << "architecture" << std::right << std::setw(12)
     << "params(1e6)" << std::setw(12) << "flops(1e9)" << std::setw(12) << "param ratio"
     << std::setw(12) << "flop ratio" << "\n";
  os << std::string(82, '-') << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(34) << r.cfg.display_name() << std::right << std::fixed
       << std::setprecision(1) << std::setw(12) << static_cast<double>(r.params) / 1e6
       << std::setw(12) << static_cast<double>(r.flops) / 1e9 << std::setprecision(3)
       << std::setw(12) << r.param_ratio << std::setw(12) << r.flop_ratio << "\n";
  }
  return os.str();
}

nlohmann::ordered_json BenchReport::to_json() const {
  return nlohmann::ordered_json{
      {"dim", dim},           {"batch", batch},
      {"iters", iters},       {"warmup", warmup},
      {"seed", seed},         {"threads", threads},
      {"dense_ms", dense_ms}, {"block_ms", block_ms},
      {"time_ratio", time_ratio}, {"flop_ratio", flop_ratio},
      {"max_abs_diff", max_abs_diff}};
}

}  // namespace flopnet
