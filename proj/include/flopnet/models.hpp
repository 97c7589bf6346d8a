#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "flopnet/config.hpp"
#include "flopnet/io.hpp"
#include "flopnet/layers.hpp"

namespace flopnet {

// LayerScale init: near zero for deep stacks; larger for very shallow desk
// models, where 1e-4 would make every residual branch (and thus the whole
// input dependence of a ViT's class token) vanish at init.
template <typename S>
S layer_scale_init(int depth) {
  return depth <= 4 ? S(0.1) : S(1e-4);
}

template <typename S>
struct ForwardTrace {
  std::vector<std::pair<std::string, Tensor<S>>> features;

  const Tensor<S>* find(const std::string& name) const {
    for (const auto& [n, t] : features)
      if (n == name) return &t;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Residual blocks.

template <typename S>
struct VitBlock {
  bool equivariant = false;
  Index width = 0;
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  AnyLinear<S> fc1, fc2;
  LayerScale<S> ls1, ls2;

  VitBlock() = default;
  VitBlock(const std::string& name, const ModelConfig& cfg, bool equi, S ls_init,
           WeightInit init)
      : equivariant(equi),
        width(cfg.width),
        ln1(name + ".ln1", cfg.width, equi),
        ln2(name + ".ln2", cfg.width, equi),
        attn(name + ".attn", cfg.width, cfg.heads, equi, init),
        fc1(make_linear<S>(name + ".fc1", cfg.width, cfg.hidden(), true, equi, init)),
        fc2(make_linear<S>(name + ".fc2", cfg.hidden(), cfg.width, true, equi, init)),
        ls1(name + ".ls1", cfg.width, ls_init),
        ls2(name + ".ls2", cfg.width, ls_init) {}

  Var mlp(Tape<S>& t, Var x) const {
    Var h = linear_forward(t, fc1, x);
    const Index hidden = t.value(h).extent(t.value(h).rank() - 1);
    h = equivariant ? equivariant_pointwise(t, h, ParityLayout::halves(hidden), Activation::gelu)
                    : t.gelu(h);
    return linear_forward(t, fc2, h);
  }

  Var forward(Tape<S>& t, Var x) const {
    Var h = ls1.forward(t, attn.forward(t, ln1.forward(t, x)));
    x = t.add(x, h);
    h = ls2.forward(t, mlp(t, ln2.forward(t, x)));
    return t.add(x, h);
  }

  void collect(std::vector<Param<S>*>& out) {
    ln1.collect(out);
    attn.collect(out);
    ls1.collect(out);
    ln2.collect(out);
    linear_collect(fc1, out);
    linear_collect(fc2, out);
    ls2.collect(out);
  }
};

template <typename S>
struct ResMlpBlock {
  bool equivariant = false;
  Index width = 0;
  Affine<S> aff1, aff2;
  std::variant<DensePatchMix<S>, ParityPatchMix<S>> mix;
  AnyLinear<S> fc1, fc2;
  LayerScale<S> ls1, ls2;

  ResMlpBlock() = default;
  ResMlpBlock(const std::string& name, const ModelConfig& cfg, bool equi, S ls_init,
              WeightInit init)
      : equivariant(equi),
        width(cfg.width),
        aff1(name + ".aff1", cfg.width, equi),
        aff2(name + ".aff2", cfg.width, equi),
        fc1(make_linear<S>(name + ".fc1", cfg.width, cfg.hidden(), true, equi, init)),
        fc2(make_linear<S>(name + ".fc2", cfg.hidden(), cfg.width, true, equi, init)),
        ls1(name + ".ls1", cfg.width, ls_init),
        ls2(name + ".ls2", cfg.width, ls_init) {
    if (equi)
      mix = ParityPatchMix<S>(name + ".mix", cfg.grid(), cfg.grid(), init);
    else
      mix = DensePatchMix<S>(name + ".mix", cfg.grid_tokens(), init);
  }

  Var mix_forward(Tape<S>& t, Var x) const {
    return std::visit([&](const auto& m) { return m.forward(t, x); }, mix);
  }

  Var mlp(Tape<S>& t, Var x) const {
    Var h = linear_forward(t, fc1, x);
    const Index hidden = t.value(h).extent(t.value(h).rank() - 1);
    h = equivariant ? equivariant_pointwise(t, h, ParityLayout::halves(hidden), Activation::gelu)
                    : t.gelu(h);
    return linear_forward(t, fc2, h);
  }

  Var forward(Tape<S>& t, Var x) const {
    Var h = ls1.forward(t, mix_forward(t, aff1.forward(t, x)));
    x = t.add(x, h);
    h = ls2.forward(t, mlp(t, aff2.forward(t, x)));
    return t.add(x, h);
  }

  void collect(std::vector<Param<S>*>& out) {
    aff1.collect(out);
    std::visit([&](auto& m) { m.collect(out); }, mix);
    ls1.collect(out);
    aff2.collect(out);
    linear_collect(fc1, out);
    linear_collect(fc2, out);
    ls2.collect(out);
  }
};

template <typename S>
struct ConvNeXtBlock {
  bool equivariant = false;
  Index width = 0;
  Index grid = 0;
  std::variant<DenseDepthwiseConv<S>, ParityDepthwiseConv<S>> dw;
  LayerNorm<S> ln;
  AnyLinear<S> fc1, fc2;  // 1x1 convolutions  = per-token linear maps
  LayerScale<S> ls;

  ConvNeXtBlock() = default;
  ConvNeXtBlock(const std::string& name, const ModelConfig& cfg, bool equi, S ls_init,
                WeightInit init)
      : equivariant(equi),
        width(cfg.width),
        grid(cfg.grid()),
        ln(name + ".ln", cfg.width, equi),
        fc1(make_linear<S>(name + ".conv1x1_a", cfg.width, cfg.hidden(), true, equi, init)),
        fc2(make_linear<S>(name + ".conv1x1_b", cfg.hidden(), cfg.width, true, equi, init)),
        ls(name + ".ls", cfg.width, ls_init) {
    if (equi)
      dw = ParityDepthwiseConv<S>(name + ".dwconv", ParityLayout::halves(cfg.width), 7, init);
    else
      dw = DenseDepthwiseConv<S>(name + ".dwconv", cfg.width, 7, init);
  }

  Var dw_tokens(Tape<S>& t, Var x) const {
    Var img = t.reshape(t.transpose(x), {width, grid, grid});
    Var out = std::visit([&](const auto& d) { return d.forward(t, img); }, dw);
    return t.transpose(t.reshape(out, {width, grid * grid}));
  }

  Var mlp(Tape<S>& t, Var x) const {
    Var h = linear_forward(t, fc1, x);
    const Index hidden = t.value(h).extent(t.value(h).rank() - 1);
    h = equivariant ? equivariant_pointwise(t, h, ParityLayout::halves(hidden), Activation::gelu)
                    : t.gelu(h);
    return linear_forward(t, fc2, h);
  }

  Var forward(Tape<S>& t, Var x) const {
    Var h = ln.forward(t, dw_tokens(t, x));
    x = t.add(x, h);
    h = ls.forward(t, mlp(t, x));
    return t.add(x, h);
  }

  void collect(std::vector<Param<S>*>& out) {
    std::visit([&](auto& d) { d.collect(out); }, dw);
    ln.collect(out);
    linear_collect(fc1, out);
    linear_collect(fc2, out);
    ls.collect(out);
  }
};

// ---------------------------------------------------------------------------
// Models. Layout convention everywhere: invariant channels first. Tokens are
// in row-major grid order; ViT prepends the classification token at index 0.

template <typename S>
using AnyPatchEmbed = std::variant<DensePatchEmbed<S>, EquivariantPatchEmbed<S>>;

template <typename S>
Var embed_forward(Tape<S>& t, const AnyPatchEmbed<S>& e, Var img) {
  return std::visit([&](const auto& pe) { return pe.forward(t, img); }, e);
}

template <typename S>
struct Model {
  ModelConfig cfg;
  AnyPatchEmbed<S> embed;
  PosEmbed<S> pos;     // ViT only
  ClassToken<S> cls;   // ViT only
  std::vector<VitBlock<S>> vit_blocks;
  std::vector<ResMlpBlock<S>> resmlp_blocks;
  std::vector<ConvNeXtBlock<S>> convnext_blocks;
  Affine<S> final_affine;  // ResMLP only
  LayerNorm<S> final_ln;   // ViT / ConvNeXt
  DenseLinear<S> head;

  ParityLayout channel_layout() const { return ParityLayout::halves(cfg.width); }

  TokenAction token_action() const {
    return TokenAction::grid_flop(cfg.grid(), cfg.grid(), cfg.family == Family::vit ? 1 : 0);
  }

  TokenAction grid_action() const { return TokenAction::grid_flop(cfg.grid(), cfg.grid(), 0); }

  Var forward(Tape<S>& t, Var img, ForwardTrace<S>* trace = nullptr) const {
    const Tensor<S>& im = t.value(img);
    detail::require(im.rank() == 3 && im.extent(0) == 3 && im.extent(1) == cfg.image_size &&
                        im.extent(2) == cfg.image_size,
                    "input image must be (3 x image_size x image_size)");
    auto record = [&](const std::string& name, Var v) {
      if (trace) trace->features.emplace_back(name, t.value(v));
    };
    Var x = embed_forward(t, embed, img);
    if (cfg.family == Family::vit) {
      x = pos.add_to(t, x);
      x = cls.prepend(t, x);
    }
    record("embed", x);
    const int depth = cfg.depth;
    for (int i = 0; i < depth; ++i) {
      switch (cfg.family) {
        case Family::vit: x = vit_blocks[i].forward(t, x); break;
        case Family::resmlp: x = resmlp_blocks[i].forward(t, x); break;
        case Family::convnext_iso: x = convnext_blocks[i].forward(t, x); break;
      }
      record("block" + std::to_string(i), x);
    }

    const bool invariant_head = cfg.variant == Variant::equivariant;
    Var feat;
    if (cfg.family == Family::vit) {
      x = final_ln.forward(t, x);
      feat = t.slice_first(x, 0, 1);  // classification token
    } else if (cfg.family == Family::resmlp) {
      x = final_affine.forward(t, x);
      feat = t.reshape(t.mean_first(x), {Index(1), Index(cfg.width)});
    } else {
      feat = t.reshape(t.mean_first(x), {Index(1), Index(cfg.width)});
      feat = final_ln.forward(t, feat);
    }
    record("pre_head", feat);
    if (invariant_head) feat = t.slice_last(feat, 0, cfg.width / 2);
    Var logits = head.forward(t, feat);
    return t.reshape(logits, {Index(cfg.num_classes)});
  }

  Tensor<S> logits(const Tensor<S>& img, ForwardTrace<S>* trace = nullptr) const {
    Tape<S> t;
    Var out = forward(t, t.constant(img), trace);
    return t.value(out);
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    std::visit([&](auto& e) { e.collect(out); }, embed);
    if (cfg.family == Family::vit) {
      pos.collect(out);
      cls.collect(out);
      for (auto& b : vit_blocks) b.collect(out);
      final_ln.collect(out);
    } else if (cfg.family == Family::resmlp) {
      for (auto& b : resmlp_blocks) b.collect(out);
      final_affine.collect(out);
    } else {
      for (auto& b : convnext_blocks) b.collect(out);
      final_ln.collect(out);
    }
    head.collect(out);
    return out;
  }
};

template <typename S>
Model<S> build_model(const ModelConfig& cfg, std::uint64_t seed, bool zero_init = false) {
  cfg.validate();
  Model<S> m;
  m.cfg = cfg;
  Rng rng(seed);
  WeightInit init(rng, zero_init);
  const S ls_init = layer_scale_init<S>(cfg.depth);
  const bool equi_embed = cfg.equivariant_embed();
  const int eq_depth = cfg.equivariant_depth();

  if (equi_embed)
    m.embed = EquivariantPatchEmbed<S>("patch_embed", cfg.width, 3, cfg.patch, init);
  else
    m.embed = DensePatchEmbed<S>("patch_embed", cfg.width, 3, cfg.patch, init);

  if (cfg.family == Family::vit) {
    m.pos = PosEmbed<S>("pos_embed", cfg.grid(), cfg.grid(), cfg.width, equi_embed, init);
    m.cls = ClassToken<S>("cls", cfg.width, equi_embed);
  }

  for (int i = 0; i < cfg.depth; ++i) {
    const bool equi = i < eq_depth;
    const std::string name = "block" + std::to_string(i);
    switch (cfg.family) {
      case Family::vit: m.vit_blocks.emplace_back(name, cfg, equi, ls_init, init); break;
      case Family::resmlp: m.resmlp_blocks.emplace_back(name, cfg, equi, ls_init, init); break;
      case Family::convnext_iso:
        m.convnext_blocks.emplace_back(name, cfg, equi, ls_init, init);
        break;
    }
  }

  const bool equi_tail = cfg.variant == Variant::equivariant;
  if (cfg.family == Family::resmlp)
    m.final_affine = Affine<S>("final_affine", cfg.width, equi_tail);
  else
    m.final_ln = LayerNorm<S>("final_ln", cfg.width, equi_tail);
  const Index head_in = equi_tail ? cfg.width / 2 : cfg.width;
  m.head = DenseLinear<S>("head", head_in, cfg.num_classes, true, init);
  return m;
}

// ---------------------------------------------------------------------------
// Equivariance check inventory: one entry per layer of the equivariant part,
// plus composite-action entries for the structured layers.

template <typename S>
struct LayerCheck {
  std::string name;
  Shape input_shape;
  TensorFn<S> fn;
  TensorFn<S> in_action;
  TensorFn<S> out_action;
};

template <typename S>
TensorFn<S> tape_fn(const Model<S>* m, std::function<Var(Tape<S>&, Var)> body) {
  (void)m;
  return [body](const Tensor<S>& x) {
    Tape<S> t;
    return t.value(body(t, t.constant(x)));
  };
}

// The model must outlive the returned checks.
template <typename S>
std::vector<LayerCheck<S>> layer_checks(const Model<S>& model) {
  std::vector<LayerCheck<S>> out;
  const ModelConfig& cfg = model.cfg;
  const Index width = cfg.width;
  const Index tokens = cfg.tokens();
  const ParityLayout lay = ParityLayout::halves(width);
  const ParityLayout hid = ParityLayout::halves(cfg.hidden());
  const TokenAction tok_act = model.token_action();
  const Shape token_shape{tokens, width};
  const auto tok_action = token_feature_action<S>(tok_act, lay);
  const Model<S>* m = &model;

  auto add = [&](const std::string& name, Shape in_shape, TensorFn<S> fn, TensorFn<S> ia,
                 TensorFn<S> oa) {
    out.push_back(LayerCheck<S>{name, std::move(in_shape), std::move(fn), std::move(ia),
                                std::move(oa)});
  };

  if (cfg.equivariant_embed()) {
    // PatchEmbed maps the image action to the composite token action.
    add("patch_embed", {3, cfg.image_size, cfg.image_size},
        tape_fn<S>(m, [m](Tape<S>& t, Var v) { return embed_forward(t, m->embed, v); }),
        image_flop_action<S>(),
        token_feature_action<S>(m->grid_action(), lay));
    if (cfg.family == Family::vit) {
      add("embed_stage", {3, cfg.image_size, cfg.image_size},
          tape_fn<S>(m,
                     [m](Tape<S>& t, Var v) {
                       Var x = embed_forward(t, m->embed, v);
                       x = m->pos.add_to(t, x);
                       return m->cls.prepend(t, x);
                     }),
          image_flop_action<S>(), tok_action);
    }
  }

  const int eq_depth = cfg.equivariant_depth();
  for (int i = 0; i < eq_depth; ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    if (cfg.family == Family::vit) {
      const VitBlock<S>* b = &model.vit_blocks[i];
      add(p + "ln1", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->ln1.forward(t, v); }), tok_action,
          tok_action);
      add(p + "attn", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->attn.forward(t, v); }), tok_action,
          tok_action);
      add(p + "mlp", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->mlp(t, v); }), tok_action,
          tok_action);
      add(p + "layer_scale", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->ls1.forward(t, v); }), tok_action,
          tok_action);
      add(p + "block", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->forward(t, v); }), tok_action,
          tok_action);
    } else if (cfg.family == Family::resmlp) {
      const ResMlpBlock<S>* b = &model.resmlp_blocks[i];
      add(p + "affine", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->aff1.forward(t, v); }), tok_action,
          tok_action);
      add(p + "patch_mix", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->mix_forward(t, v); }), tok_action,
          tok_action);
      add(p + "mlp", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->mlp(t, v); }), tok_action,
          tok_action);
      add(p + "layer_scale", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->ls1.forward(t, v); }), tok_action,
          tok_action);
      add(p + "block", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->forward(t, v); }), tok_action,
          tok_action);
    } else {
      const ConvNeXtBlock<S>* b = &model.convnext_blocks[i];
      add(p + "dwconv", {width, cfg.grid(), cfg.grid()},
          tape_fn<S>(m,
                     [b](Tape<S>& t, Var v) {
                       return std::visit([&](const auto& d) { return d.forward(t, v); }, b->dw);
                     }),
          image_parity_action<S>(lay), image_parity_action<S>(lay));
      add(p + "ln", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->ln.forward(t, v); }), tok_action,
          tok_action);
      add(p + "mlp", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->mlp(t, v); }), tok_action,
          tok_action);
      add(p + "block", token_shape,
          tape_fn<S>(m, [b](Tape<S>& t, Var v) { return b->forward(t, v); }), tok_action,
          tok_action);
    }
  }

  if (cfg.variant == Variant::equivariant) {
    Shape hidden_shape{tokens, cfg.hidden()};
    add("pointwise_gelu", hidden_shape,
        tape_fn<S>(m,
                   [hid](Tape<S>& t, Var v) {
                     return equivariant_pointwise(t, v, hid, Activation::gelu);
                   }),
        channel_sign_action<S>(hid), channel_sign_action<S>(hid));
    if (cfg.family == Family::resmlp) {
      const Model<S>* mm = m;
      add("final_affine", token_shape,
          tape_fn<S>(m, [mm](Tape<S>& t, Var v) { return mm->final_affine.forward(t, v); }),
          tok_action, tok_action);
    } else {
      const Model<S>* mm = m;
      add("final_ln", token_shape,
          tape_fn<S>(m, [mm](Tape<S>& t, Var v) { return mm->final_ln.forward(t, v); }),
          tok_action, tok_action);
    }
  }
  return out;
}

// End-to-end logit invariance: f(flop(img)) == f(img).
template <typename S>
CheckReport end_to_end_invariance(const Model<S>& model, int n_samples, double tol,
                                  std::uint64_t seed) {
  const Model<S>* m = &model;
  return check_equivariance<S>(
      "logit_invariance", [m](const Tensor<S>& img) { return m->logits(img); },
      image_flop_action<S>(), identity_action<S>(),
      {3, model.cfg.image_size, model.cfg.image_size}, n_samples, tol, seed);
}

// For hybrid models: the feature map at the equivariant/dense transition must
// transform by the prefix's declared representation.
template <typename S>
CheckReport hybrid_boundary_check(const Model<S>& model, int n_samples, double tol,
                                  std::uint64_t seed) {
  detail::require(model.cfg.variant == Variant::hybrid, "boundary check needs a hybrid model");
  const std::string boundary = "block" + std::to_string(model.cfg.equivariant_depth() - 1);
  CheckReport report;
  report.name = "hybrid_boundary";
  report.tol = tol;
  report.n_samples = n_samples;
  report.seed = seed;
  const auto action = token_feature_action<S>(model.token_action(), model.channel_layout());
  for (int s = 0; s < n_samples; ++s) {
    const std::uint64_t sample_seed = seed + static_cast<std::uint64_t>(s);
    Rng rng(sample_seed);
    Tensor<S> img =
        Tensor<S>::normal({3, model.cfg.image_size, model.cfg.image_size}, rng);
    ForwardTrace<S> tr_x, tr_fx;
    model.logits(img, &tr_x);
    model.logits(flop_image(img), &tr_fx);
    const Tensor<S>* fx = tr_fx.find(boundary);
    const Tensor<S>* x = tr_x.find(boundary);
    const double violation = static_cast<double>(max_abs_diff(*fx, action(*x))) /
                             std::max(1.0, static_cast<double>(max_abs(*x)));
    if (violation > report.worst_violation) {
      report.worst_violation = violation;
      report.worst_sample_seed = sample_seed;
    }
  }
  report.passed = report.worst_violation <= tol;
  return report;
}

// ---------------------------------------------------------------------------
// Parameter and feature dumps (EQT1 tensors plus a JSON sidecar manifest).

template <typename S>
void dump_model_params(Model<S>& model, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  for (Param<S>* p : model.params()) {
    const std::string file = p->name + ".eqt1";
    write_eqt1_file(dir + "/" + file, p->value);
    nlohmann::ordered_json entry;
    entry["layer_name"] = p->name;
    entry["type"] = dtype_code<S>() == 0 ? "f32" : "f64";
    entry["layouts"] = {{"n_inv", model.channel_layout().n_inv},
                        {"n_equi", model.channel_layout().n_equi}};
    entry["shapes"] = p->value.shape();
    manifest.push_back(entry);
  }
  std::ofstream os(dir + "/manifest.json");
  os << manifest.dump(2) << "\n";
}

template <typename S>
void dump_features(const Model<S>& model, const Tensor<S>& img, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ForwardTrace<S> trace;
  Tensor<S> out = model.logits(img, &trace);
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  auto dump = [&](const std::string& name, const Tensor<S>& t) {
    write_eqt1_file(dir + "/" + name + ".eqt1", t);
    manifest.push_back(nlohmann::ordered_json{{"name", name}, {"shape", t.shape()}});
  };
  dump("input", img);
  for (const auto& [name, t] : trace.features) dump(name, t);
  dump("logits", out);
  std::ofstream os(dir + "/manifest.json");
  os << manifest.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Desk-scale training demo on a synthetic mirror-invariant task: K random
// prototypes; a sample is a prototype or its flop plus Gaussian noise, the
// label is flop invariant.

struct TrainReport {
  int steps = 0;
  int classes = 0;
  std::vector<double> losses;
  double final_loss = 0;
  double holdout_accuracy = 0;
  double max_invariance_gap = 0;
  bool diverged = false;
  int diverged_step = -1;

  nlohmann::ordered_json to_json() const {
    // Loss curve downsampled to at most 50 points for readability.
    nlohmann::ordered_json curve = nlohmann::ordered_json::array();
    const std::size_t stride = std::max<std::size_t>(1, losses.size() / 50);
    for (std::size_t i = 0; i < losses.size(); i += stride)
      curve.push_back(nlohmann::ordered_json{{"step", i}, {"loss", losses[i]}});
    return nlohmann::ordered_json{{"steps", steps},
                                  {"classes", classes},
                                  {"final_loss", final_loss},
                                  {"holdout_accuracy", holdout_accuracy},
                                  {"max_invariance_gap", max_invariance_gap},
                                  {"diverged", diverged},
                                  {"diverged_step", diverged_step},
                                  {"loss_curve", curve}};
  }
};

struct DemoDataset {
  std::vector<Tensor<float>> prototypes;
  int image_size = 16;
  double noise = 0.1;

  static DemoDataset make(int classes, int image_size, double noise, Rng& rng) {
    DemoDataset d;
    d.image_size = image_size;
    d.noise = noise;
    for (int k = 0; k < classes; ++k)
      d.prototypes.push_back(Tensor<float>::normal({3, image_size, image_size}, rng));
    return d;
  }

  std::pair<Tensor<float>, int> sample(Rng& rng) const {
    const int k = rng.uniform_int(static_cast<int>(prototypes.size()));
    Tensor<float> img = prototypes[static_cast<std::size_t>(k)];
    if (rng.uniform() < 0.5) img = flop_image(img);
    if (noise > 0) {
      for (Index i = 0; i < img.size(); ++i)
        img[i] += static_cast<float>(rng.normal() * noise);
    }
    return {img, k};
  }
};

inline TrainReport train_demo(const ModelConfig& cfg, int steps, double lr, std::uint64_t seed,
                              int classes, double noise = 0.1, int batch = 16) {
  if (cfg.depth > 2 || cfg.width > 32)
    throw UsageError("train_demo is desk scale: depth <= 2 and width <= 32");
  ModelConfig demo_cfg = cfg;
  demo_cfg.num_classes = classes;
  demo_cfg.validate();

  Model<float> model = build_model<float>(demo_cfg, seed);
  Rng data_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  DemoDataset data = DemoDataset::make(classes, demo_cfg.image_size, noise, data_rng);
  auto params = model.params();

  TrainReport report;
  report.steps = steps;
  report.classes = classes;

  for (int step = 0; step < steps; ++step) {
    Tape<float> tape;
    Var total;
    Tensor<float> probe;
    for (int b = 0; b < batch; ++b) {
      auto [img, label] = data.sample(data_rng);
      if (b == 0) probe = img;
      Var logits = model.forward(tape, tape.constant(img));
      Var nll = tape.scale(tape.pick(tape.log_softmax_vec(logits), label), -1.0f);
      total = (b == 0) ? nll : tape.add(total, nll);
    }
    Var loss = tape.scale(total, 1.0f / static_cast<float>(batch));
    const double step_loss = tape.value(loss)[0];
    report.losses.push_back(step_loss);
    if (!std::isfinite(step_loss)) {
      report.diverged = true;
      report.diverged_step = step;
      return report;
    }
    for (auto* p : params) p->zero_grad();
    tape.backward(loss);
    // Global-norm gradient clipping at 1.0, as in the ViT training lineage;
    // the tiny desk-scale init otherwise makes plain SGD cliff-prone.
    double sq = 0;
    for (auto* p : params) sq += p->grad.flat().template cast<double>().squaredNorm();
    const double gnorm = std::sqrt(sq);
    const float step_scale =
        static_cast<float>(gnorm > 1.0 ? lr / gnorm : lr);
    for (auto* p : params)
      p->value.flat() -= step_scale * p->grad.flat();

    const Tensor<float> a = model.logits(probe);
    const Tensor<float> b = model.logits(flop_image(probe));
    report.max_invariance_gap = std::max(report.max_invariance_gap, rel_inf_diff(b, a));
  }
  report.final_loss = report.losses.empty() ? 0.0 : report.losses.back();

  // Balanced holdout: 32 fresh samples per class.
  Rng holdout_rng(seed ^ 0xc2b2ae3d27d4eb4fULL);
  int correct = 0, total_n = 0;
  for (std::size_t k = 0; k < data.prototypes.size(); ++k) {
    for (int i = 0; i < 32; ++i) {
      Tensor<float> img = data.prototypes[k];
      if (holdout_rng.uniform() < 0.5) img = flop_image(img);
      for (Index j = 0; j < img.size(); ++j)
        img[j] += static_cast<float>(holdout_rng.normal() * noise);
      const Tensor<float> logits = model.logits(img);
      Index arg = 0;
      for (Index c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[arg]) arg = c;
      correct += (arg == static_cast<Index>(k));
      ++total_n;
    }
  }
  report.holdout_accuracy = static_cast<double>(correct) / total_n;
  return report;
}

}  // namespace flopnet
