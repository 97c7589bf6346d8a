#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flopnet/autodiff.hpp"
#include "flopnet/symmetry.hpp"
#include "flopnet/tensor.hpp"

namespace flopnet {

enum class Activation { identity, relu, gelu };

constexpr double kWeightInitStd = 0.02;

// Initialization policy for free weights: truncated normal (std 0.02), or
// all zeros for structure-only builds such as counter verification.
struct WeightInit {
  Rng* rng;
  bool zeros = false;
  WeightInit(Rng& r) : rng(&r) {}  // NOLINT: implicit so layers accept a bare Rng
  WeightInit(Rng& r, bool z) : rng(&r), zeros(z) {}

  template <typename S>
  Tensor<S> normal(Shape shape, double stddev = kWeightInitStd) const {
    return zeros ? Tensor<S>::zeros(std::move(shape))
                 : Tensor<S>::trunc_normal(std::move(shape), *rng, stddev);
  }
};

template <typename S>
Var apply_activation(Tape<S>& t, Var x, Activation act) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::relu: return t.relu(x);
    case Activation::gelu: return t.gelu(x);
  }
  throw UsageError("unknown activation");
}

// ---------------------------------------------------------------------------
// Linear layers. Weights are stored input-major (c_in x d_out) so the forward
// pass is y = x * W.

template <typename S>
struct DenseLinear {
  Param<S> weight;
  Param<S> bias;
  bool has_bias = true;

  DenseLinear() = default;
  DenseLinear(const std::string& name, Index c_in, Index d_out, bool with_bias, WeightInit init)
      : weight(name + ".weight", init.normal<S>({c_in, d_out})),
        bias(name + ".bias", Tensor<S>::zeros({d_out})),
        has_bias(with_bias) {}

  Var forward(Tape<S>& t, Var x) const {
    Var y = t.matmul(x, t.param(const_cast<Param<S>&>(weight)));
    if (has_bias) y = t.add_last(y, t.param(const_cast<Param<S>&>(bias)));
    return y;
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }
};

// Equivariant linear map: two parity-preserving blocks, bias only on the
// invariant outputs. The cross-parity blocks are structurally absent.
template <typename S>
struct BlockDiagLinear {
  ParityLayout in;
  ParityLayout out;
  Param<S> w_inv;
  Param<S> w_equi;
  Param<S> bias_inv;
  bool has_bias = true;

  BlockDiagLinear() = default;
  BlockDiagLinear(const std::string& name, ParityLayout in_layout, ParityLayout out_layout,
                  bool with_bias, WeightInit init)
      : in(in_layout),
        out(out_layout),
        w_inv(name + ".w_inv",
              init.normal<S>({in_layout.n_inv, out_layout.n_inv})),
        w_equi(name + ".w_equi",
               init.normal<S>({in_layout.n_equi, out_layout.n_equi})),
        bias_inv(name + ".bias_inv", Tensor<S>::zeros({out_layout.n_inv})),
        has_bias(with_bias) {}

  Var forward(Tape<S>& t, Var x) const {
    detail::require(t.value(x).extent(t.value(x).rank() - 1) == in.total(),
                    "block-diagonal linear layout mismatch");
    Var x_inv = t.slice_last(x, 0, in.n_inv);
    Var x_equi = t.slice_last(x, in.n_inv, in.n_equi);
    Var y_inv = t.matmul(x_inv, t.param(const_cast<Param<S>&>(w_inv)));
    if (has_bias) y_inv = t.add_last(y_inv, t.param(const_cast<Param<S>&>(bias_inv)));
    Var y_equi = t.matmul(x_equi, t.param(const_cast<Param<S>&>(w_equi)));
    return t.concat_last({y_inv, y_equi});
  }

  void collect(std::vector<Param<S>*>& outp) {
    outp.push_back(&w_inv);
    outp.push_back(&w_equi);
    if (has_bias) outp.push_back(&bias_inv);
  }
};

template <typename S>
using AnyLinear = std::variant<DenseLinear<S>, BlockDiagLinear<S>>;

template <typename S>
AnyLinear<S> make_linear(const std::string& name, Index c_in, Index d_out, bool bias,
                         bool equivariant, WeightInit init) {
  if (!equivariant) return DenseLinear<S>(name, c_in, d_out, bias, init);
  return BlockDiagLinear<S>(name, ParityLayout::halves(c_in), ParityLayout::halves(d_out), bias,
                            init);
}

template <typename S>
Var linear_forward(Tape<S>& t, const AnyLinear<S>& lin, Var x) {
  return std::visit([&](const auto& l) { return l.forward(t, x); }, lin);
}

template <typename S>
void linear_collect(AnyLinear<S>& lin, std::vector<Param<S>*>& out) {
  std::visit([&](auto& l) { l.collect(out); }, lin);
}

// ---------------------------------------------------------------------------
// Normalization / diagonal layers.

// Per-token layer normalization. The baseline is the standard form over all
// channels. The equivariant variant computes the same full-vector statistics
// in the paired butterfly basis of the pointwise construction: there the
// channel sign action becomes a channel permutation, which commutes with
// normalization, so equivariance is exact. Both statistics (invariant-half
// mean and full second moment) are flop invariant. The learnable shift is
// restricted to invariant channels.
template <typename S>
struct LayerNorm {
  ParityLayout layout;
  bool equivariant = false;
  S eps = S(1e-6);
  Param<S> gamma;
  Param<S> beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Index d, bool equi)
      : layout(equi ? ParityLayout::halves(d) : ParityLayout{d, 0}),
        equivariant(equi),
        gamma(name + ".gamma", Tensor<S>::ones({d})),
        beta(name + ".beta", Tensor<S>::zeros({equi ? d / 2 : d})) {}

  Var forward(Tape<S>& t, Var x) const {
    Var y;
    if (!equivariant) {
      y = t.layernorm_rows(x, eps);
    } else {
      const S c = S(1) / std::sqrt(S(2));
      Var x1 = t.slice_last(x, 0, layout.n_inv);
      Var x2 = t.slice_last(x, layout.n_inv, layout.n_equi);
      Var s = t.scale(t.add(x1, x2), c);
      Var u = t.scale(t.sub(x1, x2), c);
      Var n = t.layernorm_rows(t.concat_last({s, u}), eps);
      Var ns = t.slice_last(n, 0, layout.n_inv);
      Var nu = t.slice_last(n, layout.n_inv, layout.n_equi);
      y = t.concat_last({t.scale(t.add(ns, nu), c), t.scale(t.sub(ns, nu), c)});
    }
    y = t.scale_last(y, t.param(const_cast<Param<S>&>(gamma)));
    Var b = t.param(const_cast<Param<S>&>(beta));
    if (equivariant) b = t.concat_last({b, t.constant(Tensor<S>::zeros({layout.n_equi}))});
    return t.add_last(y, b);
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Diag(alpha) x + beta with beta fixed to zero on sign-flip channels.
template <typename S>
struct Affine {
  Index width = 0;
  bool equivariant = false;
  Param<S> alpha;
  Param<S> beta;

  Affine() = default;
  Affine(const std::string& name, Index d, bool equi)
      : width(d),
        equivariant(equi),
        alpha(name + ".alpha", Tensor<S>::ones({d})),
        beta(name + ".beta", Tensor<S>::zeros({equi ? d / 2 : d})) {}

  Var forward(Tape<S>& t, Var x) const {
    Var y = t.scale_last(x, t.param(const_cast<Param<S>&>(alpha)));
    Var b = t.param(const_cast<Param<S>&>(beta));
    if (equivariant) b = t.concat_last({b, t.constant(Tensor<S>::zeros({width / 2}))});
    return t.add_last(y, b);
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&alpha);
    out.push_back(&beta);
  }
};

template <typename S>
struct LayerScale {
  Param<S> lambda;

  LayerScale() = default;
  LayerScale(const std::string& name, Index d, S init)
      : lambda(name + ".lambda", Tensor<S>::constant({d}, init)) {}

  Var forward(Tape<S>& t, Var x) const {
    return t.scale_last(x, t.param(const_cast<Param<S>&>(lambda)));
  }

  void collect(std::vector<Param<S>*>& out) { out.push_back(&lambda); }
};

// ---------------------------------------------------------------------------
// Equivariant pointwise nonlinearity: butterfly to the "spatial" pair basis,
// apply sigma, butterfly back. Channel i pairs with channel i + d/2; the
// 1/sqrt(2) factors preserve feature norms and make the butterfly an
// involution (sigma = identity gives the identity map).
template <typename S>
Var equivariant_pointwise(Tape<S>& t, Var x, const ParityLayout& layout, Activation act) {
  if (layout.n_inv != layout.n_equi)
    throw UsageError("equivariant pointwise needs equal invariant/sign-flip channel counts");
  const S c = S(1) / std::sqrt(S(2));
  Var x1 = t.slice_last(x, 0, layout.n_inv);
  Var x2 = t.slice_last(x, layout.n_inv, layout.n_equi);
  Var s = apply_activation(t, t.scale(t.add(x1, x2), c), act);
  Var u = apply_activation(t, t.scale(t.sub(x1, x2), c), act);
  Var y1 = t.scale(t.add(s, u), c);
  Var y2 = t.scale(t.sub(s, u), c);
  return t.concat_last({y1, y2});
}

// ---------------------------------------------------------------------------
// Multi-head self-attention. In the equivariant variant every head owns
// matching slices of the invariant and sign-flip halves, so the per-head dot
// products q.k = q_inv.k_inv + q_equi.k_equi are flopping invariant and the
// token-token matmuls cost exactly what they do in the dense variant.
template <typename S>
struct MultiHeadAttention {
  Index width = 0;
  Index heads = 0;
  bool equivariant = false;
  AnyLinear<S> wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, Index d, Index n_heads, bool equi, WeightInit init)
      : width(d), heads(n_heads), equivariant(equi) {
    if (n_heads < 1 || d % n_heads != 0)
      throw ConfigError("attention width must divide evenly into heads");
    if (equi && (d / n_heads) % 2 != 0)
      throw ConfigError("equivariant attention needs an even per-head width");
    wq = make_linear<S>(name + ".wq", d, d, true, equi, init);
    wk = make_linear<S>(name + ".wk", d, d, true, equi, init);
    wv = make_linear<S>(name + ".wv", d, d, true, equi, init);
    wo = make_linear<S>(name + ".wo", d, d, true, equi, init);
  }

  Var forward(Tape<S>& t, Var x) const {
    Var q = linear_forward(t, wq, x);
    Var k = linear_forward(t, wk, x);
    Var v = linear_forward(t, wv, x);
    const Index dh = width / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    auto head_slice = [&](Var m, Index h) {
      if (!equivariant) return t.slice_last(m, h * dh, dh);
      const Index half = dh / 2;
      return t.concat_last({t.slice_last(m, h * half, half),
                            t.slice_last(m, width / 2 + h * half, half)});
    };
    std::vector<Var> inv_parts, equi_parts, parts;
    for (Index h = 0; h < heads; ++h) {
      Var qh = head_slice(q, h);
      Var kh = head_slice(k, h);
      Var vh = head_slice(v, h);
      Var scores = t.scale(t.matmul(qh, t.transpose(kh)), scale);
      Var attn = t.softmax_rows(scores);
      Var oh = t.matmul(attn, vh);
      if (!equivariant) {
        parts.push_back(oh);
      } else {
        inv_parts.push_back(t.slice_last(oh, 0, dh / 2));
        equi_parts.push_back(t.slice_last(oh, dh / 2, dh / 2));
      }
    }
    Var merged;
    if (!equivariant) {
      merged = t.concat_last(parts);
    } else {
      std::vector<Var> ordered = inv_parts;
      ordered.insert(ordered.end(), equi_parts.begin(), equi_parts.end());
      merged = t.concat_last(ordered);
    }
    return linear_forward(t, wo, merged);
  }

  void collect(std::vector<Param<S>*>& out) {
    linear_collect(wq, out);
    linear_collect(wk, out);
    linear_collect(wv, out);
    linear_collect(wo, out);
  }
};

// ---------------------------------------------------------------------------
// Patch embedding: strided convolution with stride = kernel size. Tokens come
// out in row-major grid order (tokens x F).

template <typename S>
Var conv_to_tokens(Tape<S>& t, Var conv_out) {
  const Tensor<S>& v = t.value(conv_out);
  const Index f = v.extent(0), grid = v.extent(1) * v.extent(2);
  return t.transpose(t.reshape(conv_out, {f, grid}));
}

template <typename S>
struct DensePatchEmbed {
  Index patch = 0;
  Param<S> filters;  // (F, C, P, P)
  Param<S> bias;     // (F)

  DensePatchEmbed() = default;
  DensePatchEmbed(const std::string& name, Index f, Index c, Index p, WeightInit init)
      : patch(p),
        filters(name + ".filters", init.normal<S>({f, c, p, p})),
        bias(name + ".bias", Tensor<S>::zeros({f})) {}

  Var forward(Tape<S>& t, Var img) const {
    Var out = t.conv2d(img, t.param(const_cast<Param<S>&>(filters)), patch, 0, false);
    Var tokens = conv_to_tokens(t, out);
    return t.add_last(tokens, t.param(const_cast<Param<S>&>(bias)));
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&filters);
    out.push_back(&bias);
  }
};

// Half the filters are horizontally symmetric, half antisymmetric; only the
// left half-columns are free parameters. Output channels [0, F/2) are
// invariant, the rest sign-flip; the bias lives on the invariant outputs.
//
// Because the stride equals the kernel size, the constrained correlation
// factors exactly: fold mirrored patch columns into sums and differences,
// then apply the free half-filters as a linear map. Same function as a
// strided convolution with the materialized filters, at half the MACs.
template <typename S>
struct EquivariantPatchEmbed {
  Index patch = 0;
  Param<S> sym_free;   // (F/2, C, P, P/2)
  Param<S> anti_free;  // (F/2, C, P, P/2)
  Param<S> bias_sym;   // (F/2)

  EquivariantPatchEmbed() = default;
  EquivariantPatchEmbed(const std::string& name, Index f, Index c, Index p, WeightInit init)
      : patch(p) {
    if (p % 2 != 0)
      throw ConfigError("equivariant patch embedding requires an even patch size");
    if (f % 2 != 0)
      throw ConfigError("equivariant patch embedding requires an even filter count");
    sym_free = Param<S>(name + ".sym_free",
                        init.normal<S>({f / 2, c, p, p / 2}));
    anti_free = Param<S>(name + ".anti_free",
                         init.normal<S>({f / 2, c, p, p / 2}));
    bias_sym = Param<S>(name + ".bias_sym", Tensor<S>::zeros({f / 2}));
  }

  Var materialized_filters(Tape<S>& t) const {
    Var sym = t.mirror_expand(t.param(const_cast<Param<S>&>(sym_free)), 3, patch, +1);
    Var anti = t.mirror_expand(t.param(const_cast<Param<S>&>(anti_free)), 3, patch, -1);
    return t.concat_first({sym, anti});
  }

  // Pixel gather turning (C,H,W) into (tokens, C*P*P) patch rows laid out as
  // [left half-columns | mirrored right half-columns].
  std::vector<Index> patch_gather(Index c, Index h, Index w) const {
    const Index p = patch, gh = h / p, gw = w / p, half = c * p * (p / 2);
    std::vector<Index> perm(static_cast<std::size_t>(gh * gw * c * p * p));
    Index t = 0;
    for (Index gi = 0; gi < gh; ++gi)
      for (Index gj = 0; gj < gw; ++gj, ++t) {
        const Index base = t * c * p * p;
        Index q = 0;
        for (Index ch = 0; ch < c; ++ch)
          for (Index r = 0; r < p; ++r)
            for (Index j = 0; j < p / 2; ++j, ++q) {
              const Index row = gi * p + r;
              perm[base + q] = (ch * h + row) * w + gj * p + j;
              perm[base + half + q] = (ch * h + row) * w + gj * p + (p - 1 - j);
            }
      }
    return perm;
  }

  Var forward(Tape<S>& t, Var img) const {
    const Tensor<S>& im = t.value(img);
    const Index c = im.extent(0), h = im.extent(1), w = im.extent(2);
    detail::require(h % patch == 0 && w % patch == 0,
                    "image extents must be divisible by the patch size");
    const Index tokens = (h / patch) * (w / patch);
    const Index half = c * patch * (patch / 2);
    const Index f_half = sym_free.value.extent(0);

    Var flat = t.reshape(img, {c * h * w, Index(1)});
    Var patches = t.reshape(t.permute_first(flat, patch_gather(c, h, w)), {tokens, 2 * half});
    Var left = t.slice_last(patches, 0, half);
    Var right = t.slice_last(patches, half, half);
    Var folded_sum = t.add(left, right);
    Var folded_diff = t.sub(left, right);

    Var w_sym = t.transpose(t.reshape(t.param(const_cast<Param<S>&>(sym_free)), {f_half, half}));
    Var w_anti =
        t.transpose(t.reshape(t.param(const_cast<Param<S>&>(anti_free)), {f_half, half}));
    Var y_sym = t.matmul(folded_sum, w_sym);
    Var y_anti = t.matmul(folded_diff, w_anti);
    Var tokens_out = t.concat_last({y_sym, y_anti});
    Var b = t.concat_last({t.param(const_cast<Param<S>&>(bias_sym)),
                           t.constant(Tensor<S>::zeros({f_half}))});
    return t.add_last(tokens_out, b);
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&sym_free);
    out.push_back(&anti_free);
    out.push_back(&bias_sym);
  }
};

// ---------------------------------------------------------------------------
// Positional embedding over the patch grid. The mirrored variant stores the
// left half-columns only; invariant channels mirror symmetrically across the
// vertical midline and sign-flip channels antisymmetrically, so the symmetry
// constraint cannot be violated by training.
template <typename S>
struct PosEmbed {
  Index grid_h = 0, grid_w = 0, width = 0;
  bool equivariant = false;
  Param<S> full;       // baseline: (grid_h*grid_w, d)
  Param<S> half_inv;   // (grid_h, grid_w/2, d/2)
  Param<S> half_equi;  // (grid_h, grid_w/2, d/2)

  PosEmbed() = default;
  PosEmbed(const std::string& name, Index gh, Index gw, Index d, bool equi, WeightInit init)
      : grid_h(gh), grid_w(gw), width(d), equivariant(equi) {
    if (!equi) {
      full = Param<S>(name + ".full", init.normal<S>({gh * gw, d}));
      return;
    }
    if (gw % 2 != 0)
      throw ConfigError("mirrored positional embedding requires an even grid width");
    half_inv = Param<S>(name + ".half_inv",
                        init.normal<S>({gh, gw / 2, d / 2}));
    half_equi = Param<S>(name + ".half_equi",
                         init.normal<S>({gh, gw / 2, d / 2}));
  }

  Var materialize(Tape<S>& t) const {
    if (!equivariant) return t.param(const_cast<Param<S>&>(full));
    Var inv = t.mirror_expand(t.param(const_cast<Param<S>&>(half_inv)), 1, grid_w, +1);
    Var equi = t.mirror_expand(t.param(const_cast<Param<S>&>(half_equi)), 1, grid_w, -1);
    return t.reshape(t.concat_last({inv, equi}), {grid_h * grid_w, width});
  }

  Var add_to(Tape<S>& t, Var tokens) const { return t.add(tokens, materialize(t)); }

  void collect(std::vector<Param<S>*>& out) {
    if (equivariant) {
      out.push_back(&half_inv);
      out.push_back(&half_equi);
    } else {
      out.push_back(&full);
    }
  }
};

// Learnable classification token; the sign-flip half is structurally zero in
// the equivariant variant. Initialized to zero like the original ViT token.
template <typename S>
struct ClassToken {
  Index width = 0;
  bool equivariant = false;
  Param<S> token;  // (d) or (d/2)

  ClassToken() = default;
  ClassToken(const std::string& name, Index d, bool equi)
      : width(d),
        equivariant(equi),
        token(name + ".token", Tensor<S>::zeros({equi ? d / 2 : d})) {}

  Var prepend(Tape<S>& t, Var tokens) const {
    Var tok = t.param(const_cast<Param<S>&>(token));
    if (equivariant) tok = t.concat_last({tok, t.constant(Tensor<S>::zeros({width / 2}))});
    return t.concat_first({t.reshape(tok, {Index(1), width}), tokens});
  }

  void collect(std::vector<Param<S>*>& out) { out.push_back(&token); }
};

// ---------------------------------------------------------------------------
// ResMLP cross-patch mixing.

template <typename S>
struct DensePatchMix {
  Param<S> weight;  // (T x T), y = W x
  Param<S> bias;    // (T), shared over channels

  DensePatchMix() = default;
  DensePatchMix(const std::string& name, Index tokens, WeightInit init)
      : weight(name + ".weight", init.normal<S>({tokens, tokens})),
        bias(name + ".bias", Tensor<S>::zeros({tokens})) {}

  Var forward(Tape<S>& t, Var x) const {
    Var y = t.matmul(t.param(const_cast<Param<S>&>(weight)), x);
    return t.add_first(y, t.param(const_cast<Param<S>&>(bias)));
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

// Token order for the patch-parity butterfly: left-column tokens first, then
// their mirror partners in matching order.
inline std::vector<Index> patch_pair_gather(Index grid_h, Index grid_w) {
  const Index half = grid_h * (grid_w / 2);
  std::vector<Index> perm(static_cast<std::size_t>(2 * half));
  for (Index i = 0; i < grid_h; ++i)
    for (Index j = 0; j < grid_w / 2; ++j) {
      perm[i * (grid_w / 2) + j] = i * grid_w + j;
      perm[half + i * (grid_w / 2) + j] = i * grid_w + (grid_w - 1 - j);
    }
  return perm;
}

inline std::vector<Index> invert_permutation(const std::vector<Index>& perm) {
  std::vector<Index> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = i;
  return inv;
}

// Block-diagonal linear map over the patch axis in the patch-parity basis:
// w_sym mixes the patch-symmetric tensors, w_anti the patch-antisymmetric
// ones, for both channel parities. No bias: a token-axis bias shared over
// all channels would have to be both invariant and sign-flipped under
// flopping, hence zero.
template <typename S>
struct ParityPatchMix {
  Index grid_h = 0, grid_w = 0;
  Param<S> w_sym;   // (T/2 x T/2)
  Param<S> w_anti;  // (T/2 x T/2)
  std::vector<Index> gather, scatter;

  ParityPatchMix() = default;
  ParityPatchMix(const std::string& name, Index gh, Index gw, WeightInit init)
      : grid_h(gh), grid_w(gw) {
    if (gw % 2 != 0) throw ConfigError("parity patch mixing requires an even grid width");
    const Index half = gh * gw / 2;
    w_sym = Param<S>(name + ".w_sym", init.normal<S>({half, half}));
    w_anti = Param<S>(name + ".w_anti",
                      init.normal<S>({half, half}));
    gather = patch_pair_gather(gh, gw);
    scatter = invert_permutation(gather);
  }

  Var forward(Tape<S>& t, Var x) const {
    const Index half = grid_h * grid_w / 2;
    const S c = S(1) / std::sqrt(S(2));
    Var xr = t.permute_first(x, gather);
    Var left = t.slice_first(xr, 0, half);
    Var right = t.slice_first(xr, half, half);
    Var even = t.scale(t.add(left, right), c);
    Var odd = t.scale(t.sub(left, right), c);
    Var y_even = t.matmul(t.param(const_cast<Param<S>&>(w_sym)), even);
    Var y_odd = t.matmul(t.param(const_cast<Param<S>&>(w_anti)), odd);
    Var out_left = t.scale(t.add(y_even, y_odd), c);
    Var out_right = t.scale(t.sub(y_even, y_odd), c);
    return t.permute_first(t.concat_first({out_left, out_right}), scatter);
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&w_sym);
    out.push_back(&w_anti);
  }
};

// Spec-level form of the same operation on explicit patch-parity tensors.
template <typename S>
PatchParityTensors<S> resmlp_patch_mix(const PatchParityTensors<S>& x, const Tensor<S>& w_sym,
                                       const Tensor<S>& w_anti) {
  PatchParityTensors<S> y;
  y.grid_h = x.grid_h;
  y.grid_w = x.grid_w;
  y.inv_sym = matmul(w_sym, x.inv_sym);
  y.equi_sym = matmul(w_sym, x.equi_sym);
  y.inv_anti = matmul(w_anti, x.inv_anti);
  y.equi_anti = matmul(w_anti, x.equi_anti);
  return y;
}

// ---------------------------------------------------------------------------
// Depthwise 7x7 convolutions (same padding).

template <typename S>
struct DenseDepthwiseConv {
  Index kernel = 7;
  Param<S> filters;  // (d, 1, k, k)
  Param<S> bias;     // (d)

  DenseDepthwiseConv() = default;
  DenseDepthwiseConv(const std::string& name, Index d, Index k, WeightInit init)
      : kernel(k),
        filters(name + ".filters", init.normal<S>({d, 1, k, k})),
        bias(name + ".bias", Tensor<S>::zeros({d})) {}

  Var forward(Tape<S>& t, Var img) const {
    const Shape shape = t.value(img).shape();
    const Index d = shape[0], hw = shape[1] * shape[2];
    Var out = t.conv2d(img, t.param(const_cast<Param<S>&>(filters)), 1, (kernel - 1) / 2, true);
    out = t.reshape(out, {d, hw});
    out = t.add_first(out, t.param(const_cast<Param<S>&>(bias)));
    return t.reshape(out, shape);
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&filters);
    out.push_back(&bias);
  }
};

// Parity-alternating depthwise convolution: within each channel half, even
// local indices get horizontally symmetric filters and odd indices get
// antisymmetric ones. Parity algebra per channel:
//   inv*sym -> inv, inv*anti -> equi, equi*sym -> equi, equi*anti -> inv,
// and a fixed output permutation restores the invariant-first layout so the
// residual connection type-checks.
template <typename S>
struct ParityDepthwiseConv {
  ParityLayout layout;
  Index kernel = 7;
  Param<S> sym_free;   // (n_sym, k, ceil(k/2))
  Param<S> anti_free;  // (n_anti, k, floor(k/2))
  Param<S> bias_inv;   // (d/2)
  std::vector<Index> filter_order;  // channel -> slab in [sym | anti] stack
  std::vector<Index> restore_perm;  // output target -> conv output channel

  ParityDepthwiseConv() = default;
  ParityDepthwiseConv(const std::string& name, ParityLayout lay, Index k, WeightInit init)
      : layout(lay), kernel(k) {
    if (layout.n_inv != layout.n_equi)
      throw UsageError("parity depthwise conv needs equal channel halves");
    const Index m = layout.n_inv;
    const Index d = 2 * m;
    std::vector<Index> sym_channels, anti_channels;
    std::vector<bool> is_sym(static_cast<std::size_t>(d));
    for (Index c = 0; c < d; ++c) {
      const Index local = c < m ? c : c - m;
      const bool sym = (local % 2 == 0);
      is_sym[static_cast<std::size_t>(c)] = sym;
      (sym ? sym_channels : anti_channels).push_back(c);
    }
    const Index n_sym = static_cast<Index>(sym_channels.size());
    const Index n_anti = static_cast<Index>(anti_channels.size());
    sym_free = Param<S>(name + ".sym_free",
                        init.normal<S>({n_sym, k, (k + 1) / 2}));
    anti_free = Param<S>(name + ".anti_free",
                         init.normal<S>({n_anti, k, k / 2}));
    bias_inv = Param<S>(name + ".bias_inv", Tensor<S>::zeros({m}));

    filter_order.resize(static_cast<std::size_t>(d));
    for (Index i = 0; i < n_sym; ++i) filter_order[sym_channels[i]] = i;
    for (Index i = 0; i < n_anti; ++i) filter_order[anti_channels[i]] = n_sym + i;

    // Output channel c has invariant parity iff input parity matches filter parity.
    std::vector<Index> out_inv, out_equi;
    for (Index c = 0; c < d; ++c) {
      const bool input_inv = c < m;
      const bool out_is_inv = (input_inv == is_sym[static_cast<std::size_t>(c)]);
      (out_is_inv ? out_inv : out_equi).push_back(c);
    }
    detail::require(static_cast<Index>(out_inv.size()) == m,
                    "parity assignment failed to balance output parities");
    restore_perm = out_inv;
    restore_perm.insert(restore_perm.end(), out_equi.begin(), out_equi.end());
  }

  Var materialized_filters(Tape<S>& t) const {
    Var sym = t.mirror_expand(t.param(const_cast<Param<S>&>(sym_free)), 2, kernel, +1);
    Var anti = t.mirror_expand(t.param(const_cast<Param<S>&>(anti_free)), 2, kernel, -1);
    Var stacked = t.concat_first({sym, anti});
    Var ordered = t.permute_first(stacked, filter_order);
    const Index d = layout.total();
    return t.reshape(ordered, {d, Index(1), kernel, kernel});
  }

  Var forward(Tape<S>& t, Var img) const {
    const Shape shape = t.value(img).shape();
    detail::require(shape[0] == layout.total(), "channel extent does not match layout");
    const Index d = shape[0], hw = shape[1] * shape[2];
    Var out = t.conv2d(img, materialized_filters(t), 1, (kernel - 1) / 2, true);
    out = t.permute_first(out, restore_perm);
    Var b = t.concat_last({t.param(const_cast<Param<S>&>(bias_inv)),
                           t.constant(Tensor<S>::zeros({layout.n_equi}))});
    out = t.add_first(t.reshape(out, {d, hw}), b);
    return t.reshape(out, shape);
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&sym_free);
    out.push_back(&anti_free);
    out.push_back(&bias_inv);
  }
};

// ---------------------------------------------------------------------------
// Reduced-multiplication 1-d correlation for (anti)symmetric filters: mirror
// taps are pre-combined so each output needs ceil(k/2) multiplications for a
// symmetric filter and floor(k/2) for an antisymmetric one. Instrumented
// operation counts are returned for verification.

enum class FilterParity { symmetric, antisymmetric };

template <typename S>
struct Corr1dResult {
  Tensor<S> output;
  std::uint64_t mult_count = 0;
  std::uint64_t add_count = 0;
};

inline Index corr1d_half_len(Index k, FilterParity parity) {
  return parity == FilterParity::symmetric ? (k + 1) / 2 : k / 2;
}

template <typename S>
Tensor<S> materialize_filter_1d(const Tensor<S>& half, Index k, FilterParity parity) {
  detail::require(half.rank() == 1 && half.extent(0) == corr1d_half_len(k, parity),
                  "filter half length mismatch");
  Tensor<S> f({k});
  for (Index j = 0; j < k / 2; ++j) {
    f[j] = half[j];
    f[k - 1 - j] = parity == FilterParity::symmetric ? half[j] : -half[j];
  }
  if (k % 2 == 1) f[k / 2] = parity == FilterParity::symmetric ? half[k / 2] : S(0);
  return f;
}

template <typename S>
Corr1dResult<S> reduced_symmetric_correlation_1d(const Tensor<S>& signal,
                                                 const Tensor<S>& filter_half, Index k,
                                                 FilterParity parity) {
  if (k < 2) throw UsageError("reduced correlation needs kernel size >= 2");
  detail::require(signal.rank() == 1, "signal must be rank 1");
  const Index n = signal.extent(0);
  detail::require(n >= k, "signal shorter than kernel");
  detail::require(filter_half.extent(0) == corr1d_half_len(k, parity),
                  "filter half length mismatch");
  const bool sym = parity == FilterParity::symmetric;

  Corr1dResult<S> res;
  res.output = Tensor<S>({n - k + 1});
  for (Index p = 0; p <= n - k; ++p) {
    S acc = 0;
    bool first = true;
    for (Index j = 0; j < k / 2; ++j) {
      const S pair = sym ? signal[p + j] + signal[p + k - 1 - j]
                         : signal[p + j] - signal[p + k - 1 - j];
      ++res.add_count;
      const S term = filter_half[j] * pair;
      ++res.mult_count;
      if (!first) ++res.add_count;
      acc += term;
      first = false;
    }
    if (sym && k % 2 == 1) {
      const S term = filter_half[k / 2] * signal[p + k / 2];
      ++res.mult_count;
      if (!first) ++res.add_count;
      acc += term;
    }
    res.output[p] = acc;
  }
  return res;
}

}  // namespace flopnet
