#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "flopnet/tensor.hpp"

namespace flopnet {

// A learnable tensor with its gradient accumulator. The gradient buffer is
// allocated on first use so inference-only models pay nothing for it.
template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Param() = default;
  Param(std::string n, Tensor<S> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() { grad = Tensor<S>::zeros(value.shape()); }
  void ensure_grad() {
    if (grad.shape() != value.shape()) zero_grad();
  }
};

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Records primitive applications in execution order; node i only references
// nodes < i, so walking ids backward is a reverse topological order.
// Single-owner: one forward graph, one backward sweep.
template <typename S>
class Tape {
 public:
  struct Counters {
    std::uint64_t matmul_macs = 0;
    std::uint64_t conv_macs = 0;
  };

  // References returned by value() are invalidated by the next recorded op.
  Var constant(Tensor<S> v) { return push(std::move(v), {}); }

  // Parameter values are borrowed, not copied; the Param must outlive the
  // tape and stay unmodified until the tape's last use.
  Var param(Param<S>& p) {
    Param<S>* ptr = &p;
    Node node;
    node.borrowed = &p.value;
    node.backward = [ptr](Tape&, const Tensor<S>& g) {
      ptr->ensure_grad();
      ptr->grad.flat() += g.flat();
    };
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Tensor<S>& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.borrowed ? *n.borrowed : n.value;
  }
  Index num_nodes() const { return static_cast<Index>(nodes_.size()); }
  const Counters& counters() const { return counters_; }

  // ---- primitives -------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor<S>& ta = value(a);
    const Tensor<S>& tb = value(b);
    counters_.matmul_macs += static_cast<std::uint64_t>(ta.extent(0)) * ta.extent(1) *
                             tb.extent(1);
    return push(flopnet::matmul(ta, tb), [a, b](Tape& t, const Tensor<S>& g) {
      const Tensor<S>& va = t.value(a);
      const Tensor<S>& vb = t.value(b);
      Tensor<S> ga({va.extent(0), va.extent(1)});
      ga.matrix().noalias() = g.matrix() * vb.matrix().transpose();
      t.accum(a, std::move(ga));
      Tensor<S> gb({vb.extent(0), vb.extent(1)});
      gb.matrix().noalias() = va.matrix().transpose() * g.matrix();
      t.accum(b, std::move(gb));
    });
  }

  Var transpose(Var a) {
    return push(transpose2d(value(a)),
                [a](Tape& t, const Tensor<S>& g) { t.accum(a, transpose2d(g)); });
  }

  Var conv2d(Var input, Var filters, Index stride, Index pad, bool depthwise) {
    const Tensor<S>& in = value(input);
    const Tensor<S>& w = value(filters);
    Tensor<S> out = flopnet::conv2d(in, w, stride, pad, depthwise);
    counters_.conv_macs += conv2d_macs(in.extent(0), out.extent(0), out.extent(1), out.extent(2),
                                       w.extent(2), w.extent(3), depthwise);
    return push(std::move(out), [input, filters, stride, pad, depthwise](Tape& t,
                                                                         const Tensor<S>& g) {
      const Tensor<S>& in = t.value(input);
      const Tensor<S>& w = t.value(filters);
      const Index c = in.extent(0), h = in.extent(1), wd = in.extent(2);
      const Index f = g.extent(0), oh = g.extent(1), ow = g.extent(2);
      const Index kh = w.extent(2), kw = w.extent(3);
      Tensor<S> gin(in.shape());
      Tensor<S> gw(w.shape());
      for (Index fo = 0; fo < f; ++fo) {
        const Index c_lo = depthwise ? fo : 0;
        const Index c_hi = depthwise ? fo + 1 : c;
        for (Index oy = 0; oy < oh; ++oy)
          for (Index ox = 0; ox < ow; ++ox) {
            const S go = g(fo, oy, ox);
            if (go == S(0)) continue;
            for (Index ch = c_lo; ch < c_hi; ++ch) {
              const Index wc = depthwise ? 0 : ch;
              for (Index i = 0; i < kh; ++i) {
                const Index iy = oy * stride + i - pad;
                if (iy < 0 || iy >= h) continue;
                for (Index j = 0; j < kw; ++j) {
                  const Index ix = ox * stride + j - pad;
                  if (ix < 0 || ix >= wd) continue;
                  gin(ch, iy, ix) += go * w(fo, wc, i, j);
                  gw(fo, wc, i, j) += go * in(ch, iy, ix);
                }
              }
            }
          }
      }
      t.accum(input, std::move(gin));
      t.accum(filters, std::move(gw));
    });
  }

  Var add(Var a, Var b) {
    detail::require(value(a).shape() == value(b).shape(), "add shape mismatch");
    Tensor<S> out(value(a).shape());
    out.flat() = value(a).flat() + value(b).flat();
    return push(std::move(out), [a, b](Tape& t, const Tensor<S>& g) {
      t.accum(a, g);
      t.accum(b, g);
    });
  }

  Var sub(Var a, Var b) {
    detail::require(value(a).shape() == value(b).shape(), "sub shape mismatch");
    Tensor<S> out(value(a).shape());
    out.flat() = value(a).flat() - value(b).flat();
    return push(std::move(out), [a, b](Tape& t, const Tensor<S>& g) {
      t.accum(a, g);
      Tensor<S> gb(g.shape());
      gb.flat() = -g.flat();
      t.accum(b, std::move(gb));
    });
  }

  Var mul(Var a, Var b) {
    detail::require(value(a).shape() == value(b).shape(), "mul shape mismatch");
    Tensor<S> out(value(a).shape());
    out.flat() = value(a).flat().cwiseProduct(value(b).flat());
    return push(std::move(out), [a, b](Tape& t, const Tensor<S>& g) {
      Tensor<S> ga(g.shape()), gb(g.shape());
      ga.flat() = g.flat().cwiseProduct(t.value(b).flat());
      gb.flat() = g.flat().cwiseProduct(t.value(a).flat());
      t.accum(a, std::move(ga));
      t.accum(b, std::move(gb));
    });
  }

  Var scale(Var a, S c) {
    Tensor<S> out(value(a).shape());
    out.flat() = value(a).flat() * c;
    return push(std::move(out), [a, c](Tape& t, const Tensor<S>& g) {
      Tensor<S> ga(g.shape());
      ga.flat() = g.flat() * c;
      t.accum(a, std::move(ga));
    });
  }

  // x viewed as (rows x C) with C = last extent; b has length C.
  Var add_last(Var x, Var b) {
    const Tensor<S>& tx = value(x);
    const Tensor<S>& tb = value(b);
    const Index c = tx.extent(tx.rank() - 1);
    detail::require(tb.rank() == 1 && tb.extent(0) == c, "add_last bias length mismatch");
    Tensor<S> out = tx;
    out.matrix(tx.size() / c, c).rowwise() += tb.flat().transpose();
    return push(std::move(out), [x, b, c](Tape& t, const Tensor<S>& g) {
      t.accum(x, g);
      Tensor<S> gb({c});
      gb.flat() = g.matrix(g.size() / c, c).colwise().sum().transpose();
      t.accum(b, std::move(gb));
    });
  }

  Var scale_last(Var x, Var s) {
    const Tensor<S>& tx = value(x);
    const Tensor<S>& ts = value(s);
    const Index c = tx.extent(tx.rank() - 1);
    detail::require(ts.rank() == 1 && ts.extent(0) == c, "scale_last length mismatch");
    Tensor<S> out = tx;
    out.matrix(tx.size() / c, c).array().rowwise() *= ts.flat().transpose().array();
    return push(std::move(out), [x, s, c](Tape& t, const Tensor<S>& g) {
      const Tensor<S>& vx = t.value(x);
      const Tensor<S>& vs = t.value(s);
      Tensor<S> gx(vx.shape());
      gx.matrix(vx.size() / c, c).array() =
          g.matrix(g.size() / c, c).array().rowwise() * vs.flat().transpose().array();
      t.accum(x, std::move(gx));
      Tensor<S> gs({c});
      gs.flat() = g.matrix(g.size() / c, c)
                      .cwiseProduct(vx.matrix(vx.size() / c, c))
                      .colwise()
                      .sum()
                      .transpose();
      t.accum(s, std::move(gs));
    });
  }

  // x viewed as (R x cols) with R = first extent; b has length R.
  Var add_first(Var x, Var b) {
    const Tensor<S>& tx = value(x);
    const Tensor<S>& tb = value(b);
    const Index r = tx.extent(0);
    detail::require(tb.rank() == 1 && tb.extent(0) == r, "add_first bias length mismatch");
    Tensor<S> out = tx;
    out.matrix(r, tx.size() / r).colwise() += tb.flat();
    return push(std::move(out), [x, b, r](Tape& t, const Tensor<S>& g) {
      t.accum(x, g);
      Tensor<S> gb({r});
      gb.flat() = g.matrix(r, g.size() / r).rowwise().sum();
      t.accum(b, std::move(gb));
    });
  }

  Var slice_last(Var x, Index begin, Index count) {
    const Tensor<S>& tx = value(x);
    const Index c = tx.extent(tx.rank() - 1);
    detail::require(begin >= 0 && count > 0 && begin + count <= c, "slice_last out of range");
    Shape oshape = tx.shape();
    oshape.back() = count;
    Tensor<S> out(oshape);
    const Index rows = tx.size() / c;
    out.matrix(rows, count) = tx.matrix(rows, c).middleCols(begin, count);
    return push(std::move(out), [x, begin, count, c](Tape& t, const Tensor<S>& g) {
      const Index rows = g.size() / count;
      Tensor<S> gx(t.value(x).shape());
      gx.matrix(rows, c).middleCols(begin, count) = g.matrix(rows, count);
      t.accum(x, std::move(gx));
    });
  }

  Var concat_last(const std::vector<Var>& xs) {
    detail::require(!xs.empty(), "concat_last needs at least one input");
    const Tensor<S>& t0 = value(xs[0]);
    Index total_c = 0;
    std::vector<Index> widths;
    for (Var v : xs) {
      const Tensor<S>& tv = value(v);
      detail::require(tv.rank() == t0.rank(), "concat_last rank mismatch");
      for (Index ax = 0; ax + 1 < t0.rank(); ++ax)
        detail::require(tv.extent(ax) == t0.extent(ax), "concat_last leading extent mismatch");
      widths.push_back(tv.extent(tv.rank() - 1));
      total_c += widths.back();
    }
    Shape oshape = t0.shape();
    oshape.back() = total_c;
    Tensor<S> out(oshape);
    const Index rows = out.size() / total_c;
    Index at = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      out.matrix(rows, total_c).middleCols(at, widths[i]) =
          value(xs[i]).matrix(rows, widths[i]);
      at += widths[i];
    }
    auto vars = xs;
    return push(std::move(out), [vars, widths, total_c](Tape& t, const Tensor<S>& g) {
      const Index rows = g.size() / total_c;
      Index at = 0;
      for (std::size_t i = 0; i < vars.size(); ++i) {
        Shape gs = t.value(vars[i]).shape();
        Tensor<S> gi(gs);
        gi.matrix(rows, widths[i]) = g.matrix(rows, total_c).middleCols(at, widths[i]);
        t.accum(vars[i], std::move(gi));
        at += widths[i];
      }
    });
  }

  Var slice_first(Var x, Index begin, Index count) {
    const Tensor<S>& tx = value(x);
    const Index r = tx.extent(0);
    detail::require(begin >= 0 && count > 0 && begin + count <= r, "slice_first out of range");
    Shape oshape = tx.shape();
    oshape[0] = count;
    Tensor<S> out(oshape);
    const Index inner = tx.size() / r;
    std::copy_n(tx.data() + begin * inner, count * inner, out.data());
    return push(std::move(out), [x, begin, count, r](Tape& t, const Tensor<S>& g) {
      const Index inner = g.size() / count;
      Tensor<S> gx(t.value(x).shape());
      std::copy_n(g.data(), count * inner, gx.data() + begin * inner);
      t.accum(x, std::move(gx));
    });
  }

  Var concat_first(const std::vector<Var>& xs) {
    detail::require(!xs.empty(), "concat_first needs at least one input");
    const Tensor<S>& t0 = value(xs[0]);
    Index total_r = 0;
    std::vector<Index> counts;
    for (Var v : xs) {
      const Tensor<S>& tv = value(v);
      detail::require(tv.rank() == t0.rank(), "concat_first rank mismatch");
      for (Index ax = 1; ax < t0.rank(); ++ax)
        detail::require(tv.extent(ax) == t0.extent(ax), "concat_first trailing extent mismatch");
      counts.push_back(tv.extent(0));
      total_r += counts.back();
    }
    Shape oshape = t0.shape();
    oshape[0] = total_r;
    Tensor<S> out(oshape);
    const Index inner = out.size() / total_r;
    Index at = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::copy_n(value(xs[i]).data(), counts[i] * inner, out.data() + at * inner);
      at += counts[i];
    }
    auto vars = xs;
    return push(std::move(out), [vars, counts, total_r](Tape& t, const Tensor<S>& g) {
      const Index inner = g.size() / total_r;
      Index at = 0;
      for (std::size_t i = 0; i < vars.size(); ++i) {
        Tensor<S> gi(t.value(vars[i]).shape());
        std::copy_n(g.data() + at * inner, counts[i] * inner, gi.data());
        t.accum(vars[i], std::move(gi));
        at += counts[i];
      }
    });
  }

  Var reshape(Var x, Shape shape) {
    Tensor<S> out = value(x).reshaped(shape);
    return push(std::move(out), [x](Tape& t, const Tensor<S>& g) {
      t.accum(x, g.reshaped(t.value(x).shape()));
    });
  }

  // out slab i = in slab perm[i] along the first axis.
  Var permute_first(Var x, const std::vector<Index>& perm) {
    const Tensor<S>& tx = value(x);
    const Index r = tx.extent(0);
    detail::require(static_cast<Index>(perm.size()) == r, "permutation length mismatch");
    Tensor<S> out(tx.shape());
    const Index inner = tx.size() / r;
    for (Index i = 0; i < r; ++i)
      std::copy_n(tx.data() + perm[i] * inner, inner, out.data() + i * inner);
    return push(std::move(out), [x, perm, r](Tape& t, const Tensor<S>& g) {
      const Index inner = g.size() / r;
      Tensor<S> gx(t.value(x).shape());
      for (Index i = 0; i < r; ++i) {
        const S* src = g.data() + i * inner;
        S* dst = gx.data() + perm[i] * inner;
        for (Index k = 0; k < inner; ++k) dst[k] += src[k];
      }
      t.accum(x, std::move(gx));
    });
  }

  // Expand a stored half along `axis` to `full` entries so that
  // out[j] = half[j] for j < len(half) and out[full-1-j] = sign * half[j];
  // an odd `full` with sign -1 forces the middle entry to zero.
  Var mirror_expand(Var half, Index axis, Index full, int sign) {
    const Tensor<S>& th = value(half);
    const Index hl = th.extent(axis);
    const Index want = (sign > 0) ? (full + 1) / 2 : full / 2;
    detail::require(hl == want, "mirror_expand half extent mismatch");
    Shape oshape = th.shape();
    oshape[static_cast<std::size_t>(axis)] = full;
    Index outer = 1, inner = 1;
    for (Index ax = 0; ax < axis; ++ax) outer *= th.extent(ax);
    for (Index ax = axis + 1; ax < th.rank(); ++ax) inner *= th.extent(ax);
    Tensor<S> out(oshape);
    for (Index o = 0; o < outer; ++o)
      for (Index j = 0; j < full; ++j) {
        S* dst = out.data() + (o * full + j) * inner;
        if (j < hl) {
          std::copy_n(th.data() + (o * hl + j) * inner, inner, dst);
        } else if (full - 1 - j < hl) {
          const S* src = th.data() + (o * hl + (full - 1 - j)) * inner;
          for (Index i = 0; i < inner; ++i) dst[i] = (sign > 0) ? src[i] : -src[i];
        } else {
          std::fill_n(dst, inner, S(0));  // forced-zero middle of an antisymmetric odd kernel
        }
      }
    return push(std::move(out), [half, axis, full, sign, hl, outer, inner](Tape& t,
                                                                           const Tensor<S>& g) {
      Tensor<S> gh(t.value(half).shape());
      for (Index o = 0; o < outer; ++o)
        for (Index j = 0; j < full; ++j) {
          const S* src = g.data() + (o * full + j) * inner;
          if (j < hl) {
            S* dst = gh.data() + (o * hl + j) * inner;
            for (Index i = 0; i < inner; ++i) dst[i] += src[i];
          } else if (full - 1 - j < hl) {
            S* dst = gh.data() + (o * hl + (full - 1 - j)) * inner;
            for (Index i = 0; i < inner; ++i) dst[i] += (sign > 0) ? src[i] : -src[i];
          }
        }
      t.accum(half, std::move(gh));
    });
  }

  // GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
  // Deviates from the exact erf form by at most ~1e-3.
  Var gelu(Var x) {
    const Tensor<S>& tx = value(x);
    Tensor<S> out(tx.shape());
    for (Index i = 0; i < tx.size(); ++i) out[i] = gelu_scalar(tx[i]);
    return push(std::move(out), [x](Tape& t, const Tensor<S>& g) {
      const Tensor<S>& vx = t.value(x);
      Tensor<S> gx(vx.shape());
      for (Index i = 0; i < vx.size(); ++i) gx[i] = g[i] * gelu_grad_scalar(vx[i]);
      t.accum(x, std::move(gx));
    });
  }

  Var relu(Var x) {
    const Tensor<S>& tx = value(x);
    Tensor<S> out(tx.shape());
    out.flat() = tx.flat().cwiseMax(S(0));
    return push(std::move(out), [x](Tape& t, const Tensor<S>& g) {
      const Tensor<S>& vx = t.value(x);
      Tensor<S> gx(vx.shape());
      for (Index i = 0; i < vx.size(); ++i) gx[i] = vx[i] > S(0) ? g[i] : S(0);
      t.accum(x, std::move(gx));
    });
  }

  Var softmax_rows(Var x) {
    const Tensor<S>& tx = value(x);
    detail::require(tx.rank() == 2, "softmax_rows expects rank 2");
    Tensor<S> out(tx.shape());
    const Index r = tx.extent(0), c = tx.extent(1);
    for (Index i = 0; i < r; ++i) {
      S m = tx(i, 0);
      for (Index j = 1; j < c; ++j) m = std::max(m, tx(i, j));
      S sum = 0;
      for (Index j = 0; j < c; ++j) {
        out(i, j) = std::exp(tx(i, j) - m);
        sum += out(i, j);
      }
      for (Index j = 0; j < c; ++j) out(i, j) /= sum;
    }
    Var self = push(std::move(out), {});
    nodes_.back().backward = [x, self](Tape& t, const Tensor<S>& g) {
      const Tensor<S>& s = t.value(self);
      const Index r = s.extent(0), c = s.extent(1);
      Tensor<S> gx(s.shape());
      for (Index i = 0; i < r; ++i) {
        S dot = 0;
        for (Index j = 0; j < c; ++j) dot += g(i, j) * s(i, j);
        for (Index j = 0; j < c; ++j) gx(i, j) = s(i, j) * (g(i, j) - dot);
      }
      t.accum(x, std::move(gx));
    };
    return self;
  }

  // Per-row normalization over all columns: (x - mean) / sqrt(var + eps).
  Var layernorm_rows(Var x, S eps) {
    if (!(eps > S(0))) throw UsageError("layernorm eps must be positive");
    const Tensor<S>& tx = value(x);
    detail::require(tx.rank() == 2, "layernorm_rows expects rank 2");
    const Index r = tx.extent(0), c = tx.extent(1);
    Tensor<S> out(tx.shape());
    Tensor<S> inv_sigma({r});
    for (Index i = 0; i < r; ++i) {
      S mean = 0;
      for (Index j = 0; j < c; ++j) mean += tx(i, j);
      mean /= static_cast<S>(c);
      S var = 0;
      for (Index j = 0; j < c; ++j) {
        const S d = tx(i, j) - mean;
        var += d * d;
      }
      var /= static_cast<S>(c);
      const S is = S(1) / std::sqrt(var + eps);
      inv_sigma[i] = is;
      for (Index j = 0; j < c; ++j) out(i, j) = (tx(i, j) - mean) * is;
    }
    Var self = push(std::move(out), {});
    Var isv = push(std::move(inv_sigma), {});
    nodes_[self.id].backward = [x, self, isv](Tape& t, const Tensor<S>& g) {
      const Tensor<S>& xhat = t.value(self);
      const Tensor<S>& is = t.value(isv);
      const Index r = xhat.extent(0), c = xhat.extent(1);
      Tensor<S> gx(xhat.shape());
      for (Index i = 0; i < r; ++i) {
        S gmean = 0, gdot = 0;
        for (Index j = 0; j < c; ++j) {
          gmean += g(i, j);
          gdot += g(i, j) * xhat(i, j);
        }
        gmean /= static_cast<S>(c);
        gdot /= static_cast<S>(c);
        for (Index j = 0; j < c; ++j)
          gx(i, j) = is[i] * (g(i, j) - gmean - xhat(i, j) * gdot);
      }
      t.accum(x, std::move(gx));
    };
    return self;
  }

  // (R x C) -> (C,) column means: token pooling.
  Var mean_first(Var x) {
    const Tensor<S>& tx = value(x);
    detail::require(tx.rank() == 2, "mean_first expects rank 2");
    const Index r = tx.extent(0), c = tx.extent(1);
    Tensor<S> out({c});
    out.flat() = tx.matrix().colwise().sum().transpose() / static_cast<S>(r);
    return push(std::move(out), [x, r, c](Tape& t, const Tensor<S>& g) {
      Tensor<S> gx(t.value(x).shape());
      gx.matrix().rowwise() = g.flat().transpose() / static_cast<S>(r);
      t.accum(x, std::move(gx));
    });
  }

  Var sum(Var x) {
    Tensor<S> out = Tensor<S>::scalar(value(x).flat().sum());
    return push(std::move(out), [x](Tape& t, const Tensor<S>& g) {
      Tensor<S> gx(t.value(x).shape());
      gx.flat().setConstant(g[0]);
      t.accum(x, std::move(gx));
    });
  }

  Var mean(Var x) {
    const Index n = value(x).size();
    Tensor<S> out = Tensor<S>::scalar(value(x).flat().sum() / static_cast<S>(n));
    return push(std::move(out), [x, n](Tape& t, const Tensor<S>& g) {
      Tensor<S> gx(t.value(x).shape());
      gx.flat().setConstant(g[0] / static_cast<S>(n));
      t.accum(x, std::move(gx));
    });
  }

  Var log_softmax_vec(Var x) {
    const Tensor<S>& tx = value(x);
    detail::require(tx.rank() == 1, "log_softmax_vec expects rank 1");
    const Index n = tx.extent(0);
    S m = tx[0];
    for (Index i = 1; i < n; ++i) m = std::max(m, tx[i]);
    S sum = 0;
    for (Index i = 0; i < n; ++i) sum += std::exp(tx[i] - m);
    const S lse = m + std::log(sum);
    Tensor<S> out({n});
    for (Index i = 0; i < n; ++i) out[i] = tx[i] - lse;
    Var self = push(std::move(out), {});
    nodes_.back().backward = [x, self](Tape& t, const Tensor<S>& g) {
      const Tensor<S>& y = t.value(self);
      const Index n = y.extent(0);
      S gsum = 0;
      for (Index i = 0; i < n; ++i) gsum += g[i];
      Tensor<S> gx({n});
      for (Index i = 0; i < n; ++i) gx[i] = g[i] - std::exp(y[i]) * gsum;
      t.accum(x, std::move(gx));
    };
    return self;
  }

  Var pick(Var x, Index i) {
    const Tensor<S>& tx = value(x);
    detail::require(i >= 0 && i < tx.size(), "pick index out of range");
    return push(Tensor<S>::scalar(tx[i]), [x, i](Tape& t, const Tensor<S>& g) {
      Tensor<S> gx(t.value(x).shape());
      gx[i] = g[0];
      t.accum(x, std::move(gx));
    });
  }

  // ---- backward ---------------------------------------------------------

  void backward(Var loss) {
    if (!loss.valid() || value(loss).size() != 1)
      throw UsageError("backward requires a scalar loss on this tape");
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[loss.id] = Tensor<S>::ones(value(loss).shape());
    for (std::int32_t i = loss.id; i >= 0; --i) {
      if (!grads_[i].has_value()) continue;
      if (nodes_[i].backward) nodes_[i].backward(*this, *grads_[i]);
      if (i != loss.id) grads_[i].reset();
    }
  }

  // Gradient w.r.t. an intermediate node, if it was reached. Only available
  // for the most recent backward() and only for nodes whose grad was kept.
  void accum(Var v, Tensor<S> g) {
    auto& slot = grads_[v.id];
    if (!slot.has_value())
      slot = std::move(g);
    else
      slot->flat() += g.flat();
  }

  static S gelu_scalar(S x) {
    const S k = S(0.7978845608028654);  // sqrt(2/pi)
    const S u = k * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
  }

  static S gelu_grad_scalar(S x) {
    const S k = S(0.7978845608028654);
    const S u = k * (x + S(0.044715) * x * x * x);
    const S th = std::tanh(u);
    const S sech2 = S(1) - th * th;
    return S(0.5) * (S(1) + th) + S(0.5) * x * sech2 * k * (S(1) + S(3) * S(0.044715) * x * x);
  }

 private:
  struct Node {
    Tensor<S> value;
    const Tensor<S>* borrowed = nullptr;
    std::function<void(Tape&, const Tensor<S>&)> backward;
  };

  Var push(Tensor<S> value, std::function<void(Tape&, const Tensor<S>&)> bw) {
    Node node;
    node.value = std::move(value);
    node.backward = std::move(bw);
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<S>>> grads_;
  Counters counters_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.

struct GradCheckReport {
  bool passed = false;
  double tol = 0;
  double max_rel_err = 0;
  std::string worst_param;
  Index worst_coord = -1;
  double worst_analytic = 0;
  double worst_numeric = 0;
  int n_checked = 0;
};

// Central differences against the tape gradient, f64 only. `build_loss`
// must rebuild the same deterministic forward graph on every call.
inline GradCheckReport grad_check(const std::function<Var(Tape<double>&)>& build_loss,
                                  const std::vector<Param<double>*>& params, double h,
                                  double tol, int max_coords, Rng& rng) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
  }

  Index total = 0;
  for (auto* p : params) total += p->value.size();
  std::vector<Index> coords;
  if (total <= max_coords) {
    coords.resize(static_cast<std::size_t>(total));
    for (Index i = 0; i < total; ++i) coords[static_cast<std::size_t>(i)] = i;
  } else {
    std::set<Index> chosen;
    while (static_cast<int>(chosen.size()) < max_coords)
      chosen.insert(static_cast<Index>(rng.next_u64() % static_cast<std::uint64_t>(total)));
    coords.assign(chosen.begin(), chosen.end());
  }

  auto eval = [&]() {
    Tape<double> tape;
    Var loss = build_loss(tape);
    return tape.value(loss)[0];
  };

  GradCheckReport report;
  report.tol = tol;
  for (Index flat : coords) {
    Index rest = flat;
    Param<double>* p = nullptr;
    for (auto* cand : params) {
      if (rest < cand->value.size()) {
        p = cand;
        break;
      }
      rest -= cand->value.size();
    }
    const double saved = p->value[rest];
    p->value[rest] = saved + h;
    const double fp = eval();
    p->value[rest] = saved - h;
    const double fm = eval();
    p->value[rest] = saved;
    const double numeric = (fp - fm) / (2 * h);
    const double analytic = p->grad[rest];
    const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
    ++report.n_checked;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = p->name;
      report.worst_coord = rest;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  report.passed = report.max_rel_err <= tol;
  return report;
}

}  // namespace flopnet
