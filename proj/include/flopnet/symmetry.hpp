#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flopnet/rng.hpp"
#include "flopnet/tensor.hpp"

namespace flopnet {

// D2 = {identity, flop}; flop is its own inverse.
enum class GroupElement { identity, flop };

// Channel-axis split into invariant (+1) and sign-flip (-1) irrep channels.
// Invariant channels occupy [0, n_inv), sign-flip channels the rest.
struct ParityLayout {
  Index n_inv = 0;
  Index n_equi = 0;

  Index total() const { return n_inv + n_equi; }
  static ParityLayout halves(Index d) {
    detail::require(d % 2 == 0, "parity layout with equal halves needs an even width");
    return ParityLayout{d / 2, d / 2};
  }
};

// Token permutation induced by a horizontal flop of the patch grid, plus any
// leading fixed tokens (e.g. a classification token).
struct TokenAction {
  std::vector<Index> permutation;

  Index size() const { return static_cast<Index>(permutation.size()); }

  bool is_involution() const {
    for (Index i = 0; i < size(); ++i)
      if (permutation[static_cast<std::size_t>(permutation[i])] != i) return false;
    return true;
  }

  static TokenAction identity(Index n) {
    TokenAction a;
    a.permutation.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) a.permutation[i] = i;
    return a;
  }

  // Grid position (i, j) <-> (i, w-1-j); `fixed` leading tokens map to themselves.
  static TokenAction grid_flop(Index h, Index w, Index fixed = 0) {
    TokenAction a = identity(fixed + h * w);
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j)
        a.permutation[fixed + i * w + j] = fixed + i * w + (w - 1 - j);
    return a;
  }
};

// rho(g) on a (tokens x channels) feature tensor: permute tokens and negate
// the sign-flip channels.
template <typename S>
Tensor<S> apply_representation(const Tensor<S>& x, GroupElement g, const TokenAction& action,
                               const ParityLayout& layout) {
  detail::require(x.rank() == 2, "apply_representation expects (tokens x channels)");
  detail::require(x.extent(0) == action.size(), "token extent does not match action");
  detail::require(x.extent(1) == layout.total(), "channel extent does not match layout");
  if (g == GroupElement::identity) return x;
  Tensor<S> out(x.shape());
  const Index d = layout.total();
  for (Index i = 0; i < x.extent(0); ++i) {
    const Index src = action.permutation[i];
    for (Index c = 0; c < d; ++c) {
      const S v = x(src, c);
      out(i, c) = (c < layout.n_inv) ? v : -v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Isotypical decomposition of an involution A = Q D Q^{-1}, D = diag(+1...,-1...).
// Built from the projectors (I + A)/2 and (I - A)/2 with rank-revealing QR, so
// no complex arithmetic is needed and each eigenspace basis is orthonormal.

struct IsotypicalDecomposition {
  Eigen::MatrixXd Q;
  Index k_plus = 0;
  Index k_minus = 0;

  Eigen::VectorXd diagonal() const {
    Eigen::VectorXd d(k_plus + k_minus);
    d.head(k_plus).setOnes();
    d.tail(k_minus).setConstant(-1.0);
    return d;
  }

  Eigen::MatrixXd reconstruct() const {
    return Q * diagonal().asDiagonal() * Q.inverse();
  }
};

class InvolutionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline IsotypicalDecomposition isotypical_decompose(const Eigen::MatrixXd& A,
                                                    double eps = 1e-6) {
  detail::require(A.rows() == A.cols(), "isotypical_decompose expects a square matrix");
  const Index n = A.rows();
  const double dev = (A * A - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff();
  if (dev > eps)
    throw InvolutionError("matrix is not an involution: ||A^2 - I||_inf = " +
                          std::to_string(dev));

  auto range_basis = [n](const Eigen::MatrixXd& p) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(p);
    const Index rank = qr.rank();
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, rank);
    return q;
  };

  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd q_plus = range_basis(0.5 * (id + A));
  const Eigen::MatrixXd q_minus = range_basis(0.5 * (id - A));
  detail::require(q_plus.cols() + q_minus.cols() == n,
                  "projector ranks do not sum to the dimension");

  IsotypicalDecomposition dec;
  dec.k_plus = q_plus.cols();
  dec.k_minus = q_minus.cols();
  dec.Q.resize(n, n);
  dec.Q << q_plus, q_minus;
  return dec;
}

// ---------------------------------------------------------------------------
// Patch-parity change of basis for the token axis of a feature map on an
// (grid_h x grid_w) patch grid. Columns j and grid_w-1-j are combined with an
// orthonormal butterfly (1/sqrt(2)), so the inverse is the same butterfly.
// First index in the names is channel parity, second is patch parity.

template <typename S>
struct PatchParityTensors {
  Tensor<S> inv_sym;    // x_{+1,+1}: invariant channels, symmetric patch combos
  Tensor<S> inv_anti;   // x_{+1,-1}
  Tensor<S> equi_sym;   // x_{-1,+1}
  Tensor<S> equi_anti;  // x_{-1,-1}
  Index grid_h = 0;
  Index grid_w = 0;
};

// Row order of the half-token axis: pair p = (i, j) with j < grid_w/2 at
// position i*(grid_w/2) + j; its mirror partner is (i, grid_w-1-j).
template <typename S>
PatchParityTensors<S> patch_parity_forward(const Tensor<S>& x, const ParityLayout& layout,
                                           Index grid_h, Index grid_w) {
  detail::require(x.rank() == 2, "patch_parity_forward expects (tokens x channels)");
  detail::require(x.extent(0) == grid_h * grid_w, "token extent does not match grid");
  detail::require(x.extent(1) == layout.total(), "channel extent does not match layout");
  if (grid_w % 2 != 0)
    throw UsageError("patch parity transform requires an even grid width, got " +
                     std::to_string(grid_w));
  detail::require(layout.n_inv == layout.n_equi,
                  "patch parity transform needs equal channel halves");
  const Index half_w = grid_w / 2;
  const Index half_tokens = grid_h * half_w;
  const Index dh = layout.n_inv;
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));

  PatchParityTensors<S> out;
  out.grid_h = grid_h;
  out.grid_w = grid_w;
  out.inv_sym = Tensor<S>({half_tokens, dh});
  out.inv_anti = Tensor<S>({half_tokens, dh});
  out.equi_sym = Tensor<S>({half_tokens, dh});
  out.equi_anti = Tensor<S>({half_tokens, dh});
  for (Index i = 0; i < grid_h; ++i)
    for (Index j = 0; j < half_w; ++j) {
      const Index row = i * half_w + j;
      const Index left = i * grid_w + j;
      const Index right = i * grid_w + (grid_w - 1 - j);
      for (Index c = 0; c < dh; ++c) {
        out.inv_sym(row, c) = (x(left, c) + x(right, c)) * inv_sqrt2;
        out.inv_anti(row, c) = (x(left, c) - x(right, c)) * inv_sqrt2;
        out.equi_sym(row, c) = (x(left, dh + c) + x(right, dh + c)) * inv_sqrt2;
        out.equi_anti(row, c) = (x(left, dh + c) - x(right, dh + c)) * inv_sqrt2;
      }
    }
  return out;
}

template <typename S>
Tensor<S> patch_parity_inverse(const PatchParityTensors<S>& p) {
  const Index half_w = p.grid_w / 2;
  const Index dh = p.inv_sym.extent(1);
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  Tensor<S> x({p.grid_h * p.grid_w, 2 * dh});
  for (Index i = 0; i < p.grid_h; ++i)
    for (Index j = 0; j < half_w; ++j) {
      const Index row = i * half_w + j;
      const Index left = i * p.grid_w + j;
      const Index right = i * p.grid_w + (p.grid_w - 1 - j);
      for (Index c = 0; c < dh; ++c) {
        x(left, c) = (p.inv_sym(row, c) + p.inv_anti(row, c)) * inv_sqrt2;
        x(right, c) = (p.inv_sym(row, c) - p.inv_anti(row, c)) * inv_sqrt2;
        x(left, dh + c) = (p.equi_sym(row, c) + p.equi_anti(row, c)) * inv_sqrt2;
        x(right, dh + c) = (p.equi_sym(row, c) - p.equi_anti(row, c)) * inv_sqrt2;
      }
    }
  return x;
}

// ---------------------------------------------------------------------------
// Generic equivariance checker: over random inputs x,
//   ||f(rho_in(h) x) - rho_out(h) f(x)||_inf / max(1, ||f(x)||_inf) <= tol.

struct CheckReport {
  std::string name;
  bool passed = false;
  double worst_violation = 0;
  double tol = 0;
  int n_samples = 0;
  std::uint64_t seed = 0;
  std::uint64_t worst_sample_seed = 0;  // not serialized; for failure detail

  nlohmann::ordered_json to_json() const {
    return nlohmann::ordered_json{{"name", name},
                                  {"passed", passed},
                                  {"worst_violation", worst_violation},
                                  {"tol", tol},
                                  {"n_samples", n_samples},
                                  {"seed", seed}};
  }
};

template <typename S>
using TensorFn = std::function<Tensor<S>(const Tensor<S>&)>;

template <typename S>
CheckReport check_equivariance(const std::string& name, const TensorFn<S>& f,
                               const TensorFn<S>& in_action, const TensorFn<S>& out_action,
                               const Shape& input_shape, int n_samples, double tol,
                               std::uint64_t seed) {
  CheckReport report;
  report.name = name;
  report.tol = tol;
  report.n_samples = n_samples;
  report.seed = seed;
  for (int s = 0; s < n_samples; ++s) {
    const std::uint64_t sample_seed = seed + static_cast<std::uint64_t>(s);
    Rng rng(sample_seed);
    const Tensor<S> x = Tensor<S>::normal(input_shape, rng);
    const Tensor<S> lhs = f(in_action(x));
    const Tensor<S> fx = f(x);
    const Tensor<S> rhs = out_action(fx);
    const double violation = static_cast<double>(max_abs_diff(lhs, rhs)) /
                             std::max(1.0, static_cast<double>(max_abs(fx)));
    if (violation > report.worst_violation) {
      report.worst_violation = violation;
      report.worst_sample_seed = sample_seed;
    }
  }
  report.passed = report.worst_violation <= tol;
  return report;
}

// Common action functors.
template <typename S>
TensorFn<S> identity_action() {
  return [](const Tensor<S>& x) { return x; };
}

template <typename S>
TensorFn<S> image_flop_action() {
  return [](const Tensor<S>& x) { return flop_image(x); };
}

// Negate sign-flip channels along the last axis (no token permutation).
template <typename S>
TensorFn<S> channel_sign_action(ParityLayout layout) {
  return [layout](const Tensor<S>& x) {
    const Index d = layout.total();
    detail::require(x.extent(x.rank() - 1) == d, "channel extent does not match layout");
    Tensor<S> out = x;
    auto m = out.matrix(out.size() / d, d);
    m.rightCols(layout.n_equi) = -m.rightCols(layout.n_equi);
    return out;
  };
}

template <typename S>
TensorFn<S> token_feature_action(TokenAction action, ParityLayout layout) {
  return [action, layout](const Tensor<S>& x) {
    return apply_representation(x, GroupElement::flop, action, layout);
  };
}

// Spatial flop composed with channel signs on a (channels x H x W) map.
template <typename S>
TensorFn<S> image_parity_action(ParityLayout layout) {
  return [layout](const Tensor<S>& x) {
    Tensor<S> out = flop_image(x);
    const Index hw = out.extent(1) * out.extent(2);
    auto m = out.matrix(layout.total(), hw);
    m.bottomRows(layout.n_equi) = -m.bottomRows(layout.n_equi);
    return out;
  };
}

}  // namespace flopnet
