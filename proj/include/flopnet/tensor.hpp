#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flopnet/rng.hpp"

namespace flopnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    require(e > 0, "tensor extents must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ")";
  return os.str();
}

}  // namespace detail

// Dense row-major tensor over a real scalar. Rank 0 is a scalar (size 1).
// Storage is a flat Eigen column vector; 2-d views are exposed as Eigen
// maps so that matrix work stays inside Eigen expressions.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<MatrixRM>;
  using ConstMatrixMap = Eigen::Map<const MatrixRM>;
  using VectorMap = Eigen::Map<Storage>;
  using ConstVectorMap = Eigen::Map<const Storage>;

  Tensor() : shape_{}, data_(1) { data_.setZero(); }

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.setZero(detail::shape_size(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    const Index n = detail::shape_size(shape_);
    detail::require(static_cast<Index>(values.size()) == n,
                    "initializer size does not match shape " + detail::shape_str(shape_));
    data_.resize(n);
    Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }

  static Tensor scalar(Scalar v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = static_cast<Scalar>(rng.normal() * stddev);
    return t;
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = static_cast<Scalar>(rng.trunc_normal(stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& operator()(Index i, Index j) { return data_[i * shape_[1] + j]; }
  Scalar operator()(Index i, Index j) const { return data_[i * shape_[1] + j]; }
  Scalar& operator()(Index i, Index j, Index k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Scalar operator()(Index i, Index j, Index k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Scalar& operator()(Index i, Index j, Index k, Index l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  Scalar operator()(Index i, Index j, Index k, Index l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  // 2-d Eigen view; rank must be 2.
  MatrixMap matrix() {
    detail::require(rank() == 2, "matrix() requires a rank-2 tensor");
    return MatrixMap(data_.data(), shape_[0], shape_[1]);
  }
  ConstMatrixMap matrix() const {
    detail::require(rank() == 2, "matrix() requires a rank-2 tensor");
    return ConstMatrixMap(data_.data(), shape_[0], shape_[1]);
  }

  // Arbitrary (rows x cols) row-major view over the flat data.
  MatrixMap matrix(Index rows, Index cols) {
    detail::require(rows * cols == size(), "matrix view size mismatch");
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    detail::require(rows * cols == size(), "matrix view size mismatch");
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  VectorMap flat() { return VectorMap(data_.data(), data_.size()); }
  ConstVectorMap flat() const { return ConstVectorMap(data_.data(), data_.size()); }

  Tensor reshaped(Shape shape) const {
    detail::require(detail::shape_size(shape) == size(),
                    "reshape size mismatch: " + detail::shape_str(shape_) + " -> " +
                        detail::shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool all_finite() const { return data_.allFinite(); }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (Index i = 0; i < size(); ++i) out[i] = static_cast<T>(data_[i]);
    return out;
  }

 private:
  template <typename T>
  friend class Tensor;

  Shape shape_;
  Storage data_;
};

template <typename S>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                "tensors hold f32 or f64 scalars");
  return std::is_same_v<S, float> ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Free functions. All are pure; inputs are never modified.

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
  detail::require(a.extent(1) == b.extent(0),
                  "matmul inner extents differ: " + detail::shape_str(a.shape()) + " vs " +
                      detail::shape_str(b.shape()));
  Tensor<S> out({a.extent(0), b.extent(1)});
  out.matrix().noalias() = a.matrix() * b.matrix();
  return out;
}

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  detail::require(a.rank() == 2, "transpose2d expects a rank-2 tensor");
  Tensor<S> out({a.extent(1), a.extent(0)});
  out.matrix().noalias() = a.matrix().transpose();
  return out;
}

inline Index conv_out_extent(Index in, Index k, Index stride, Index pad) {
  const Index span = in + 2 * pad - k;
  detail::require(span >= 0, "kernel larger than padded input");
  detail::require(span % stride == 0, "non-integral convolution output extent");
  return span / stride + 1;
}

// Cross-correlation (no kernel flip) with zero padding.
// input: (C,H,W). Dense filters: (F,C,kh,kw). Depthwise filters: (C,1,kh,kw).
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& filters, Index stride, Index pad,
                 bool depthwise = false) {
  detail::require(input.rank() == 3, "conv2d input must be (C,H,W)");
  detail::require(filters.rank() == 4, "conv2d filters must be rank 4");
  detail::require(stride >= 1, "conv2d stride must be >= 1");
  const Index c = input.extent(0), h = input.extent(1), w = input.extent(2);
  const Index f = filters.extent(0), kh = filters.extent(2), kw = filters.extent(3);
  const Index oh = conv_out_extent(h, kh, stride, pad);
  const Index ow = conv_out_extent(w, kw, stride, pad);
  Tensor<S> out({f, oh, ow});

  if (depthwise) {
    detail::require(f == c && filters.extent(1) == 1,
                    "depthwise conv2d needs (C,1,kh,kw) filters matching input channels");
    for (Index ch = 0; ch < c; ++ch)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          S acc = 0;
          for (Index i = 0; i < kh; ++i) {
            const Index iy = oy * stride + i - pad;
            if (iy < 0 || iy >= h) continue;
            for (Index j = 0; j < kw; ++j) {
              const Index ix = ox * stride + j - pad;
              if (ix < 0 || ix >= w) continue;
              acc += filters(ch, 0, i, j) * input(ch, iy, ix);
            }
          }
          out(ch, oy, ox) = acc;
        }
    return out;
  }

  detail::require(filters.extent(1) == c, "conv2d filter channel extent mismatch");
  // im2col + GEMM: rows = output positions, cols = receptive field.
  const Index patch = c * kh * kw;
  Tensor<S> cols({oh * ow, patch});
  for (Index oy = 0; oy < oh; ++oy)
    for (Index ox = 0; ox < ow; ++ox) {
      S* row = cols.data() + (oy * ow + ox) * patch;
      Index p = 0;
      for (Index ch = 0; ch < c; ++ch)
        for (Index i = 0; i < kh; ++i) {
          const Index iy = oy * stride + i - pad;
          for (Index j = 0; j < kw; ++j, ++p) {
            const Index ix = ox * stride + j - pad;
            row[p] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? input(ch, iy, ix) : S(0);
          }
        }
    }
  // (positions x patch) * (patch x F) -> transpose into (F,oh,ow).
  typename Tensor<S>::MatrixRM prod =
      cols.matrix() * filters.matrix(f, patch).transpose();
  out.matrix(f, oh * ow).noalias() = prod.transpose();
  return out;
}

inline std::uint64_t conv2d_macs(Index c, Index f, Index oh, Index ow, Index kh, Index kw,
                                 bool depthwise) {
  const std::uint64_t per_out = static_cast<std::uint64_t>(depthwise ? 1 : c) * kh * kw;
  return static_cast<std::uint64_t>(f) * oh * ow * per_out;
}

// out[c,i,j] = img[c,i,W-1-j]: horizontal mirroring of an image.
template <typename S>
Tensor<S> flop_image(const Tensor<S>& img) {
  detail::require(img.rank() == 3, "flop_image expects a (C,H,W) tensor");
  const Index c = img.extent(0), h = img.extent(1), w = img.extent(2);
  Tensor<S> out({c, h, w});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) out(ch, i, j) = img(ch, i, w - 1 - j);
  return out;
}

template <typename S>
S max_abs(const Tensor<S>& t) {
  return t.flat().cwiseAbs().maxCoeff();
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.shape() == b.shape(), "max_abs_diff shape mismatch");
  return (a.flat() - b.flat()).cwiseAbs().maxCoeff();
}

// Relative infinity-norm deviation with floor 1 on the reference magnitude.
template <typename S>
double rel_inf_diff(const Tensor<S>& a, const Tensor<S>& ref) {
  const double denom = std::max(1.0, static_cast<double>(max_abs(ref)));
  return static_cast<double>(max_abs_diff(a, ref)) / denom;
}

}  // namespace flopnet
