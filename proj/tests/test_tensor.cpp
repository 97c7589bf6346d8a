#include <doctest.h>

#include <sstream>

#include "flopnet/io.hpp"
#include "flopnet/tensor.hpp"

using namespace flopnet;

namespace {

// Independent oracle: naive triple loop.
template <typename S>
Tensor<S> matmul_oracle(const Tensor<S>& a, const Tensor<S>& b) {
  const Index m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<S> c({m, n});
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      S acc = 0;
      for (Index p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      c(i, j) = acc;
    }
  return c;
}

// Independent oracle: direct six-loop cross-correlation with zero padding.
template <typename S>
Tensor<S> conv_oracle(const Tensor<S>& in, const Tensor<S>& f, Index stride, Index pad,
                      bool depthwise) {
  const Index c = in.extent(0), h = in.extent(1), w = in.extent(2);
  const Index nf = f.extent(0), kh = f.extent(2), kw = f.extent(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor<S> out({nf, oh, ow});
  for (Index fo = 0; fo < nf; ++fo)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        S acc = 0;
        for (Index ch = depthwise ? fo : 0; ch < (depthwise ? fo + 1 : c); ++ch)
          for (Index i = 0; i < kh; ++i)
            for (Index j = 0; j < kw; ++j) {
              const Index iy = oy * stride + i - pad, ix = ox * stride + j - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += f(fo, depthwise ? 0 : ch, i, j) * in(ch, iy, ix);
            }
        out(fo, oy, ox) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor<float> a({2, 2}, {1, 2, 3, 4});
  Tensor<float> id({2, 2}, {1, 0, 0, 1});
  CHECK(max_abs_diff(matmul(a, id), a) == 0.0f);

  Tensor<float> row({1, 2}, {1, 2});
  Tensor<float> col({2, 1}, {3, 4});
  CHECK(matmul(row, col)[0] == doctest::Approx(11.0f));
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  auto a = Tensor<double>::normal({7, 5}, rng);
  auto b = Tensor<double>::normal({5, 3}, rng);
  CHECK(rel_inf_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-6);
}

TEST_CASE("matmul associativity against oracle") {
  Rng rng(11);
  auto a = Tensor<double>::normal({8, 8}, rng);
  auto b = Tensor<double>::normal({8, 8}, rng);
  auto c = Tensor<double>::normal({8, 8}, rng);
  CHECK(rel_inf_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-5);
}

TEST_CASE("matmul shape errors") {
  Tensor<float> a({2, 3});
  Tensor<float> b({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("conv2d width-2 symmetric filter example") {
  const float x = 1.5f, y = -2.0f, z = 0.25f, a = 3.0f;
  Tensor<float> in({1, 1, 3}, {x, y, z});
  Tensor<float> f({1, 1, 1, 2}, {a, a});
  auto out = conv2d(in, f, 1, 0);
  REQUIRE(out.shape() == Shape{1, 1, 2});
  CHECK(out[0] == doctest::Approx(a * (x + y)));
  CHECK(out[1] == doctest::Approx(a * (y + z)));
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(3);
  auto in = Tensor<float>::normal({2, 4, 5}, rng);
  Tensor<float> f({2, 1, 1, 1}, {1, 1});
  CHECK(max_abs_diff(conv2d(in, f, 1, 0, true), in) == 0.0f);
}

TEST_CASE("conv2d depthwise matches direct-loop oracle") {
  Rng rng(5);
  auto in = Tensor<double>::normal({2, 5, 5}, rng);
  auto f = Tensor<double>::normal({2, 1, 3, 3}, rng);
  CHECK(rel_inf_diff(conv2d(in, f, 1, 1, true), conv_oracle(in, f, 1, 1, true)) < 1e-6);
}

TEST_CASE("conv2d dense matches direct-loop oracle with stride") {
  Rng rng(9);
  auto in = Tensor<double>::normal({3, 8, 8}, rng);
  auto f = Tensor<double>::normal({4, 3, 2, 2}, rng);
  CHECK(rel_inf_diff(conv2d(in, f, 2, 0), conv_oracle(in, f, 2, 0, false)) < 1e-6);
}

TEST_CASE("conv2d rejects non-integral output extents") {
  Tensor<float> in({1, 5, 5});
  Tensor<float> f({1, 1, 2, 2});
  CHECK_THROWS_AS(conv2d(in, f, 2, 0), ShapeError);
}

TEST_CASE("patch-embedding equivalence: stride=kernel conv equals flattened matmul") {
  Rng rng(13);
  const Index p = 4;
  auto img = Tensor<double>::normal({3, p, p}, rng);
  auto f = Tensor<double>::normal({6, 3, p, p}, rng);
  auto out = conv2d(img, f, p, 0);  // (6,1,1)
  auto patch = img.reshaped({1, 3 * p * p});
  auto fil = transpose2d(f.reshaped({6, 3 * p * p}));
  auto ref = matmul(patch, fil);
  CHECK(rel_inf_diff(out.reshaped({1, 6}), ref) < 1e-6);
}

TEST_CASE("flop_image examples") {
  Tensor<float> img({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<float> want({1, 2, 3}, {3, 2, 1, 6, 5, 4});
  CHECK(max_abs_diff(flop_image(img), want) == 0.0f);
  CHECK(max_abs_diff(flop_image(flop_image(img)), img) == 0.0f);

  Tensor<float> sym({1, 1, 3}, {7, 2, 7});
  CHECK(max_abs_diff(flop_image(sym), sym) == 0.0f);
  CHECK_THROWS_AS(flop_image(Tensor<float>({2, 2})), ShapeError);
}

TEST_CASE("EQT1 header layout is stable") {
  Tensor<float> t({1, 2}, {1.0f, -2.0f});
  std::ostringstream os(std::ios::binary);
  write_eqt1(os, t);
  const std::string bytes = os.str();
  REQUIRE(bytes.size() == 4 + 4 + 2 * 4 + 2 * 4);
  CHECK(bytes.substr(0, 4) == "EQT1");
  CHECK(bytes[4] == 0);  // f32
  CHECK(bytes[5] == 2);  // rank
  CHECK(bytes[6] == 0);
  CHECK(bytes[7] == 0);
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);   // extent 1, little endian
  CHECK(static_cast<unsigned char>(bytes[12]) == 2);  // extent 2
  // 1.0f = 0x3f800000 little endian
  CHECK(static_cast<unsigned char>(bytes[16]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[19]) == 0x3f);
}

TEST_CASE("EQT1 round trip and dtype check") {
  Rng rng(21);
  auto t64 = Tensor<double>::normal({2, 3, 4}, rng);
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_eqt1(ss, t64);
  auto back = read_eqt1<double>(ss);
  CHECK(back.shape() == t64.shape());
  CHECK(max_abs_diff(back, t64) == 0.0);

  std::stringstream ss2(std::ios::in | std::ios::out | std::ios::binary);
  write_eqt1(ss2, t64);
  CHECK_THROWS_AS(read_eqt1<float>(ss2), IoError);
}

TEST_CASE("tensor invariants") {
  Tensor<float> t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.0f}), ShapeError);
  auto scalar = Tensor<float>::scalar(4.0f);
  CHECK(scalar.rank() == 0);
  CHECK(scalar.size() == 1);
}
