#include <doctest.h>

#include "flopnet/autodiff.hpp"

using namespace flopnet;

TEST_CASE("linear map gradient: d(sum(Wx))/dW = x broadcast over rows") {
  Rng rng(1);
  Param<double> w("w", Tensor<double>::normal({3, 4}, rng));
  auto x = Tensor<double>::normal({4, 2}, rng);
  w.zero_grad();
  Tape<double> t;
  Var loss = t.sum(t.matmul(t.param(w), t.constant(x)));
  t.backward(loss);
  // d sum / d w[i,p] = sum_j x[p,j]
  for (Index i = 0; i < 3; ++i)
    for (Index p = 0; p < 4; ++p) {
      double want = 0;
      for (Index j = 0; j < 2; ++j) want += x(p, j);
      CHECK(w.grad(i, p) == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("gelu gradient matches central finite differences") {
  Rng rng(2);
  Param<double> x("x", Tensor<double>::normal({16}, rng));
  auto build = [&](Tape<double>& t) { return t.sum(t.gelu(t.param(x))); };
  Rng sample_rng(3);
  auto report = grad_check(build, {&x}, 1e-5, 1e-4, 64, sample_rng);
  CHECK(report.passed);
  CHECK(report.n_checked == 16);
}

TEST_CASE("constant loss gives exactly zero gradients") {
  Rng rng(4);
  Param<double> w("w", Tensor<double>::normal({5, 5}, rng));
  w.zero_grad();
  Tape<double> t;
  t.param(w);  // placed on the tape but unused by the loss
  Var loss = t.constant(Tensor<double>::scalar(3.0));
  t.backward(loss);
  CHECK(max_abs(w.grad) == 0.0);
}

TEST_CASE("grad_check on theta squared") {
  Param<double> theta("theta", Tensor<double>::scalar(3.0).reshaped({1}));
  auto build = [&](Tape<double>& t) {
    Var v = t.param(theta);
    return t.sum(t.mul(v, v));
  };
  Rng rng(5);
  auto report = grad_check(build, {&theta}, 1e-5, 1e-6, 8, rng);
  CHECK(report.passed);
  CHECK(report.worst_analytic == doctest::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("backward requires a scalar loss") {
  Tape<double> t;
  Var v = t.constant(Tensor<double>({2, 2}));
  CHECK_THROWS_AS(t.backward(v), UsageError);
}

TEST_CASE("composite of primitives passes grad_check") {
  // Exercises matmul, conv, slicing, concat, mirror expansion, permutation,
  // softmax, layer norm, pooling and the pointwise ops in one graph.
  Rng rng(6);
  Param<double> filt("filt", Tensor<double>::normal({2, 1, 3, 2}, rng, 0.5));
  Param<double> w("w", Tensor<double>::normal({8, 6}, rng, 0.5));
  Param<double> b("b", Tensor<double>::normal({6}, rng, 0.5));
  Param<double> g("g", Tensor<double>::normal({6}, rng, 0.5));
  auto img = Tensor<double>::normal({2, 4, 4}, rng);

  auto build = [&](Tape<double>& t) {
    Var x = t.conv2d(t.constant(img), t.mirror_expand(t.param(filt), 3, 3, +1), 1, 1, true);
    x = t.reshape(x, {2 * 4, 4});          // (8,4)
    x = t.permute_first(x, {3, 1, 0, 2, 7, 6, 5, 4});
    x = t.concat_last({t.slice_last(x, 0, 2), t.slice_last(x, 1, 3)});  // (8,5)
    x = t.transpose(x);                    // (5,8)
    x = t.matmul(x, t.param(w));           // (5,6)
    x = t.add_last(x, t.param(b));
    x = t.scale_last(x, t.param(g));
    Var sm = t.softmax_rows(x);
    Var ln = t.layernorm_rows(x, 1e-6);
    x = t.add(t.relu(sm), t.gelu(ln));
    Var pooled = t.mean_first(x);          // (6)
    Var ls = t.log_softmax_vec(pooled);
    return t.sub(t.mean(x), t.pick(ls, 2));
  };
  Rng sample_rng(7);
  auto report = grad_check(build, {&filt, &w, &b, &g}, 1e-5, 1e-4, 96, sample_rng);
  INFO("worst ", report.worst_param, "[", report.worst_coord, "] rel=", report.max_rel_err);
  CHECK(report.passed);
}

TEST_CASE("dense conv gradient passes grad_check") {
  Rng rng(8);
  Param<double> filt("filt", Tensor<double>::normal({3, 2, 2, 2}, rng, 0.5));
  Param<double> inp("inp", Tensor<double>::normal({2, 4, 4}, rng, 0.5));
  auto build = [&](Tape<double>& t) {
    return t.sum(t.gelu(t.conv2d(t.param(inp), t.param(filt), 2, 0, false)));
  };
  Rng sample_rng(9);
  auto report = grad_check(build, {&filt, &inp}, 1e-5, 1e-4, 80, sample_rng);
  CHECK(report.passed);
}

TEST_CASE("tape counts matmul and conv MACs") {
  Tape<float> t;
  Var a = t.constant(Tensor<float>({3, 4}));
  Var b = t.constant(Tensor<float>({4, 5}));
  t.matmul(a, b);
  CHECK(t.counters().matmul_macs == 3 * 4 * 5);
  Var img = t.constant(Tensor<float>({2, 6, 6}));
  Var f = t.constant(Tensor<float>({4, 2, 3, 3}));
  t.conv2d(img, f, 1, 1, false);
  CHECK(t.counters().conv_macs == 4ull * 6 * 6 * 2 * 3 * 3);
}

TEST_CASE("unused parameters keep zero gradients through a real backward") {
  Rng rng(10);
  Param<double> used("used", Tensor<double>::normal({3}, rng));
  Param<double> unused("unused", Tensor<double>::normal({3}, rng));
  used.zero_grad();
  unused.zero_grad();
  Tape<double> t;
  Var u = t.param(used);
  t.param(unused);
  t.backward(t.sum(u));
  CHECK(max_abs(used.grad) == 1.0);
  CHECK(max_abs(unused.grad) == 0.0);
}
