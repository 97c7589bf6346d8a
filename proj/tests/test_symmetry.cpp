#include <doctest.h>

#include <Eigen/Dense>

#include "flopnet/layers.hpp"
#include "flopnet/symmetry.hpp"

using namespace flopnet;

TEST_CASE("apply_representation identity, sign action, involution") {
  ParityLayout lay{1, 1};
  TokenAction act = TokenAction::identity(1);
  Tensor<float> x({1, 2}, {5, 7});

  CHECK(max_abs_diff(apply_representation(x, GroupElement::identity, act, lay), x) == 0.0f);
  auto flipped = apply_representation(x, GroupElement::flop, act, lay);
  CHECK(flipped(0, 0) == 5.0f);
  CHECK(flipped(0, 1) == -7.0f);
  auto twice = apply_representation(flipped, GroupElement::flop, act, lay);
  CHECK(max_abs_diff(twice, x) == 0.0f);
}

TEST_CASE("grid token action is an involution and composes with channel signs") {
  TokenAction act = TokenAction::grid_flop(3, 4, 1);
  CHECK(act.is_involution());
  CHECK(act.permutation[0] == 0);                 // fixed classification token
  CHECK(act.permutation[1] == 1 + 3);             // (0,0) <-> (0,3)
  Rng rng(1);
  auto x = Tensor<float>::normal({13, 6}, rng);
  auto once = apply_representation(x, GroupElement::flop, act, ParityLayout{3, 3});
  auto twice = apply_representation(once, GroupElement::flop, act, ParityLayout{3, 3});
  CHECK(max_abs_diff(twice, x) == 0.0f);
}

TEST_CASE("isotypical decomposition of trivial involutions") {
  auto dec_id = isotypical_decompose(Eigen::MatrixXd::Identity(3, 3));
  CHECK(dec_id.k_plus == 3);
  CHECK(dec_id.k_minus == 0);
  CHECK((dec_id.reconstruct() - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);

  auto dec_neg = isotypical_decompose(-Eigen::MatrixXd::Identity(2, 2));
  CHECK(dec_neg.k_plus == 0);
  CHECK(dec_neg.k_minus == 2);
}

TEST_CASE("isotypical decomposition of the swap matrix vs eigendecomposition oracle") {
  Eigen::MatrixXd swap(2, 2);
  swap << 0, 1, 1, 0;
  auto dec = isotypical_decompose(swap);
  CHECK(dec.k_plus == 1);
  CHECK(dec.k_minus == 1);
  CHECK((dec.reconstruct() - swap).cwiseAbs().maxCoeff() < 1e-8);
  // Oracle: symmetric eigensolver gives eigenvalues {-1, +1} with
  // eigenvectors proportional to (1,-1) and (1,1).
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(swap);
  CHECK(es.eigenvalues()(0) == doctest::Approx(-1.0));
  CHECK(es.eigenvalues()(1) == doctest::Approx(1.0));
  const Eigen::VectorXd q_plus = dec.Q.col(0);
  CHECK(std::abs(q_plus(0)) == doctest::Approx(std::abs(q_plus(1))));
  const Eigen::VectorXd q_minus = dec.Q.col(1);
  CHECK(q_minus(0) == doctest::Approx(-q_minus(1)).epsilon(1e-9));
}

TEST_CASE("isotypical decomposition rejects non-involutions") {
  Eigen::MatrixXd a(2, 2);
  a << 1, 1, 0, 1;
  CHECK_THROWS_AS(isotypical_decompose(a), InvolutionError);
}

TEST_CASE("random involutions: reconstruction, multiplicities, trace") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.next_u64() % 31);
    // Well-conditioned S: identity plus a small random perturbation.
    Eigen::MatrixXd s = Eigen::MatrixXd::Identity(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) s(i, j) += 0.3 * rng.normal();
    Eigen::VectorXd d(n);
    Index k_plus = 0;
    for (Index i = 0; i < n; ++i) {
      d(i) = rng.uniform() < 0.5 ? 1.0 : -1.0;
      k_plus += d(i) > 0;
    }
    const Eigen::MatrixXd a = s * d.asDiagonal() * s.inverse();
    auto dec = isotypical_decompose(a, 1e-6);
    CHECK(dec.k_plus == k_plus);
    CHECK(dec.k_plus + dec.k_minus == n);
    CHECK((dec.reconstruct() - a).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(std::abs(a.trace() - static_cast<double>(dec.k_plus - dec.k_minus)) < 1e-6);
  }
}

TEST_CASE("Corollary-1 direction: conjugated block maps commute with the involution") {
  Rng rng(23);
  const Index n = 8;
  Eigen::MatrixXd s = Eigen::MatrixXd::Identity(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) s(i, j) += 0.25 * rng.normal();
  Eigen::VectorXd d(n);
  for (Index i = 0; i < n; ++i) d(i) = i < 5 ? 1.0 : -1.0;
  const Eigen::MatrixXd a = s * d.asDiagonal() * s.inverse();
  auto dec = isotypical_decompose(a);

  Eigen::MatrixXd block = Eigen::MatrixXd::Zero(n, n);
  for (Index i = 0; i < dec.k_plus; ++i)
    for (Index j = 0; j < dec.k_plus; ++j) block(i, j) = rng.normal();
  for (Index i = dec.k_plus; i < n; ++i)
    for (Index j = dec.k_plus; j < n; ++j) block(i, j) = rng.normal();
  const Eigen::MatrixXd q_inv = dec.Q.inverse();
  const Eigen::MatrixXd map = dec.Q * block * q_inv;
  CHECK((map * a - a * map).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("patch parity transform matches explicit 2x2 enumeration") {
  // Grid 2x2 (tokens row major), d=2 with layout (1,1).
  Tensor<float> x({4, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
  auto p = patch_parity_forward(x, ParityLayout{1, 1}, 2, 2);
  const float s = 1.0f / std::sqrt(2.0f);
  // Row pairs: (token0, token1) and (token2, token3).
  CHECK(p.inv_sym(0, 0) == doctest::Approx((1 + 2) * s));
  CHECK(p.inv_sym(1, 0) == doctest::Approx((3 + 4) * s));
  CHECK(p.inv_anti(0, 0) == doctest::Approx((1 - 2) * s));
  CHECK(p.inv_anti(1, 0) == doctest::Approx((3 - 4) * s));
  CHECK(p.equi_sym(0, 0) == doctest::Approx((10 + 20) * s));
  CHECK(p.equi_anti(1, 0) == doctest::Approx((30 - 40) * s));
  CHECK(rel_inf_diff(patch_parity_inverse(p), x) < 1e-6);
}

TEST_CASE("patch parity: orthonormal round trip, symmetry, norm preservation") {
  Rng rng(31);
  const Index grid = 4, d = 6;
  auto x = Tensor<float>::normal({grid * grid, d}, rng);
  auto p = patch_parity_forward(x, ParityLayout::halves(d), grid, grid);
  CHECK(rel_inf_diff(patch_parity_inverse(p), x) < 1e-6);

  const double norm_in = x.flat().template cast<double>().squaredNorm();
  const double norm_out = p.inv_sym.flat().template cast<double>().squaredNorm() +
                          p.inv_anti.flat().template cast<double>().squaredNorm() +
                          p.equi_sym.flat().template cast<double>().squaredNorm() +
                          p.equi_anti.flat().template cast<double>().squaredNorm();
  CHECK(norm_out == doctest::Approx(norm_in).epsilon(1e-6));

  // Width-symmetric feature map: all patch-antisymmetric components vanish.
  Tensor<float> sym = x;
  for (Index i = 0; i < grid; ++i)
    for (Index j = 0; j < grid; ++j)
      for (Index c = 0; c < d; ++c) sym(i * grid + j, c) = x(i * grid + std::min(j, grid - 1 - j), c);
  auto ps = patch_parity_forward(sym, ParityLayout::halves(d), grid, grid);
  CHECK(max_abs(ps.inv_anti) == 0.0f);
  CHECK(max_abs(ps.equi_anti) == 0.0f);

  // Under flop, each tensor picks up the product of its two parities.
  auto flopped = apply_representation(x, GroupElement::flop,
                                      TokenAction::grid_flop(grid, grid), ParityLayout::halves(d));
  auto pf = patch_parity_forward(flopped, ParityLayout::halves(d), grid, grid);
  CHECK(max_abs_diff(pf.inv_sym, p.inv_sym) < 1e-6f);       // (+1)(+1)
  Tensor<float> neg = p.inv_anti;
  neg.flat() = -neg.flat();
  CHECK(max_abs_diff(pf.inv_anti, neg) < 1e-6f);            // (+1)(-1)
  neg = p.equi_sym;
  neg.flat() = -neg.flat();
  CHECK(max_abs_diff(pf.equi_sym, neg) < 1e-6f);            // (-1)(+1)
  CHECK(max_abs_diff(pf.equi_anti, p.equi_anti) < 1e-6f);   // (-1)(-1)
}

TEST_CASE("patch parity rejects odd grid widths") {
  Tensor<float> x({6, 2});
  CHECK_THROWS_AS(patch_parity_forward(x, ParityLayout{1, 1}, 2, 3), UsageError);
}

TEST_CASE("check_equivariance accepts an equivariant map and rejects a dense one") {
  Rng rng(41);
  const Index d = 8;
  ParityLayout lay = ParityLayout::halves(d);
  BlockDiagLinear<float> block("blk", lay, lay, true, rng);
  auto block_fn = [&](const Tensor<float>& x) {
    Tape<float> t;
    return t.value(block.forward(t, t.constant(x)));
  };
  auto report = check_equivariance<float>("block_diag", block_fn, channel_sign_action<float>(lay),
                                          channel_sign_action<float>(lay), {5, d}, 16, 1e-6, 0);
  CHECK(report.passed);

  DenseLinear<float> dense("dense", d, d, true, rng);
  auto dense_fn = [&](const Tensor<float>& x) {
    Tape<float> t;
    return t.value(dense.forward(t, t.constant(x)));
  };
  auto bad = check_equivariance<float>("dense", dense_fn, channel_sign_action<float>(lay),
                                       channel_sign_action<float>(lay), {5, d}, 16, 1e-6, 0);
  CHECK_FALSE(bad.passed);
  CHECK(bad.worst_violation > 1e-6);
  CHECK(bad.worst_sample_seed >= 0);

  auto j = report.to_json();
  CHECK(j.size() == 6);
  CHECK(j["name"] == "block_diag");
  CHECK(j["passed"] == true);
}

TEST_CASE("equivariant pointwise GELU passes the checker in f32") {
  ParityLayout lay{4, 4};
  auto fn = [&](const Tensor<float>& x) {
    Tape<float> t;
    return t.value(equivariant_pointwise(t, t.constant(x), lay, Activation::gelu));
  };
  auto report = check_equivariance<float>("eq_gelu", fn, channel_sign_action<float>(lay),
                                          channel_sign_action<float>(lay), {6, 8}, 32, 1e-5, 0);
  CHECK(report.passed);
}
