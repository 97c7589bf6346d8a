#include "flopnet/accounting.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <vector>

#include "flopnet/rng.hpp"

namespace flopnet {

namespace {

double median_ms(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat random_mat(Index rows, Index cols, Rng& rng) {
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<float>(rng.normal());
  return m;
}

}  // namespace

BenchReport bench_blockdiag(int dim, int batch, int iters, int warmup, std::uint64_t seed) {
  if (dim < 2 || dim % 2 != 0) throw UsageError("bench dim must be even and >= 2");
  if (batch < 1 || iters < 1 || warmup < 0) throw UsageError("bad bench arguments");

  BenchReport report;
  report.dim = dim;
  report.batch = batch;
  report.iters = iters;
  report.warmup = warmup;
  report.seed = seed;
  report.threads = 1;

  Rng rng(seed);
  const Index d = dim, half = dim / 2, b = batch;
  const Mat x = random_mat(b, d, rng);
  const Mat w1 = random_mat(half, half, rng);
  const Mat w2 = random_mat(half, half, rng);
  Mat w_dense = Mat::Zero(d, d);
  w_dense.topLeftCorner(half, half) = w1;
  w_dense.bottomRightCorner(half, half) = w2;

  Mat y_dense(b, d), y_block(b, d);
  using clock = std::chrono::steady_clock;
  std::vector<double> dense_times, block_times;
  for (int it = 0; it < warmup + iters; ++it) {
    const auto t0 = clock::now();
    y_dense.noalias() = x * w_dense;
    const auto t1 = clock::now();
    y_block.leftCols(half).noalias() = x.leftCols(half) * w1;
    y_block.rightCols(half).noalias() = x.rightCols(half) * w2;
    const auto t2 = clock::now();
    if (it >= warmup) {
      dense_times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      block_times.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
    }
  }
  report.dense_ms = median_ms(dense_times);
  report.block_ms = median_ms(block_times);
  report.time_ratio = report.block_ms / report.dense_ms;
  report.flop_ratio = 0.5;
  report.max_abs_diff = (y_dense - y_block).cwiseAbs().maxCoeff();
  return report;
}

}  // namespace flopnet
