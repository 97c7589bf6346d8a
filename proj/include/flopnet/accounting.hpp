#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "flopnet/config.hpp"

namespace flopnet {

// FLOP convention (documented in every report):
//   - one multiply-accumulate = 1 FLOP (matmul / conv kinds),
//   - elementwise add / mul = 1 FLOP per element,
//   - GELU = 6 per element (equivariant pointwise form adds 4 for the pair
//     butterflies), softmax = 5 per element, layer norm = 8 per element
//     (equivariant form adds 4 for the pair butterflies).
extern const char* const kFlopConvention;

struct FlopEntry {
  std::string name;
  std::string kind;  // matmul | conv | add | mul | norm | softmax | activation
  std::uint64_t flops = 0;
};

struct FlopReport {
  std::string config_name;
  std::string convention;
  std::vector<FlopEntry> entries;
  // Multiplications a reduced symmetric/antisymmetric depthwise schedule
  // would save; informational, never part of the total.
  std::uint64_t potential_dw_mult_reduction = 0;

  std::uint64_t total() const;
  std::uint64_t total_of_kind(const std::string& kind) const;
  std::uint64_t matmul_conv_macs() const;
  nlohmann::ordered_json to_json() const;
};

struct ParamEntry {
  std::string name;
  std::uint64_t free_params = 0;
};

struct ParamReport {
  std::string config_name;
  std::vector<ParamEntry> entries;

  std::uint64_t total() const;
  nlohmann::ordered_json to_json() const;
};

// Convention helper: one dense linear map (c -> d) over t positions costs
// t*c*d MAC-FLOPs plus t*d bias adds.
std::uint64_t dense_linear_flops(std::uint64_t t, std::uint64_t c, std::uint64_t d, bool bias);

// Analytic counts for one forward pass at cfg.image_size; no tensors are
// executed. Block-diagonal linear layers (including the folded equivariant
// patch embedding) cost half the dense MACs; the parity-constrained
// depthwise convolutions run at full kernel cost, matching execution.
FlopReport count_flops(const ModelConfig& cfg);
ParamReport count_params(const ModelConfig& cfg);

struct RatioRow {
  ModelConfig cfg;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  double param_ratio = 1.0;  // vs the baseline of the same architecture
  double flop_ratio = 1.0;
};

// Pairs every config with the baseline of the same architecture in the list;
// throws UsageError if a non-baseline config has no baseline partner.
std::vector<RatioRow> ratio_table(const std::vector<ModelConfig>& configs);

nlohmann::ordered_json ratio_table_json(const std::vector<RatioRow>& rows);
std::string render_ratio_table(const std::vector<RatioRow>& rows);

struct BenchReport {
  int dim = 0;
  int batch = 0;
  int iters = 0;
  int warmup = 0;
  std::uint64_t seed = 0;
  int threads = 1;
  double dense_ms = 0;
  double block_ms = 0;
  double time_ratio = 0;
  double flop_ratio = 0.5;  // analytic, exact by construction
  double max_abs_diff = 0;  // dense-with-zero-blocks vs block-diagonal path

  nlohmann::ordered_json to_json() const;
};

// Wall-clock comparison of one dense (batch x d)(d x d) product against the
// two half products, on matched weights (the dense matrix has explicit zero
// off-diagonal blocks). Single execution thread.
BenchReport bench_blockdiag(int dim, int batch, int iters, int warmup, std::uint64_t seed);

}  // namespace flopnet
