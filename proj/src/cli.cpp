#include "flopnet/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <sstream>

#include "flopnet/accounting.hpp"
#include "flopnet/models.hpp"

namespace flopnet {

namespace {

struct VerifyOptions {
  std::string family = "vit";
  std::string size = "XT";
  std::string variant = "equivariant";
  int image_size = 0;  // 0 = config default
  std::uint64_t seed = 0;
  double tol = 1e-5;
  int samples = 32;
  std::string dump_dir;
  bool json = false;
};

void print_check_line(std::ostream& out, const CheckReport& r, bool expected_fail = false) {
  out << (r.passed ? "[ok]   " : (expected_fail ? "[info] " : "[FAIL] ")) << std::left
      << std::setw(28) << r.name << " worst=" << std::setprecision(9) << r.worst_violation
      << " tol=" << r.tol << " samples=" << r.n_samples;
  if (expected_fail) out << (r.passed ? "  (baseline unexpectedly invariant)" : "  (expected violation)");
  out << "\n";
}

int cmd_verify(const VerifyOptions& opt, std::ostream& out) {
  ModelConfig cfg = named_config(family_from_string(opt.family), opt.size,
                                 variant_from_string(opt.variant));
  if (opt.image_size > 0) cfg.image_size = opt.image_size;
  cfg.validate();

  Model<float> model = build_model<float>(cfg, opt.seed);
  nlohmann::ordered_json checks_json = nlohmann::ordered_json::array();
  bool all_passed = true;

  std::vector<CheckReport> reports;
  for (const auto& check : layer_checks(model)) {
    CheckReport r = check_equivariance<float>(check.name, check.fn, check.in_action,
                                              check.out_action, check.input_shape, opt.samples,
                                              opt.tol, opt.seed);
    all_passed = all_passed && r.passed;
    reports.push_back(r);
    checks_json.push_back(r.to_json());
  }

  const bool invariance_expected = cfg.variant == Variant::equivariant;
  CheckReport e2e = end_to_end_invariance(model, opt.samples, opt.tol, opt.seed);
  if (invariance_expected) all_passed = all_passed && e2e.passed;

  nlohmann::ordered_json boundary_json;
  if (cfg.variant == Variant::hybrid) {
    CheckReport b = hybrid_boundary_check(model, opt.samples, opt.tol, opt.seed);
    all_passed = all_passed && b.passed;
    boundary_json = b.to_json();
    reports.push_back(b);
  }

  if (!opt.dump_dir.empty()) {
    Rng rng(opt.seed);
    const Tensor<float> img = Tensor<float>::normal({3, cfg.image_size, cfg.image_size}, rng);
    dump_features(model, img, opt.dump_dir);
  }

  if (opt.json) {
    nlohmann::ordered_json j;
    j["config"] = cfg.to_json();
    j["checks"] = checks_json;
    nlohmann::ordered_json e2e_json = e2e.to_json();
    e2e_json["expected_fail"] = !invariance_expected;
    j["end_to_end"] = e2e_json;
    if (!boundary_json.is_null()) j["hybrid_boundary"] = boundary_json;
    j["passed"] = all_passed;
    out << j.dump(2) << "\n";
  } else {
    out << "verify " << cfg.display_name() << " (seed " << opt.seed << ")\n";
    for (std::size_t i = 0; i < reports.size(); ++i) print_check_line(out, reports[i]);
    print_check_line(out, e2e, !invariance_expected);
    out << (all_passed ? "all checks passed" : "CHECKS FAILED") << "\n";
  }
  return all_passed ? 0 : 1;
}

ModelConfig config_from_flags(const std::string& family, const std::string& size,
                              const std::string& variant) {
  return named_config(family_from_string(family), size, variant_from_string(variant));
}

int cmd_flops(const ModelConfig& cfg, bool json, std::ostream& out) {
  FlopReport report = count_flops(cfg);
  if (json) {
    out << report.to_json().dump(2) << "\n";
  } else {
    out << report.config_name << ": " << report.total() << " flops ("
        << std::setprecision(4) << static_cast<double>(report.total()) / 1e9 << "e9)\n";
    out << "convention: " << report.convention << "\n";
    if (report.potential_dw_mult_reduction > 0)
      out << "potential further depthwise reduction: " << report.potential_dw_mult_reduction
          << " mults\n";
  }
  return 0;
}

int cmd_params(const ModelConfig& cfg, bool json, std::ostream& out) {
  ParamReport report = count_params(cfg);
  if (json) {
    out << report.to_json().dump(2) << "\n";
  } else {
    out << report.config_name << ": " << report.total() << " params ("
        << std::setprecision(4) << static_cast<double>(report.total()) / 1e6 << "e6)\n";
  }
  return 0;
}

int cmd_table(bool json, const std::string& out_file, std::ostream& out, std::ostream& err) {
  const auto rows = ratio_table(paper_configs());
  std::string text = json ? ratio_table_json(rows).dump(2) + "\n" : render_ratio_table(rows);
  if (!out_file.empty()) {
    std::ofstream os(out_file);
    if (!os) {
      err << "cannot write to " << out_file << "\n";
      return 2;
    }
    os << text;
    return 0;
  }
  out << text;
  return 0;
}

int cmd_bench(int dim, int batch, int iters, int warmup, std::uint64_t seed, bool json,
              std::ostream& out) {
  BenchReport report = bench_blockdiag(dim, batch, iters, warmup, seed);
  if (json) {
    out << report.to_json().dump(2) << "\n";
  } else {
    out << "block-diagonal benchmark d=" << dim << " batch=" << batch << "\n"
        << "  dense:  " << std::setprecision(6) << report.dense_ms << " ms (median of "
        << iters << ")\n"
        << "  block:  " << report.block_ms << " ms\n"
        << "  time ratio: " << report.time_ratio << "  flop ratio: " << report.flop_ratio
        << "  max |diff|: " << report.max_abs_diff << "\n";
  }
  return 0;
}

int cmd_train_demo(int steps, double lr, std::uint64_t seed, int classes, bool json,
                   std::ostream& out) {
  // Desk-scale equivariant ViT on the synthetic 16x16 mirror-invariant task.
  ModelConfig cfg = named_config(Family::vit, "XT", Variant::equivariant);
  cfg.image_size = 16;
  TrainReport report = train_demo(cfg, steps, lr, seed, classes);
  if (json) {
    out << report.to_json().dump(2) << "\n";
  } else {
    out << "train-demo: " << steps << " steps, " << classes << " classes, lr=" << lr
        << ", seed=" << seed << "\n";
    if (report.diverged) {
      out << "DIVERGED at step " << report.diverged_step << "\n";
      return 1;
    }
    out << "  final loss:        " << std::setprecision(6) << report.final_loss << "\n";
    out << "  holdout accuracy:  " << report.holdout_accuracy << "\n";
    out << "  max invariance gap: " << report.max_invariance_gap << "\n";
  }
  return report.diverged ? 1 : 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"flopping-equivariant networks: verification, counting, benchmarks"};
  app.require_subcommand(1);

  VerifyOptions vopt;
  auto* verify = app.add_subcommand("verify", "equivariance and invariance checks");
  verify->add_option("--family", vopt.family, "resmlp | vit | convnext_iso");
  verify->add_option("--size", vopt.size, "XT | T | S | B | L | H (family dependent)");
  verify->add_option("--variant", vopt.variant, "baseline | equivariant | hybrid");
  verify->add_option("--image-size", vopt.image_size, "override input image size");
  verify->add_option("--seed", vopt.seed, "rng seed");
  verify->add_option("--tol", vopt.tol, "relative tolerance");
  verify->add_option("--samples", vopt.samples, "random inputs per check");
  verify->add_option("--dump-features", vopt.dump_dir, "dump features as EQT1 to DIR");
  verify->add_flag("--json", vopt.json, "JSON output");

  std::string family = "vit", size = "B", variant = "baseline";
  bool json = false;
  auto* flops = app.add_subcommand("flops", "analytic FLOP count for one forward pass");
  flops->add_option("--family", family);
  flops->add_option("--size", size);
  flops->add_option("--variant", variant);
  flops->add_flag("--json", json);

  auto* params = app.add_subcommand("params", "free-parameter count");
  params->add_option("--family", family);
  params->add_option("--size", size);
  params->add_option("--variant", variant);
  params->add_flag("--json", json);

  std::string out_file;
  auto* table = app.add_subcommand("table", "params/FLOPs for all published configs");
  table->add_flag("--json", json);
  table->add_option("--out", out_file, "write the table to FILE");

  int dim = 2048, batch = 256, iters = 20, warmup = 10;
  std::uint64_t bench_seed = 0;
  auto* bench = app.add_subcommand("bench", "dense vs block-diagonal matmul wall clock");
  bench->add_option("--dim", dim);
  bench->add_option("--batch", batch);
  bench->add_option("--iters", iters);
  bench->add_option("--warmup", warmup);
  bench->add_option("--seed", bench_seed);
  bench->add_flag("--json", json);

  int steps = 500, classes = 4;
  double lr = 1.0;
  std::uint64_t demo_seed = 0;
  auto* demo = app.add_subcommand("train-demo", "train a tiny equivariant ViT on synthetic data");
  demo->add_option("--steps", steps);
  demo->add_option("--lr", lr);
  demo->add_option("--seed", demo_seed);
  demo->add_option("--classes", classes);
  demo->add_flag("--json", json);

  std::vector<const char*> argv;
  argv.push_back("flopnet");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return 2;
  }

  try {
    if (verify->parsed()) return cmd_verify(vopt, out);
    if (flops->parsed()) return cmd_flops(config_from_flags(family, size, variant), json, out);
    if (params->parsed()) return cmd_params(config_from_flags(family, size, variant), json, out);
    if (table->parsed()) return cmd_table(json, out_file, out, err);
    if (bench->parsed()) return cmd_bench(dim, batch, iters, warmup, bench_seed, json, out);
    if (demo->parsed()) return cmd_train_demo(steps, lr, demo_seed, classes, json, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return 2;
  }
  err << "no subcommand given\n";
  return 2;
}

}  // namespace flopnet
