// Benchmark CLI: runs one workload in baseline (thread-per-op) and/or
// persistent (worker runtime) mode over seeded data, prints a summary, and
// optionally writes a CSV report and an SVG chart. Exits nonzero when the
// two modes disagree on an output checksum.

#include "gpuos/bench.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"gpuos benchmark driver"};

  std::string workload;
  app.add_option("workload", workload, "elementwise|attention|mixed|injection|contention")
      ->required()
      ->check(CLI::IsMember({"elementwise", "attention", "mixed", "injection", "contention"}));

  gpuos::BenchSpec spec;
  auto* ops_opt = app.add_option("--ops", spec.ops, "operators per sequence");
  auto* reps_opt = app.add_option("--reps", spec.reps, "sequence repetitions");
  app.add_option("--elems", spec.elems, "element counts to sweep (comma separated)")
      ->delimiter(',');
  app.add_option("--submitters", spec.submitters,
                 "contention submitter counts to sweep (comma separated)")
      ->delimiter(',');
  app.add_option("--workers", spec.workers, "worker threads (0 = hardware)");
  app.add_option("--capacity", spec.capacity, "task queue slots");
  app.add_option("--seed", spec.seed, "workload data seed");
  std::string mode = "both";
  app.add_option("--mode", mode, "baseline|persistent|both")
      ->check(CLI::IsMember({"baseline", "persistent", "both"}));
  std::string csv_path, plot_path;
  app.add_option("--csv", csv_path, "write the report as CSV");
  app.add_option("--plot", plot_path, "write an SVG latency/speedup chart");
  app.add_option("--template-file", spec.template_file,
                 "extra operator templates for the injection workload");

  CLI11_PARSE(app, argc, argv);

  try {
    spec.workload = gpuos::parse_bench_workload(workload);
    spec.mode = gpuos::parse_bench_mode(mode);
    // The heavy default repetition count is meant for the elementwise
    // launch-overhead comparison; the other workloads default to one pass.
    if (spec.workload != gpuos::BenchWorkload::Elementwise && reps_opt->count() == 0) {
      spec.reps = 1;
    }
    (void)ops_opt;

    const gpuos::BenchReport report = gpuos::run_bench(spec);
    gpuos::print_report(report, std::cout);
    if (!csv_path.empty()) gpuos::emit_csv_file(report, csv_path);
    if (!plot_path.empty()) gpuos::emit_svg_file(report, plot_path);
    if (!report.checksums_match) {
      std::cerr << "error: baseline and persistent checksums disagree\n";
      return 1;
    }
  } catch (const gpuos::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
