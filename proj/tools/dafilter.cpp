#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "da/harness.hpp"

namespace {

int cmd_run(const std::string& config_path, std::uint64_t seed,
            const std::string& out, int threads) {
  da::ExperimentConfig cfg = da::parse_config_file(config_path);
  if (seed != 0) cfg.seed = seed;
  if (!out.empty()) cfg.out_dir = out;
  if (threads > 0) cfg.threads = threads;
  cfg.validate();
  da::RunResult res = da::run_experiment(cfg);
  std::printf("wrote %s (T=%d, d=%lld)\n", cfg.out_dir.c_str(), cfg.T,
              static_cast<long long>(res.means.cols()));
  std::printf("wall time: %.2f s\n", res.total_wall_s);
  if (res.pct_below_threshold >= 0.0)
    std::printf("%% |error| < %.6g vs reference: %.4f%%\n",
                cfg.effective_threshold(), res.pct_below_threshold);
  return 0;
}

int cmd_metric(const std::string& file_a, const std::string& file_b,
               double threshold) {
  const Eigen::MatrixXd a = da::read_matrix_csv(file_a);
  const Eigen::MatrixXd b = da::read_matrix_csv(file_b);
  std::printf("%.6f\n", da::error_metric(a, b, threshold));
  return 0;
}

int cmd_convergence(const std::string& config_path,
                    const std::vector<int>& n_list, std::uint64_t seed,
                    const std::string& out, int threads) {
  da::ExperimentConfig cfg = da::parse_config_file(config_path);
  if (seed != 0) cfg.seed = seed;
  if (!out.empty()) cfg.out_dir = out;
  if (threads > 0) cfg.threads = threads;
  da::ConvergenceResult res = da::convergence_study(cfg, n_list);
  std::printf("N,rmse\n");
  for (const auto& p : res.points) std::printf("%d,%.10g\n", p.n_samples, p.rmse);
  std::printf("log-log slope: %.4f\n", res.slope);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data assimilation benchmark: localized sequential MCMC and "
               "ensemble filters on linear and shallow-water models"};
  app.require_subcommand(1);

  std::string config_path, out;
  std::uint64_t seed = 0;
  int threads = 0;
  double threshold = 0.025;
  std::string file_a, file_b;
  std::vector<int> n_list{250, 1000, 4000, 16000};

  auto* run = app.add_subcommand("run", "run an experiment from a config file");
  run->add_option("config", config_path, "config file path")->required();
  run->add_option("--seed", seed, "override the base seed");
  run->add_option("--out", out, "override the output directory");
  run->add_option("--threads", threads, "replica worker threads");

  auto* metric = app.add_subcommand(
      "metric", "percentage of entries of two mean files closer than a threshold");
  metric->add_option("file_a", file_a, "filter means CSV")->required();
  metric->add_option("file_b", file_b, "reference means CSV")->required();
  metric->add_option("--threshold", threshold, "absolute error threshold");

  auto* conv = app.add_subcommand(
      "convergence", "MCMC filter RMSE against the Kalman reference over N");
  conv->add_option("config", config_path, "config file path")->required();
  conv->add_option("--n-list", n_list, "sample counts");
  conv->add_option("--seed", seed, "override the base seed");
  conv->add_option("--out", out, "override the output directory");
  conv->add_option("--threads", threads, "replica worker threads");

  CLI11_PARSE(app, argc, argv);
  try {
    if (run->parsed()) return cmd_run(config_path, seed, out, threads);
    if (metric->parsed()) return cmd_metric(file_a, file_b, threshold);
    if (conv->parsed())
      return cmd_convergence(config_path, n_list, seed, out, threads);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
