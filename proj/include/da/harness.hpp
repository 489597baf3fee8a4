#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "da/gaussian_filters.hpp"
#include "da/observations.hpp"
#include "da/smcmc.hpp"

namespace da {

enum class ModelKind { kLinear, kSwe };
enum class ObsMode { kSwath, kFull, kDrifters };
enum class FilterKind { kKf, kEnkf, kLenkf, kSmcmc, kLsmcmc };
enum class ReferenceKind { kAuto, kKf, kTruth, kPrior, kNone };
enum class NoiseKind { kDiagonal, kFourier };

/// Everything one experiment needs, parsed from an INI-style config file
/// (see configs/ for the schema). All parameters are validated before any
/// compute.
struct ExperimentConfig {
  // [model]
  ModelKind model = ModelKind::kLinear;
  int nx = 33, ny = 33;
  double a_scale = 0.25;
  double sigma_z = 0.05;
  double dx = 1.0, dy = 1.0;
  double gravity = 9.81;
  double depth = 100.0;
  std::string bathymetry_file;
  std::string initial_file;
  double f0 = 0.0, beta = 0.0;
  double tau = 120.0;
  int substeps = 10;
  double bump_amp = 0.0;
  double bump_width = 0.25;
  double u0 = 0.0, v0 = 0.0;

  // [noise] (state noise for the SWE model; the linear model is diagonal)
  NoiseKind noise = NoiseKind::kFourier;
  double noise_sigma = 1e-3;
  int noise_modes = 8;
  std::string noise_cache;

  // [observations]
  ObsMode obs_mode = ObsMode::kSwath;
  double sigma_y = 0.05;
  SwathConfig swath;
  int n_drifters = 0;
  std::vector<std::array<double, 2>> drifter_positions;
  std::string drifter_csv;

  // [filter]
  FilterKind filter = FilterKind::kLsmcmc;
  int n_samples = 1000;
  int n_burn = 0;
  int gamma = 1;
  double q = 0.2;
  double proposal_scale = 0.5;
  double loc_radius = 10.0;
  double w0 = 1e-10;
  EnkfBranch branch = EnkfBranch::kAuto;

  // [run]
  int T = 10;
  int M = 1;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds;  // optional explicit list, length >= M
  int threads = 0;                   // 0: hardware concurrency
  std::string out_dir = "out";
  ReferenceKind reference = ReferenceKind::kAuto;
  int prior_runs = 50;
  double threshold = 0.0;  // 0: sigma_y / 2
  int plot_coord = 0;

  void validate() const;
  std::uint64_t replica_seed(int r) const;
  double effective_threshold() const { return threshold > 0.0 ? threshold : sigma_y / 2.0; }
  ReferenceKind effective_reference() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

struct StepDiag {
  int replica = 0;
  int k = 0;
  double acceptance_rate = 0.0;
  int d_k = 0;
  double wall_ms = 0.0;
  double mean_checksum = 0.0;
};

struct RunResult {
  Eigen::MatrixXd means;      // T x d, replica-averaged
  Eigen::MatrixXd reference;  // T x d, empty when reference is none
  std::vector<StepDiag> diagnostics;
  double total_wall_s = 0.0;
  double pct_below_threshold = -1.0;  // -1 when no reference
};

/// Runs the configured filter for T steps across M replicas (bounded worker
/// pool, deterministic ordered reduction) and persists means_<filter>.csv,
/// means_reference.csv, diagnostics.csv, summary.csv and
/// plotdata_timeseries.csv under cfg.out_dir. Fully reproducible from
/// (config, seeds); wall-clock columns are the only nondeterministic output.
RunResult run_experiment(const ExperimentConfig& cfg);

/// Percentage of entries with |filter - reference| < threshold.
double error_metric(const Eigen::MatrixXd& filter_means,
                    const Eigen::MatrixXd& reference_means, double threshold);

struct ConvergencePoint {
  int n_samples = 0;
  double rmse = 0.0;
};
struct ConvergenceResult {
  std::vector<ConvergencePoint> points;
  double slope = 0.0;
};

/// Runs the unlocalized MCMC filter at each sample count against the exact
/// Kalman reference (linear model only) and fits the log-log RMSE slope.
ConvergenceResult convergence_study(const ExperimentConfig& cfg,
                                    const std::vector<int>& n_list);

/// Least-squares slope of log(y) against log(x).
double fit_loglog_slope(const std::vector<double>& x,
                        const std::vector<double>& y);

void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_csv(const std::string& path);

}  // namespace da
