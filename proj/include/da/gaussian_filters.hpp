#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "da/covariance.hpp"
#include "da/dynamics.hpp"
#include "da/grid.hpp"
#include "da/observations.hpp"

namespace da {

struct KalmanState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Exact Kalman step for the linear model with selection observations and
/// R = sigma_y^2 I. Gains come from linear solves (no explicit inverses);
/// the posterior covariance uses the Joseph form.
KalmanState kf_step(const LinearModel& model, const Eigen::MatrixXd& cov_q,
                    const KalmanState& state, const ObservationBatch& batch);

enum class EnkfBranch { kAuto, kDirect, kSmw };

/// Stochastic (perturbed-observation) EnKF step on a d x N ensemble.
/// Forecast: member-wise deterministic map plus fresh Q noise (streams keyed
/// by (k, member)); analysis innovations use perturbation streams keyed by
/// (k, observation index). kAuto takes the Sherman-Morrison-Woodbury path
/// when the batch is larger than the ensemble.
Eigen::MatrixXd enkf_step(const LinearModel& model,
                          const CovarianceOperator& cov_q,
                          Eigen::MatrixXd ensemble,
                          const ObservationBatch& batch, std::uint64_t seed,
                          int k, EnkfBranch branch = EnkfBranch::kAuto);

/// Compactly supported piecewise-quintic taper on [0,2].
double gaspari_cohn(double x);

struct LocalizationConfig {
  Partition partition;
  double r = 1.0;      // localization length scale, grid-point units
  double w0 = 1e-10;   // minimum mean weight for keeping an observation
  void validate() const;
};

/// R-localized EnKF: Gaspari-Cohn weights between grid points and
/// observations, per-subdomain mean weights select the local observation
/// subset and inflate R's diagonal, then independent local analyses update
/// the owned rows. Subdomains touching no retained observation keep their
/// forecast. Shares forecast and perturbation streams with enkf_step.
Eigen::MatrixXd lenkf_step(const LinearModel& model,
                           const CovarianceOperator& cov_q,
                           Eigen::MatrixXd ensemble,
                           const ObservationBatch& batch,
                           const LocalizationConfig& loc, const GridSpec& grid,
                           std::uint64_t seed, int k,
                           EnkfBranch branch = EnkfBranch::kAuto);

}  // namespace da
