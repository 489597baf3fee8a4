#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <vector>

#include "da/covariance.hpp"
#include "da/dynamics.hpp"
#include "da/grid.hpp"
#include "da/observations.hpp"

namespace da {

struct ChainConfig {
  int n_samples = 1000;        // retained samples N
  int n_burn = 0;              // discarded initial iterations
  double q = 0.2;              // index move probability, in (0, 1/2]
  double proposal_scale = 0.5; // c in Q' = c^2 Q
  void validate() const;
};

/// Support of the previous step's empirical filter approximation plus the
/// deterministic forecasts the transition density is centered on. Both are
/// d x B with one column per retained sample.
struct SampleBank {
  Eigen::MatrixXd samples;
  Eigen::MatrixXd propagated;
  int size() const { return static_cast<int>(samples.cols()); }
};

struct KernelResult {
  Eigen::MatrixXd samples;  // dim x n_samples, burn-in discarded
  double acceptance_rate = 0.0;
  bool any_accepted = false;
};

using LogTarget = std::function<double(const Eigen::VectorXd&, int)>;
using ProposalSampler = std::function<void(std::mt19937_64&, Eigen::VectorXd&)>;

/// Random-walk Metropolis on the joint (state, auxiliary index) target.
/// State proposal z' = z + W' from the supplied sampler; index proposal is
/// the lazy +-1 walk (move with probability q each way, forced inward at the
/// ends). Acceptance runs in log space with the Hastings correction for the
/// forced boundary moves: the numerator carries a factor q when leaving an
/// end index, and 1/q when stepping onto one. Runs n_samples + n_burn
/// iterations and returns the last n_samples states. j_init and the target's
/// index argument are 0-based over [0, bank_size).
KernelResult rwm_joint_kernel(int bank_size, const LogTarget& log_target,
                              const ProposalSampler& propose,
                              const ChainConfig& cfg,
                              const Eigen::VectorXd& z_init, int j_init,
                              std::mt19937_64& rng,
                              std::vector<int>* j_trace = nullptr);

struct SmcmcStepResult {
  Eigen::MatrixXd samples;  // d x N full-dimension retained samples
  Eigen::VectorXd mean;
  double acceptance_rate = 0.0;
  int active_points = 0;    // d_k; full grid for the unlocalized filter
};

/// One SMCMC assimilation step. bank.propagated must hold the deterministic
/// forecasts. k = 1 runs a plain RWM on the state initialized at the noisy
/// forecast of the (single-sample) bank; k >= 2 samples the joint
/// (state, index) target g_k(z,y) f_k(Zbreve^(j), z) p(j).
SmcmcStepResult smcmc_step(const SampleBank& bank,
                           const ObservationBatch& batch,
                           const CovarianceOperator& cov_q,
                           const ChainConfig& cfg, const StateLayout& layout,
                           std::uint64_t seed, int k);

/// One localized step: the chain runs on the coordinates of the subdomains
/// hit by observations, with the transition density replaced by the
/// restricted quadratic form and proposals drawn from the restricted Q'.
/// Complement coordinates of retained sample i come from the noisy forecast
/// Z~^(i) (which requires bank.size() == cfg.n_samples for k >= 2). An empty
/// batch degenerates to the pure noisy forecast. With a single whole-grid
/// subdomain the step reproduces smcmc_step exactly, RNG stream for stream.
SmcmcStepResult lsmcmc_step(const SampleBank& bank,
                            const ObservationBatch& batch,
                            const CovarianceOperator& cov_q,
                            const Partition& partition,
                            const ChainConfig& cfg, const StateLayout& layout,
                            std::uint64_t seed, int k);

/// Empirical estimate of a filter expectation over retained samples.
Eigen::VectorXd estimate(const Eigen::MatrixXd& samples);
double estimate(const Eigen::MatrixXd& samples,
                const std::function<double(const Eigen::VectorXd&)>& phi);

/// Coordinatewise average over independent replica means.
Eigen::VectorXd multi_run_mean(const std::vector<Eigen::VectorXd>& run_means);

}  // namespace da
