#include "da/smcmc.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "da/rng.hpp"

namespace da {

void ChainConfig::validate() const {
  if (n_samples < 1) throw std::invalid_argument("ChainConfig: n_samples < 1");
  if (n_burn < 0) throw std::invalid_argument("ChainConfig: n_burn < 0");
  if (!(q > 0.0 && q <= 0.5))
    throw std::invalid_argument("ChainConfig: q must be in (0, 1/2]");
  if (!(proposal_scale > 0.0))
    throw std::invalid_argument("ChainConfig: proposal_scale must be > 0");
}

KernelResult rwm_joint_kernel(int bank_size, const LogTarget& log_target,
                              const ProposalSampler& propose,
                              const ChainConfig& cfg,
                              const Eigen::VectorXd& z_init, int j_init,
                              std::mt19937_64& rng,
                              std::vector<int>* j_trace) {
  cfg.validate();
  if (bank_size < 1) throw std::invalid_argument("rwm_joint_kernel: empty bank");
  if (j_init < 0 || j_init >= bank_size)
    throw std::invalid_argument("rwm_joint_kernel: j_init out of range");

  const int total = cfg.n_samples + cfg.n_burn;
  const int dim = static_cast<int>(z_init.size());
  const double log_q = std::log(cfg.q);

  Eigen::VectorXd z = z_init;
  int j = j_init;
  double log_pi = log_target(z, j);
  if (!std::isfinite(log_pi))
    throw std::runtime_error(
        "rwm_joint_kernel: target not finite at the initial state");

  KernelResult res;
  res.samples.resize(dim, cfg.n_samples);
  if (j_trace) j_trace->reserve(total);

  Eigen::VectorXd step(dim), z_prop(dim);
  long long accepted = 0;
  auto at_end = [&](int idx) { return idx == 0 || idx == bank_size - 1; };

  for (int it = 0; it < total; ++it) {
    propose(rng, step);
    z_prop = z + step;

    int j_prop = j;
    if (bank_size >= 2) {
      if (j == 0) {
        j_prop = 1;
      } else if (j == bank_size - 1) {
        j_prop = j - 1;
      } else {
        const double u = uniform01(rng);
        if (u < cfg.q)
          j_prop = j - 1;
        else if (u < 2.0 * cfg.q)
          j_prop = j + 1;
      }
    }

    const double log_pi_prop = log_target(z_prop, j_prop);
    double log_alpha = log_pi_prop - log_pi;
    // Hastings correction for the forced moves at the index ends: leaving an
    // end multiplies the numerator by q, stepping onto one divides by q.
    // With bank_size == 2 both ends force the swap and the walk is symmetric.
    if (bank_size > 2 && j_prop != j) {
      if (at_end(j)) log_alpha += log_q;
      if (at_end(j_prop)) log_alpha -= log_q;
    }

    const double u = uniform01(rng);
    if (std::log(u) < log_alpha) {
      z = z_prop;
      j = j_prop;
      log_pi = log_pi_prop;
      ++accepted;
    }
    if (j_trace) j_trace->push_back(j);
    if (it >= cfg.n_burn) res.samples.col(it - cfg.n_burn) = z;
  }
  res.acceptance_rate = static_cast<double>(accepted) / total;
  res.any_accepted = accepted > 0;
  if (!res.any_accepted)
    std::cerr << "rwm_joint_kernel: warning: no proposal accepted in " << total
              << " iterations\n";
  return res;
}

namespace {

// Everything the restricted target needs, precomputed once per step.
struct StepContext {
  std::vector<int> state_idx;   // restricted-state rows within the full state
  std::vector<int> obs_idx;     // batch value slot -> restricted-state row
  Eigen::MatrixXd bank_active;  // propagated bank gathered on state_idx
  RestrictedGaussian transition;
};

std::vector<int> all_points(int n) {
  std::vector<int> pts(n);
  std::iota(pts.begin(), pts.end(), 0);
  return pts;
}

StepContext make_context(const SampleBank& bank, const ObservationBatch& batch,
                         const CovarianceOperator& cov,
                         const StateLayout& layout,
                         const std::vector<int>& points) {
  StepContext ctx;
  const int n = layout.points();
  const int dk = static_cast<int>(points.size());
  ctx.state_idx.reserve(layout.fields * dk);
  for (int f = 0; f < layout.fields; ++f)
    for (int p : points) ctx.state_idx.push_back(f * n + p);

  ctx.bank_active.resize(ctx.state_idx.size(), bank.size());
  for (int c = 0; c < bank.size(); ++c)
    for (std::size_t r = 0; r < ctx.state_idx.size(); ++r)
      ctx.bank_active(r, c) = bank.propagated(ctx.state_idx[r], c);

  // positions of the observed entries inside the restricted vector
  ctx.obs_idx.reserve(batch.size());
  for (std::size_t m = 0; m < batch.locations.size(); ++m) {
    const auto it = std::lower_bound(points.begin(), points.end(),
                                     batch.locations[m]);
    if (it == points.end() || *it != batch.locations[m])
      throw std::logic_error(
          "smcmc: observation location escaped the active set");
    const int pos = static_cast<int>(it - points.begin());
    for (int t = 0; t < batch.s(); ++t)
      ctx.obs_idx.push_back(batch.fields[t] * dk + pos);
  }

  ctx.transition = cov.restrict(points);
  return ctx;
}

SmcmcStepResult run_core(const SampleBank& bank, const ObservationBatch& batch,
                         const CovarianceOperator& cov, const ChainConfig& cfg,
                         const StateLayout& layout, std::uint64_t seed, int k,
                         const std::vector<int>* active_points) {
  cfg.validate();
  const int d = layout.dim();
  if (bank.samples.rows() != d || bank.propagated.rows() != d ||
      bank.propagated.cols() != bank.samples.cols())
    throw std::invalid_argument("smcmc: bank shape mismatch");
  if (cov.dim() != d) throw std::invalid_argument("smcmc: covariance mismatch");
  batch.validate(layout.points(), layout.fields);
  const bool localized = active_points != nullptr;
  const int bank_size = bank.size();
  if (k < 1) throw std::invalid_argument("smcmc: time index must be >= 1");
  if (k == 1 && bank_size != 1)
    throw std::invalid_argument("smcmc: the k=1 bank is the single initial state");

  const std::vector<int>& points =
      localized ? *active_points : all_points(layout.points());
  StepContext ctx = make_context(bank, batch, cov, layout, points);
  const int dim_r = static_cast<int>(ctx.state_idx.size());

  // noisy forecasts: the localized filter needs all of them for the
  // complement write-back; the unlocalized one only consumes the chain's
  // initial draw, from the identical per-sample stream
  Eigen::MatrixXd noisy;
  int j0 = 0;
  if (k > 1) {
    auto init_rng = substream(seed, Stream::kChainInit, k);
    j0 = uniform_int(init_rng, 0, bank_size - 1);
  }
  if (localized && k > 1 && bank_size != cfg.n_samples)
    throw std::invalid_argument(
        "lsmcmc: bank size must equal n_samples for the complement update");
  Eigen::VectorXd init_noise;
  if (localized) {
    noisy.resize(d, bank_size);
    Eigen::VectorXd w;
    for (int i = 0; i < bank_size; ++i) {
      auto rng = substream(seed, Stream::kForecastNoise, k, i);
      cov.sample(rng, w);
      noisy.col(i) = bank.propagated.col(i) + w;
    }
  } else {
    auto rng = substream(seed, Stream::kForecastNoise, k, j0);
    cov.sample(rng, init_noise);
  }

  Eigen::VectorXd z0(dim_r);
  {
    Eigen::VectorXd init_full =
        localized ? Eigen::VectorXd(noisy.col(j0))
                  : Eigen::VectorXd(bank.propagated.col(j0) + init_noise);
    for (int r = 0; r < dim_r; ++r) z0[r] = init_full[ctx.state_idx[r]];
  }

  Eigen::VectorXd innov(dim_r), gathered(batch.size());
  LogTarget target = [&](const Eigen::VectorXd& z, int j) {
    for (int m = 0; m < batch.size(); ++m) gathered[m] = z[ctx.obs_idx[m]];
    innov = z - ctx.bank_active.col(j);
    return obs_loglik(gathered, batch) + ctx.transition.logpdf(innov);
  };
  ProposalSampler propose = [&](std::mt19937_64& rng, Eigen::VectorXd& out) {
    cov.sample_restricted(rng, points, out);
    out *= cfg.proposal_scale;
  };

  auto chain_rng = substream(seed, Stream::kChain, k);
  KernelResult kr = rwm_joint_kernel(k == 1 ? 1 : bank_size, target, propose,
                                     cfg, z0, k == 1 ? 0 : j0, chain_rng);

  SmcmcStepResult out;
  out.acceptance_rate = kr.acceptance_rate;
  out.active_points = static_cast<int>(points.size());
  if (!localized) {
    out.samples = std::move(kr.samples);
  } else {
    out.samples.resize(d, cfg.n_samples);
    for (int i = 0; i < cfg.n_samples; ++i) {
      // complement coordinates from the noisy forecast of slot i (the single
      // forecast at k = 1)
      out.samples.col(i) = noisy.col(k == 1 ? 0 : i);
      for (int r = 0; r < dim_r; ++r)
        out.samples(ctx.state_idx[r], i) = kr.samples(r, i);
    }
  }
  out.mean = out.samples.rowwise().mean();
  return out;
}

}  // namespace

SmcmcStepResult smcmc_step(const SampleBank& bank,
                           const ObservationBatch& batch,
                           const CovarianceOperator& cov_q,
                           const ChainConfig& cfg, const StateLayout& layout,
                           std::uint64_t seed, int k) {
  return run_core(bank, batch, cov_q, cfg, layout, seed, k, nullptr);
}

SmcmcStepResult lsmcmc_step(const SampleBank& bank,
                            const ObservationBatch& batch,
                            const CovarianceOperator& cov_q,
                            const Partition& partition,
                            const ChainConfig& cfg, const StateLayout& layout,
                            std::uint64_t seed, int k) {
  if (partition.nx != layout.nx || partition.ny != layout.ny)
    throw std::invalid_argument("lsmcmc_step: partition does not match layout");
  if (batch.locations.empty()) {
    // no observations anywhere: the step is the pure noisy forecast
    cfg.validate();
    const int d = layout.dim();
    SmcmcStepResult out;
    out.samples.resize(d, bank.size());
    Eigen::VectorXd w;
    for (int i = 0; i < bank.size(); ++i) {
      auto rng = substream(seed, Stream::kForecastNoise, k, i);
      cov_q.sample(rng, w);
      out.samples.col(i) = bank.propagated.col(i) + w;
    }
    out.mean = out.samples.rowwise().mean();
    out.acceptance_rate = 0.0;
    out.active_points = 0;
    return out;
  }
  ActiveSet active = active_set(partition, batch.locations, k);
  return run_core(bank, batch, cov_q, cfg, layout, seed, k, &active.points);
}

Eigen::VectorXd estimate(const Eigen::MatrixXd& samples) {
  if (samples.cols() < 1) throw std::invalid_argument("estimate: no samples");
  return samples.rowwise().mean();
}

double estimate(const Eigen::MatrixXd& samples,
                const std::function<double(const Eigen::VectorXd&)>& phi) {
  if (samples.cols() < 1) throw std::invalid_argument("estimate: no samples");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < samples.cols(); ++i) acc += phi(samples.col(i));
  return acc / static_cast<double>(samples.cols());
}

Eigen::VectorXd multi_run_mean(const std::vector<Eigen::VectorXd>& run_means) {
  if (run_means.empty()) throw std::invalid_argument("multi_run_mean: empty");
  Eigen::VectorXd acc = run_means.front();
  for (std::size_t i = 1; i < run_means.size(); ++i) {
    if (run_means[i].size() != acc.size())
      throw std::invalid_argument("multi_run_mean: dimension mismatch");
    acc += run_means[i];
  }
  return acc / static_cast<double>(run_means.size());
}

}  // namespace da
