#include "da/gaussian_filters.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "da/rng.hpp"

namespace da {

KalmanState kf_step(const LinearModel& model, const Eigen::MatrixXd& cov_q,
                    const KalmanState& state, const ObservationBatch& batch) {
  model.validate();
  const int d = model.dim;
  if (state.mean.size() != d || state.cov.rows() != d || state.cov.cols() != d)
    throw std::invalid_argument("kf_step: state dimension mismatch");
  if (cov_q.rows() != d || cov_q.cols() != d)
    throw std::invalid_argument("kf_step: Q dimension mismatch");
  if (batch.s() != 1 || batch.fields[0] != 0)
    throw std::invalid_argument("kf_step: expects single-field observations");

  const double a = model.a_scale;
  Eigen::VectorXd mean = a * state.mean;
  Eigen::MatrixXd cov = (a * a) * state.cov + cov_q;

  const auto& locs = batch.locations;
  const int m = static_cast<int>(locs.size());
  if (m == 0) return {std::move(mean), std::move(cov)};

  // CP = C P' (rows of the prior covariance at observed locations)
  Eigen::MatrixXd cp(m, d);
  for (int r = 0; r < m; ++r) cp.row(r) = cov.row(locs[r]);
  Eigen::MatrixXd s(m, m);
  for (int c = 0; c < m; ++c) s.col(c) = cp.col(locs[c]);
  s.diagonal().array() += batch.sigma_y * batch.sigma_y;

  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("kf_step: innovation covariance not positive definite");

  // K = P' C^T S^-1, via S K^T = C P'
  Eigen::MatrixXd gain = llt.solve(cp).transpose();  // d x m

  Eigen::VectorXd innovation = batch.values;
  for (int r = 0; r < m; ++r) innovation[r] -= mean[locs[r]];
  mean.noalias() += gain * innovation;

  // Joseph form: (I-KC) P' (I-KC)^T + sigma_y^2 K K^T, with C a selection
  Eigen::MatrixXd mp = cov;
  mp.noalias() -= gain * cp;  // (I-KC) P'
  Eigen::MatrixXd mpc(d, m);
  for (int c = 0; c < m; ++c) mpc.col(c) = mp.col(locs[c]);
  Eigen::MatrixXd post = mp;
  post.noalias() -= mpc * gain.transpose();
  post.noalias() += (batch.sigma_y * batch.sigma_y) * gain * gain.transpose();
  post = 0.5 * (post + post.transpose()).eval();
  return {std::move(mean), std::move(post)};
}

namespace {

// Solves S X = D for the perturbed-observation analysis, where
// S = B B^T + R with B the scaled observation anomalies and R diagonal.
// Direct: factor S in observation space. SMW: solve in ensemble space.
Eigen::MatrixXd innovation_solve(const Eigen::MatrixXd& b,
                                 const Eigen::VectorXd& r_diag,
                                 const Eigen::MatrixXd& d, EnkfBranch branch) {
  const int m = static_cast<int>(b.rows());
  const int n = static_cast<int>(b.cols());
  const bool smw =
      branch == EnkfBranch::kSmw || (branch == EnkfBranch::kAuto && m > n);
  if (!smw) {
    Eigen::MatrixXd s = b * b.transpose();
    s.diagonal() += r_diag;
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error(
          "enkf: innovation system not positive definite (rank collapse?)");
    return llt.solve(d);
  }
  // (BB^T+R)^-1 = R^-1 - R^-1 B (I + B^T R^-1 B)^-1 B^T R^-1
  Eigen::VectorXd rinv = r_diag.cwiseInverse();
  Eigen::MatrixXd rb = rinv.asDiagonal() * b;             // m x n
  Eigen::MatrixXd core = b.transpose() * rb;              // n x n
  core.diagonal().array() += 1.0;
  Eigen::LLT<Eigen::MatrixXd> llt(core);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("enkf: SMW core not positive definite");
  Eigen::MatrixXd rd = rinv.asDiagonal() * d;             // m x cols
  return rd - rb * llt.solve(rb.transpose() * d);
}

struct ForecastParts {
  Eigen::MatrixXd anomalies;   // Zf - mean, d x N
  Eigen::MatrixXd obs_anom;    // anomalies at observed rows, scaled 1/sqrt(N-1)
  Eigen::MatrixXd innovations; // perturbed obs minus forecast obs, m x N
};

void forecast_ensemble(const LinearModel& model, const CovarianceOperator& cov_q,
                       Eigen::MatrixXd& ens, std::uint64_t seed, int k) {
  model.validate();
  const int n_members = static_cast<int>(ens.cols());
  if (n_members < 2) throw std::invalid_argument("enkf: ensemble size must be >= 2");
  if (ens.rows() != model.dim)
    throw std::invalid_argument("enkf: ensemble dimension mismatch");
  Eigen::VectorXd noise;
  for (int i = 0; i < n_members; ++i) {
    auto rng = substream(seed, Stream::kForecastNoise, k, i);
    cov_q.sample(rng, noise);
    ens.col(i) = model.a_scale * ens.col(i) + noise;
  }
}

ForecastParts analysis_parts(const Eigen::MatrixXd& ens,
                             const ObservationBatch& batch, std::uint64_t seed,
                             int k) {
  const int n_members = static_cast<int>(ens.cols());
  const int m = static_cast<int>(batch.locations.size());
  ForecastParts parts;
  parts.anomalies = ens.colwise() - ens.rowwise().mean().eval();
  parts.obs_anom.resize(m, n_members);
  parts.innovations.resize(m, n_members);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n_members - 1));
  for (int r = 0; r < m; ++r) {
    const int loc = batch.locations[r];
    parts.obs_anom.row(r) = scale * parts.anomalies.row(loc);
    auto rng = substream(seed, Stream::kObsPerturb, k, r);
    for (int i = 0; i < n_members; ++i)
      parts.innovations(r, i) =
          batch.values[r] + batch.sigma_y * standard_normal(rng) - ens(loc, i);
  }
  return parts;
}

}  // namespace

Eigen::MatrixXd enkf_step(const LinearModel& model,
                          const CovarianceOperator& cov_q,
                          Eigen::MatrixXd ensemble,
                          const ObservationBatch& batch, std::uint64_t seed,
                          int k, EnkfBranch branch) {
  if (batch.s() != 1 || batch.fields[0] != 0)
    throw std::invalid_argument("enkf_step: expects single-field observations");
  forecast_ensemble(model, cov_q, ensemble, seed, k);
  if (batch.locations.empty()) return ensemble;

  ForecastParts parts = analysis_parts(ensemble, batch, seed, k);
  const int m = static_cast<int>(batch.locations.size());
  Eigen::VectorXd r_diag =
      Eigen::VectorXd::Constant(m, batch.sigma_y * batch.sigma_y);
  Eigen::MatrixXd x = innovation_solve(parts.obs_anom, r_diag,
                                       parts.innovations, branch);
  const double scale =
      1.0 / std::sqrt(static_cast<double>(ensemble.cols() - 1));
  if (m <= ensemble.cols()) {
    Eigen::MatrixXd pa = (scale * parts.anomalies) * parts.obs_anom.transpose();
    ensemble.noalias() += pa * x;
  } else {
    ensemble.noalias() +=
        (scale * parts.anomalies) * (parts.obs_anom.transpose() * x);
  }
  return ensemble;
}

double gaspari_cohn(double x) {
  if (x < 0.0) throw std::invalid_argument("gaspari_cohn: negative argument");
  if (x < 1.0) {
    return ((((-0.25 * x + 0.5) * x + 0.625) * x - 5.0 / 3.0) * x) * x + 1.0;
  }
  if (x <= 2.0) {
    return ((((x / 12.0 - 0.5) * x + 0.625) * x + 5.0 / 3.0) * x - 5.0) * x +
           4.0 - 2.0 / (3.0 * x);
  }
  return 0.0;
}

void LocalizationConfig::validate() const {
  if (r <= 0.0) throw std::invalid_argument("LocalizationConfig: r must be > 0");
  if (w0 <= 0.0 || w0 >= 1.0)
    throw std::invalid_argument("LocalizationConfig: w0 must be in (0,1)");
  if (partition.gamma_effective < 1)
    throw std::invalid_argument("LocalizationConfig: empty partition");
}

Eigen::MatrixXd lenkf_step(const LinearModel& model,
                           const CovarianceOperator& cov_q,
                           Eigen::MatrixXd ensemble,
                           const ObservationBatch& batch,
                           const LocalizationConfig& loc, const GridSpec& grid,
                           std::uint64_t seed, int k, EnkfBranch branch) {
  loc.validate();
  if (batch.s() != 1 || batch.fields[0] != 0)
    throw std::invalid_argument("lenkf_step: expects single-field observations");
  if (grid.points() != model.dim)
    throw std::invalid_argument("lenkf_step: grid does not match state");
  forecast_ensemble(model, cov_q, ensemble, seed, k);
  if (batch.locations.empty()) return ensemble;

  ForecastParts parts = analysis_parts(ensemble, batch, seed, k);
  const int m = static_cast<int>(batch.locations.size());
  const double sy2 = batch.sigma_y * batch.sigma_y;
  const double scale =
      1.0 / std::sqrt(static_cast<double>(ensemble.cols() - 1));

  // distance-based weights: physical coordinates, r measured in grid points
  const double dist_scale = loc.r * std::min(grid.dx, grid.dy);
  Eigen::MatrixXd weights(grid.points(), m);
  for (int j = 0; j < m; ++j) {
    const double ox = grid.point_x(batch.locations[j]);
    const double oy = grid.point_y(batch.locations[j]);
    for (int p = 0; p < grid.points(); ++p) {
      const double ddx = grid.point_x(p) - ox;
      const double ddy = grid.point_y(p) - oy;
      weights(p, j) = gaspari_cohn(std::sqrt(ddx * ddx + ddy * ddy) / dist_scale);
    }
  }

  Eigen::MatrixXd analysis = ensemble;
  std::vector<int> kept;
  for (int s = 0; s < loc.partition.gamma_effective; ++s) {
    const auto& rect = loc.partition.sub_rects[s];

    // mean weight over the subdomain's owned points
    Eigen::VectorXd wbar = Eigen::VectorXd::Zero(m);
    for (int j = rect.j0; j < rect.j1; ++j)
      for (int i = rect.i0; i < rect.i1; ++i)
        wbar += weights.row(grid.index(i, j));
    wbar /= rect.count();

    kept.clear();
    for (int j = 0; j < m; ++j)
      if (wbar[j] > loc.w0) kept.push_back(j);
    if (kept.empty()) continue;  // no usable observations: keep forecast

    const int mi = static_cast<int>(kept.size());
    Eigen::MatrixXd b(mi, ensemble.cols()), d(mi, ensemble.cols());
    Eigen::VectorXd r_diag(mi);
    for (int r = 0; r < mi; ++r) {
      b.row(r) = parts.obs_anom.row(kept[r]);
      d.row(r) = parts.innovations.row(kept[r]);
      r_diag[r] = sy2 / wbar[kept[r]];
    }
    Eigen::MatrixXd x = innovation_solve(b, r_diag, d, branch);

    // owned rows of the gain applied to the local innovations
    Eigen::MatrixXd local_anom(rect.count(), ensemble.cols());
    int row = 0;
    for (int j = rect.j0; j < rect.j1; ++j)
      for (int i = rect.i0; i < rect.i1; ++i)
        local_anom.row(row++) = parts.anomalies.row(grid.index(i, j));
    Eigen::MatrixXd local_update =
        ((scale * local_anom) * b.transpose()) * x;
    row = 0;
    for (int j = rect.j0; j < rect.j1; ++j)
      for (int i = rect.i0; i < rect.i1; ++i)
        analysis.row(grid.index(i, j)) += local_update.row(row++);
  }
  return analysis;
}

}  // namespace da
