#pragma once

#include <Eigen/Core>
#include <array>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "da/grid.hpp"

namespace da {

/// One draw of the structured field noise: per-field ny x nx matrices, the
/// J x J mode coefficients they were built from, and the vectorized state
/// increment (layout matches the state: w[f*n + i + j*nx] = xi_f(j, i)).
struct NoiseDraw {
  std::vector<Eigen::MatrixXd> xi;   // one ny x nx matrix per field
  std::vector<Eigen::MatrixXd> eps;  // one J x J coefficient matrix per field
  Eigen::VectorXd w;
};

/// Evaluates -0.5 x^T P x for a precision P that is either sigma^-2 * I or
/// block-diagonal with one identical dense block per field. Produced by
/// CovarianceOperator::restrict(); immutable and shareable.
class RestrictedGaussian {
 public:
  double logpdf(const Eigen::VectorXd& x) const;
  int dim() const { return dim_; }

 private:
  friend class CovarianceOperator;
  bool diagonal_ = true;
  double inv_variance_ = 1.0;
  Eigen::MatrixXd block_;  // per-field precision block (when !diagonal_)
  int fields_ = 1;
  int dim_ = 0;
};

/// State-noise covariance Q with sampling and log-density support.
/// Three kinds:
///   Diagonal    sigma^2 * I over the full state dimension.
///   Dense       a general SPD matrix (single block).
///   FourierSine the structured low-rank covariance built from sine bases
///               S1 (ny x J), S2 (nx x J): per field, Xi = S1 eps S2^T with
///               independent eps(i,j) ~ N(0, sigma^2/(max(i,j)+1)). The
///               assembled per-field block Qbar has rank <= J^2, so the
///               precision is the ridge-regularized (Qbar + delta I)^-1 with
///               delta = 1e-8 * trace(Qbar)/n, computed once.
/// Immutable after construction; sampling takes the caller's RNG stream.
class CovarianceOperator {
 public:
  enum class Kind { kDiagonal, kDense, kFourierSine };

  static CovarianceOperator diagonal(int dim, double sigma, int fields = 1);
  static CovarianceOperator dense(Eigen::MatrixXd q);
  static CovarianceOperator fourier_sine(const GridSpec& grid, int n_modes,
                                         double sigma,
                                         std::array<double, 4> domain,
                                         int fields = 3);
  /// fourier_sine with a binary cache of the assembled block and precision;
  /// loads when the file exists with a matching header, else computes and
  /// saves.
  static CovarianceOperator fourier_sine_cached(const GridSpec& grid,
                                                int n_modes, double sigma,
                                                std::array<double, 4> domain,
                                                int fields,
                                                const std::string& cache_path);

  Kind kind() const { return kind_; }
  int dim() const { return dim_; }
  int fields() const { return fields_; }
  int points_per_field() const { return dim_ / fields_; }
  double sigma() const { return sigma_; }
  int modes() const { return n_modes_; }

  /// Draw w ~ N(0, Q).
  void sample(std::mt19937_64& rng, Eigen::VectorXd& out) const;
  Eigen::VectorXd sample(std::mt19937_64& rng) const;

  /// Draw the restriction of w ~ N(0, Q) to the given grid points (the exact
  /// marginal N(0, Q[pts,pts])), per field. For structured kinds this draws
  /// the full field and gathers, so RNG consumption does not depend on the
  /// active set.
  void sample_restricted(std::mt19937_64& rng, std::span<const int> grid_points,
                         Eigen::VectorXd& out) const;

  /// FourierSine only: full draw with per-field matrices exposed.
  NoiseDraw sample_field_noise(std::mt19937_64& rng) const;

  /// log N(x; 0, Q) up to an additive constant.
  double logpdf(const Eigen::VectorXd& x) const;

  /// Precision gathered at the given grid points (per field, assembled
  /// block-diagonally over fields).
  RestrictedGaussian restrict(std::span<const int> grid_points) const;

  /// Assembled per-field covariance block (Dense/FourierSine).
  const Eigen::MatrixXd& field_block() const;
  /// Per-field precision block (Dense: Q^-1; FourierSine: ridge inverse).
  const Eigen::MatrixXd& field_precision() const;

  void save(const std::string& path) const;

 private:
  CovarianceOperator() = default;
  void finalize_dense_like();
  void draw_modes(std::mt19937_64& rng, Eigen::MatrixXd& eps) const;

  Kind kind_ = Kind::kDiagonal;
  int dim_ = 0;
  int fields_ = 1;
  double sigma_ = 0.0;
  int n_modes_ = 0;
  int nx_ = 0, ny_ = 0;
  Eigen::MatrixXd s1_, s2_;        // sine bases (FourierSine)
  Eigen::MatrixXd block_;          // per-field covariance block
  Eigen::MatrixXd chol_;           // lower Cholesky factor (Dense)
  Eigen::MatrixXd precision_;      // per-field precision block
  double ridge_ = 0.0;
  RestrictedGaussian full_;        // cached restriction to all points
};

/// S1[l,j] = sin(pi j y_l / (b2-a2)), S2[s,i] = sin(pi i x_s / (b1-a1)) with
/// coordinates measured from the domain corner (a1,a2) and mode indices
/// 0..J-1 (column 0 is identically zero). Warns to stderr when J exceeds
/// min(nx,ny).
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> build_sine_bases(
    const GridSpec& grid, int n_modes, std::array<double, 4> domain);

/// Dense per-field block of the Fourier-sine covariance:
/// Q[p1,p2] = sigma^2 sum_{l,s} S1(y1,l) S1(y2,l) S2(x1,s) S2(x2,s) / (max(l,s)+1)
/// where p = x + y*nx. Equals Cov(Vec(S1 eps S2^T)).
Eigen::MatrixXd assemble_covariance(const Eigen::MatrixXd& s1,
                                    const Eigen::MatrixXd& s2, double sigma);

inline double gaussian_logpdf(const CovarianceOperator& op,
                              const Eigen::VectorXd& x) {
  return op.logpdf(x);
}

}  // namespace da
