#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <utility>

#include "da/covariance.hpp"
#include "da/grid.hpp"

namespace da {

/// Layout of a state vector: fields stacked field-major, each field one
/// value per grid point with point index i + j*nx. The rotating
/// shallow-water state is [eta; u; v] (water depth, x-velocity, y-velocity).
struct StateLayout {
  int nx = 0;
  int ny = 0;
  int fields = 1;
  int points() const { return nx * ny; }
  int dim() const { return fields * points(); }
};

/// Z_{k+1} = a_scale * Z_k + noise (Q handled by callers). |a_scale| <= 1.
struct LinearModel {
  double a_scale = 0.25;
  double sigma_z = 0.05;
  int dim = 0;
  void validate() const;
};

Eigen::VectorXd linear_forward(const LinearModel& model,
                               const Eigen::VectorXd& z);

/// Overwrites the one-cell boundary frame of a state with Dirichlet values
/// at time t.
using BoundaryProvider =
    std::function<void(double t, const StateLayout&, Eigen::VectorXd&)>;

/// Boundary frozen at the frame values of a reference state.
BoundaryProvider make_constant_boundary(const StateLayout& layout,
                                        const Eigen::VectorXd& reference);

/// Rotating shallow-water model solved with a local Lax-Friedrichs
/// (Rusanov) finite-volume scheme and 2-stage Runge-Kutta (Heun) stepping.
/// Conserved variables (eta, eta*u, eta*v); sources g*eta*grad(H) and
/// Coriolis f1(y) = f0 + beta*(y - y_ref).
struct SweModel {
  GridSpec grid;               // physical dx, dy in meters
  Eigen::VectorXd bathymetry;  // H per grid point, positive depth (m)
  double gravity = 9.81;
  double f0 = 0.0;
  double beta = 0.0;
  double y_ref = 0.0;
  BoundaryProvider boundary;
  double tau = 0.0;   // substep length (s)
  int substeps = 1;   // L substeps per observation interval

  StateLayout layout() const { return {grid.nx, grid.ny, 3}; }
  double coriolis(double y) const { return f0 + beta * (y - y_ref); }
  void validate() const;
};

/// One explicit step. Throws on dry cells (eta <= 0, location reported) and
/// CFL violations (Courant number reported). When boundary_mass_flux is
/// given, receives the Heun-weighted net mass flux into the interior region
/// across the frame interfaces (units: volume per second).
Eigen::VectorXd swe_step(const SweModel& model, const Eigen::VectorXd& state,
                         double t, double dt,
                         double* boundary_mass_flux = nullptr);

/// L substeps of swe_step covering [t_prev, t_next].
Eigen::VectorXd propagate(const SweModel& model, Eigen::VectorXd z,
                          double t_prev, double t_next, int substeps);

/// The linear map is a single discrete step regardless of the lag.
inline Eigen::VectorXd propagate(const LinearModel& model,
                                 const Eigen::VectorXd& z) {
  return linear_forward(model, z);
}

/// log f_k(z_prev, z) up to a constant: the Gaussian transition density
/// evaluated at the innovation z - Phi(z_prev).
double transition_logpdf(const CovarianceOperator& cov,
                         const Eigen::VectorXd& z_prev_propagated,
                         const Eigen::VectorXd& z);

/// Restricted variant (f~ of the localized filter): quadratic form of the
/// gathered sub-precision on restricted vectors.
double transition_logpdf(const RestrictedGaussian& restricted,
                         const Eigen::VectorXd& prev_restricted,
                         const Eigen::VectorXd& z_restricted);

/// Snapshot format: header line "nx,ny,t", then per field ny rows of nx
/// comma-separated values. Also used for bathymetry (single field) and
/// initial conditions.
void write_state_csv(const std::string& path, const StateLayout& layout,
                     const Eigen::VectorXd& state, double t);
std::pair<Eigen::VectorXd, double> read_state_csv(const std::string& path,
                                                  StateLayout& layout_out);

}  // namespace da
