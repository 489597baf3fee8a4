#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "da/dynamics.hpp"
#include "da/grid.hpp"

namespace da {

/// Observations at one assimilation time: values at grid-point locations,
/// s values per location (location-major), R = sigma_y^2 * I.
struct ObservationBatch {
  int k = 0;
  std::vector<int> locations;  // valid, deduplicated grid point indices
  Eigen::VectorXd values;      // s * locations.size()
  double sigma_y = 0.0;
  std::vector<int> fields{0};  // observed state fields, in value order

  int s() const { return static_cast<int>(fields.size()); }
  int size() const { return static_cast<int>(values.size()); }
  void validate(int n_points, int n_fields) const;
};

/// Tilted band of observed columns sweeping east to west, tilt direction
/// alternating between consecutive observation times.
struct SwathConfig {
  int width = 7;
  double slope_mag = 1.0;
  int stride = 7;
  int phase = 0;
};

/// Grid points (i,j) with |i - (c_k + sgn_k*slope*(j - ny/2))| < width/2,
/// c_k = (nx-1-phase-stride*k) mod nx, sgn_k = +1 for even k. Sorted.
std::vector<int> swath_locations(const SwathConfig& cfg, const GridSpec& grid,
                                 int k);

/// Values of the state at the batch locations in batch value order; this
/// gather is the action of the selection operator C.
Eigen::VectorXd gather_observed(const Eigen::VectorXd& state,
                                const StateLayout& layout,
                                const ObservationBatch& batch);

/// -||y - z||^2 / (2 sigma_y^2), up to a constant.
double obs_loglik(const Eigen::VectorXd& z_at_locations,
                  const ObservationBatch& batch);

/// Swath observations from a truth path: y_k = C z_k + sigma_y * noise.
/// truth[k-1] is the state at observation time k, k = 1..T.
std::vector<ObservationBatch> synthesize_observations(
    const std::vector<Eigen::VectorXd>& truth, const StateLayout& layout,
    const GridSpec& grid, const SwathConfig& cfg, double sigma_y,
    std::uint64_t seed);

/// Drifters with per-sample position clouds; the location estimate is the
/// sample mean over the N retained chains.
struct DrifterSet {
  Eigen::VectorXd mean_x, mean_y;      // per drifter
  Eigen::MatrixXd sample_x, sample_y;  // n_drifters x n_samples

  int n_drifters() const { return static_cast<int>(mean_x.size()); }
  int n_samples() const { return static_cast<int>(sample_x.cols()); }
  static DrifterSet init(const std::vector<std::array<double, 2>>& positions,
                         int n_samples);
  /// Re-clones per-sample clouds (used when the chain count changes).
  DrifterSet resampled(int n_samples) const;
};

/// Bilinear interpolation of the (u,v) fields at a physical position,
/// clamped to the grid.
std::array<double, 2> interp_velocity(const Eigen::VectorXd& state,
                                      const StateLayout& layout,
                                      const GridSpec& grid, double x, double y);

using SubstepStateFn =
    std::function<const Eigen::VectorXd&(int sample, int substep)>;

/// Euler advection of every per-sample drifter position through L substeps
/// of its sample's velocity fields, then refresh of the mean estimate.
/// Positions clamp to the domain; non-finite positions abort with the
/// drifter id.
void advect_drifters(DrifterSet& set, const SubstepStateFn& states,
                     int n_samples, int n_substeps, const GridSpec& grid,
                     const StateLayout& layout, double tau);

/// Nearest grid point per drifter mean position (ties toward the lower
/// index), duplicates merged keeping the lowest drifter id.
struct DrifterLocations {
  std::vector<int> points;           // sorted unique grid point indices
  std::vector<int> drifter_of_point; // source drifter per point
};
DrifterLocations drifter_obs_locations(const DrifterSet& set,
                                       const GridSpec& grid);

/// Drifter data interchange: columns time_s, drifter_id, x_m, y_m, u_mps,
/// v_mps.
struct DrifterRecord {
  double time_s = 0.0;
  int drifter_id = 0;
  double x_m = 0.0, y_m = 0.0, u_mps = 0.0, v_mps = 0.0;
};
void write_drifter_csv(const std::string& path,
                       const std::vector<DrifterRecord>& records);
std::vector<DrifterRecord> read_drifter_csv(const std::string& path);

/// Observation batches as CSV rows (k, location_index, value_1..value_s)
/// with a metadata comment header.
void write_observations_csv(const std::string& path,
                            const std::vector<ObservationBatch>& batches);
std::vector<ObservationBatch> read_observations_csv(const std::string& path);

}  // namespace da
