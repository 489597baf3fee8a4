#pragma once

#include <Eigen/Core>
#include <span>
#include <utility>
#include <vector>

namespace da {

/// Regular 2-D grid of nx*ny points. Point (i,j) has linear index i + j*nx
/// with i in [0,nx) (west->east) and j in [0,ny) (south->north).
struct GridSpec {
  int nx = 0;
  int ny = 0;
  double dx = 1.0;
  double dy = 1.0;
  double x0 = 0.0;
  double y0 = 0.0;

  int points() const { return nx * ny; }
  int index(int i, int j) const { return i + j * nx; }
  int point_i(int p) const { return p % nx; }
  int point_j(int p) const { return p / nx; }
  double point_x(int p) const { return x0 + point_i(p) * dx; }
  double point_y(int p) const { return y0 + point_j(p) * dy; }

  void validate() const;  // throws std::invalid_argument
};

/// Partition of the grid into gamma_effective rectangular subdomains.
/// Each subdomain is an a x b block of grid cells; a subdomain owns the
/// points on its west and south edges. Points on the east/north boundary of
/// the grid fold into the last subdomain in that direction, so east-column
/// subdomains own (a+1) x b points, north-row own a x (b+1), and the
/// northeast corner owns (a+1) x (b+1). Labels run row-major from the
/// southwest corner.
struct Partition {
  struct Rect {
    int i0 = 0, i1 = 0, j0 = 0, j1 = 0;  // owned points, half-open
    int count() const { return (i1 - i0) * (j1 - j0); }
  };

  int nx = 0, ny = 0;
  int gamma_effective = 0;
  std::pair<int, int> cells_per_sub{0, 0};  // (a,b) cells in x and y
  int blocks_x = 0, blocks_y = 0;
  std::vector<int> sub_of_point;  // size nx*ny
  std::vector<Rect> sub_rects;    // size gamma_effective

  int owned_count(int label) const { return sub_rects[label].count(); }
};

/// Collection of grid points owned by the subdomains hit by observations at
/// one assimilation time, plus its complement.
struct ActiveSet {
  int time_index = 0;
  std::vector<int> points;          // sorted, unique
  std::vector<int> complement;      // sorted; points ∪ complement = grid
  std::vector<int> hit_subdomains;  // sorted labels
  int d_k = 0;                      // == points.size()
};

/// Builds a partition with gamma_effective <= gamma_requested. gamma must
/// divide (nx-1)(ny-1), the quotient q_c must be 1 or composite, and q_c must
/// admit a factor pair tiling the cell grid; otherwise the nearest valid
/// value below is used (gamma = 1 always valid as the unlocalized fallback).
/// The cell shape is the admissible factor pair of q_c minimizing |b - a|.
Partition make_partition(const GridSpec& grid, int gamma_requested);

/// Subdomains hit by obs_locations (duplicates allowed) and the points they
/// own. Throws on out-of-range location indices.
ActiveSet active_set(const Partition& partition,
                     std::span<const int> obs_locations, int k);

/// Rows/columns of a symmetric per-field matrix gathered at active.points.
/// Rejects inputs with relative asymmetry beyond 1e-10.
Eigen::MatrixXd restrict_precision(const Eigen::MatrixXd& q_inv,
                                   const ActiveSet& active);

}  // namespace da
