#include "da/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace da {

void GridSpec::validate() const {
  if (nx < 2 || ny < 2)
    throw std::invalid_argument("GridSpec: nx and ny must be >= 2, got " +
                                std::to_string(nx) + "x" + std::to_string(ny));
  if (dx <= 0.0 || dy <= 0.0)
    throw std::invalid_argument("GridSpec: dx and dy must be positive");
}

namespace {

bool is_prime(long long n) {
  if (n < 2) return false;
  for (long long p = 2; p * p <= n; ++p)
    if (n % p == 0) return false;
  return true;
}

// Best factor pair (a,b) with a*b = q_c, a | cells_x, b | cells_y,
// minimizing |b - a|; ties prefer a <= b. Returns {0,0} if none exists.
std::pair<int, int> best_cell_shape(long long q_c, int cells_x, int cells_y) {
  std::pair<int, int> best{0, 0};
  long long best_score = -1;
  for (long long a = 1; a <= q_c; ++a) {
    if (q_c % a != 0) continue;
    long long b = q_c / a;
    if (cells_x % a != 0 || cells_y % b != 0) continue;
    long long score = std::llabs(b - a);
    if (best_score < 0 || score < best_score ||
        (score == best_score && a <= b && best.first > best.second)) {
      best = {static_cast<int>(a), static_cast<int>(b)};
      best_score = score;
    }
  }
  return best;
}

Partition build_partition(const GridSpec& grid, int gamma, int a, int b) {
  Partition part;
  part.nx = grid.nx;
  part.ny = grid.ny;
  part.gamma_effective = gamma;
  part.cells_per_sub = {a, b};
  part.blocks_x = (grid.nx - 1) / a;
  part.blocks_y = (grid.ny - 1) / b;
  part.sub_rects.resize(gamma);
  for (int q = 0; q < part.blocks_y; ++q) {
    for (int p = 0; p < part.blocks_x; ++p) {
      Partition::Rect r;
      r.i0 = p * a;
      r.i1 = (p == part.blocks_x - 1) ? grid.nx : (p + 1) * a;
      r.j0 = q * b;
      r.j1 = (q == part.blocks_y - 1) ? grid.ny : (q + 1) * b;
      part.sub_rects[p + q * part.blocks_x] = r;
    }
  }
  part.sub_of_point.resize(grid.points());
  for (int j = 0; j < grid.ny; ++j) {
    int q = std::min(j / b, part.blocks_y - 1);
    for (int i = 0; i < grid.nx; ++i) {
      int p = std::min(i / a, part.blocks_x - 1);
      part.sub_of_point[grid.index(i, j)] = p + q * part.blocks_x;
    }
  }
  return part;
}

}  // namespace

Partition make_partition(const GridSpec& grid, int gamma_requested) {
  grid.validate();
  if (gamma_requested <= 0)
    throw std::invalid_argument("make_partition: gamma_requested must be >= 1");

  const long long cells =
      static_cast<long long>(grid.nx - 1) * (grid.ny - 1);
  long long start = std::min<long long>(gamma_requested, cells);
  for (long long g = start; g >= 1; --g) {
    if (cells % g != 0) continue;
    long long q_c = cells / g;
    if (g == 1) {
      // whole-grid subdomain; the unlocalized fallback is always admissible
      return build_partition(grid, 1, grid.nx - 1, grid.ny - 1);
    }
    if (q_c != 1 && is_prime(q_c)) continue;
    auto [a, b] = best_cell_shape(q_c, grid.nx - 1, grid.ny - 1);
    if (a == 0) continue;
    return build_partition(grid, static_cast<int>(g), a, b);
  }
  throw std::logic_error("make_partition: no valid partition found");
}

ActiveSet active_set(const Partition& partition,
                     std::span<const int> obs_locations, int k) {
  const int n = partition.nx * partition.ny;
  std::vector<char> hit(partition.gamma_effective, 0);
  for (int loc : obs_locations) {
    if (loc < 0 || loc >= n)
      throw std::out_of_range("active_set: observation location " +
                              std::to_string(loc) + " outside grid of " +
                              std::to_string(n) + " points");
    hit[partition.sub_of_point[loc]] = 1;
  }

  ActiveSet out;
  out.time_index = k;
  std::vector<char> in_active(n, 0);
  for (int s = 0; s < partition.gamma_effective; ++s) {
    if (!hit[s]) continue;
    out.hit_subdomains.push_back(s);
    const auto& r = partition.sub_rects[s];
    for (int j = r.j0; j < r.j1; ++j)
      for (int i = r.i0; i < r.i1; ++i) in_active[i + j * partition.nx] = 1;
  }
  out.points.reserve(n);
  for (int p = 0; p < n; ++p)
    (in_active[p] ? out.points : out.complement).push_back(p);
  out.d_k = static_cast<int>(out.points.size());
  return out;
}

Eigen::MatrixXd restrict_precision(const Eigen::MatrixXd& q_inv,
                                   const ActiveSet& active) {
  if (q_inv.rows() != q_inv.cols())
    throw std::invalid_argument("restrict_precision: matrix is not square");
  const double scale = q_inv.cwiseAbs().maxCoeff();
  const double asym = (q_inv - q_inv.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-10 * std::max(scale, 1e-300))
    throw std::invalid_argument(
        "restrict_precision: input asymmetry exceeds 1e-10 relative");

  const auto& pts = active.points;
  const int m = static_cast<int>(pts.size());
  for (int p : pts)
    if (p < 0 || p >= q_inv.rows())
      throw std::out_of_range("restrict_precision: active point " +
                              std::to_string(p) + " outside matrix");
  Eigen::MatrixXd out(m, m);
  for (int c = 0; c < m; ++c)
    for (int r = 0; r < m; ++r) out(r, c) = q_inv(pts[r], pts[c]);
  return out;
}

}  // namespace da
