#include "da/observations.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "da/rng.hpp"

namespace da {

void ObservationBatch::validate(int n_points, int n_fields) const {
  if (sigma_y < 0.0)
    throw std::invalid_argument("ObservationBatch: sigma_y < 0");
  if (fields.empty())
    throw std::invalid_argument("ObservationBatch: no observed fields");
  for (int f : fields)
    if (f < 0 || f >= n_fields)
      throw std::invalid_argument("ObservationBatch: field index out of range");
  std::set<int> seen;
  for (int loc : locations) {
    if (loc < 0 || loc >= n_points)
      throw std::invalid_argument("ObservationBatch: location " +
                                  std::to_string(loc) + " out of range");
    if (!seen.insert(loc).second)
      throw std::invalid_argument("ObservationBatch: duplicate location " +
                                  std::to_string(loc));
  }
  if (static_cast<int>(values.size()) !=
      s() * static_cast<int>(locations.size()))
    throw std::invalid_argument("ObservationBatch: value count mismatch");
  if (!values.allFinite())
    throw std::invalid_argument("ObservationBatch: non-finite values");
}

std::vector<int> swath_locations(const SwathConfig& cfg, const GridSpec& grid,
                                 int k) {
  grid.validate();
  if (cfg.width < 1 || cfg.width > grid.nx)
    throw std::invalid_argument("swath_locations: width outside [1, nx]");
  if (cfg.stride < 1)
    throw std::invalid_argument("swath_locations: stride must be >= 1");
  const int nx = grid.nx, ny = grid.ny;
  long long raw = static_cast<long long>(nx) - 1 - cfg.phase -
                  static_cast<long long>(cfg.stride) * k;
  int center = static_cast<int>(((raw % nx) + nx) % nx);
  const double sgn = (k % 2 == 0) ? 1.0 : -1.0;
  const double half = cfg.width / 2.0;

  std::vector<int> out;
  for (int j = 0; j < ny; ++j) {
    const double cj = center + sgn * cfg.slope_mag * (j - ny / 2.0);
    for (int i = 0; i < nx; ++i)
      if (std::abs(i - cj) < half) out.push_back(grid.index(i, j));
  }
  return out;  // already sorted: j-major, i ascending
}

Eigen::VectorXd gather_observed(const Eigen::VectorXd& state,
                                const StateLayout& layout,
                                const ObservationBatch& batch) {
  const int n = layout.points();
  const int s = batch.s();
  Eigen::VectorXd out(s * batch.locations.size());
  for (std::size_t m = 0; m < batch.locations.size(); ++m)
    for (int t = 0; t < s; ++t)
      out[m * s + t] = state[batch.fields[t] * n + batch.locations[m]];
  return out;
}

double obs_loglik(const Eigen::VectorXd& z_at_locations,
                  const ObservationBatch& batch) {
  if (z_at_locations.size() != batch.values.size())
    throw std::invalid_argument("obs_loglik: gathered state has " +
                                std::to_string(z_at_locations.size()) +
                                " entries, batch has " +
                                std::to_string(batch.values.size()));
  if (batch.values.size() == 0) return 0.0;
  const double inv = 1.0 / (2.0 * batch.sigma_y * batch.sigma_y);
  return -(batch.values - z_at_locations).squaredNorm() * inv;
}

std::vector<ObservationBatch> synthesize_observations(
    const std::vector<Eigen::VectorXd>& truth, const StateLayout& layout,
    const GridSpec& grid, const SwathConfig& cfg, double sigma_y,
    std::uint64_t seed) {
  std::vector<ObservationBatch> out;
  out.reserve(truth.size());
  for (std::size_t idx = 0; idx < truth.size(); ++idx) {
    const int k = static_cast<int>(idx) + 1;
    ObservationBatch b;
    b.k = k;
    b.locations = swath_locations(cfg, grid, k);
    b.sigma_y = sigma_y;
    b.fields = {0};
    b.values = gather_observed(truth[idx], layout, b);
    auto rng = substream(seed, Stream::kObsNoise, k);
    Eigen::VectorXd noise(b.values.size());
    fill_standard_normal(rng, noise);
    b.values += sigma_y * noise;
    out.push_back(std::move(b));
  }
  return out;
}

DrifterSet DrifterSet::init(const std::vector<std::array<double, 2>>& positions,
                            int n_samples) {
  if (positions.empty())
    throw std::invalid_argument("DrifterSet::init: no drifters");
  if (n_samples < 1)
    throw std::invalid_argument("DrifterSet::init: n_samples < 1");
  DrifterSet set;
  const int nd = static_cast<int>(positions.size());
  set.mean_x.resize(nd);
  set.mean_y.resize(nd);
  set.sample_x.resize(nd, n_samples);
  set.sample_y.resize(nd, n_samples);
  for (int j = 0; j < nd; ++j) {
    set.mean_x[j] = positions[j][0];
    set.mean_y[j] = positions[j][1];
    set.sample_x.row(j).setConstant(positions[j][0]);
    set.sample_y.row(j).setConstant(positions[j][1]);
  }
  return set;
}

DrifterSet DrifterSet::resampled(int n_samples) const {
  DrifterSet out;
  out.mean_x = mean_x;
  out.mean_y = mean_y;
  out.sample_x = mean_x.replicate(1, n_samples);
  out.sample_y = mean_y.replicate(1, n_samples);
  return out;
}

std::array<double, 2> interp_velocity(const Eigen::VectorXd& state,
                                      const StateLayout& layout,
                                      const GridSpec& grid, double x,
                                      double y) {
  if (layout.fields < 3)
    throw std::invalid_argument("interp_velocity: state has no velocity fields");
  const int n = layout.points();
  const double tx = std::clamp((x - grid.x0) / grid.dx, 0.0,
                               static_cast<double>(grid.nx - 1));
  const double ty = std::clamp((y - grid.y0) / grid.dy, 0.0,
                               static_cast<double>(grid.ny - 1));
  const int i = std::min(static_cast<int>(tx), grid.nx - 2);
  const int j = std::min(static_cast<int>(ty), grid.ny - 2);
  const double fx = tx - i, fy = ty - j;
  auto bilinear = [&](int field) {
    const int p = field * n + grid.index(i, j);
    const double v00 = state[p], v10 = state[p + 1];
    const double v01 = state[p + grid.nx], v11 = state[p + grid.nx + 1];
    return (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 +
           (1 - fx) * fy * v01 + fx * fy * v11;
  };
  return {bilinear(1), bilinear(2)};
}

void advect_drifters(DrifterSet& set, const SubstepStateFn& states,
                     int n_samples, int n_substeps, const GridSpec& grid,
                     const StateLayout& layout, double tau) {
  if (set.n_samples() != n_samples)
    throw std::invalid_argument("advect_drifters: sample count mismatch");
  const double xmax = grid.x0 + (grid.nx - 1) * grid.dx;
  const double ymax = grid.y0 + (grid.ny - 1) * grid.dy;
  for (int i = 0; i < n_samples; ++i) {
    for (int l = 0; l < n_substeps; ++l) {
      const Eigen::VectorXd& z = states(i, l);
      for (int j = 0; j < set.n_drifters(); ++j) {
        double& px = set.sample_x(j, i);
        double& py = set.sample_y(j, i);
        const auto [u, v] = interp_velocity(z, layout, grid, px, py);
        px = std::clamp(px + u * tau, grid.x0, xmax);
        py = std::clamp(py + v * tau, grid.y0, ymax);
        if (!std::isfinite(px) || !std::isfinite(py))
          throw std::runtime_error("advect_drifters: non-finite position for drifter " +
                                   std::to_string(j));
      }
    }
  }
  set.mean_x = set.sample_x.rowwise().mean();
  set.mean_y = set.sample_y.rowwise().mean();
}

DrifterLocations drifter_obs_locations(const DrifterSet& set,
                                       const GridSpec& grid) {
  // nearest grid point; exact half-cell ties resolve to the lower index
  auto nearest = [](double t, int count) {
    int i = static_cast<int>(std::ceil(t - 0.5));
    return std::clamp(i, 0, count - 1);
  };
  std::map<int, int> first_drifter;
  for (int j = 0; j < set.n_drifters(); ++j) {
    const int i = nearest((set.mean_x[j] - grid.x0) / grid.dx, grid.nx);
    const int jj = nearest((set.mean_y[j] - grid.y0) / grid.dy, grid.ny);
    const int p = grid.index(i, jj);
    if (!first_drifter.count(p)) first_drifter[p] = j;
  }
  DrifterLocations out;
  for (const auto& [p, d] : first_drifter) {
    out.points.push_back(p);
    out.drifter_of_point.push_back(d);
  }
  return out;
}

void write_drifter_csv(const std::string& path,
                       const std::vector<DrifterRecord>& records) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_drifter_csv: cannot open " + path);
  f << "time_s,drifter_id,x_m,y_m,u_mps,v_mps\n";
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.17g,%d,%.17g,%.17g,%.17g,%.17g\n",
                  r.time_s, r.drifter_id, r.x_m, r.y_m, r.u_mps, r.v_mps);
    f << buf;
  }
}

std::vector<DrifterRecord> read_drifter_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_drifter_csv: cannot open " + path);
  std::vector<DrifterRecord> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (first && line.find("time_s") != std::string::npos) {
      first = false;
      continue;
    }
    first = false;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    DrifterRecord r;
    if (row >> r.time_s >> r.drifter_id >> r.x_m >> r.y_m >> r.u_mps >> r.v_mps)
      out.push_back(r);
    else
      throw std::runtime_error("read_drifter_csv: malformed row: " + line);
  }
  return out;
}

void write_observations_csv(const std::string& path,
                            const std::vector<ObservationBatch>& batches) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_observations_csv: cannot open " + path);
  int s = batches.empty() ? 1 : batches.front().s();
  double sigma_y = batches.empty() ? 0.0 : batches.front().sigma_y;
  f << "# s=" << s << " sigma_y=";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", sigma_y);
  f << buf << " fields=";
  if (!batches.empty())
    for (std::size_t t = 0; t < batches.front().fields.size(); ++t)
      f << (t ? ";" : "") << batches.front().fields[t];
  else
    f << 0;
  f << "\n";
  for (const auto& b : batches) {
    for (std::size_t m = 0; m < b.locations.size(); ++m) {
      f << b.k << "," << b.locations[m];
      for (int t = 0; t < b.s(); ++t) {
        std::snprintf(buf, sizeof buf, "%.17g", b.values[m * b.s() + t]);
        f << "," << buf;
      }
      f << "\n";
    }
  }
}

std::vector<ObservationBatch> read_observations_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_observations_csv: cannot open " + path);
  std::string line;
  int s = 1;
  double sigma_y = 0.0;
  std::vector<int> fields{0};
  std::map<int, std::pair<std::vector<int>, std::vector<double>>> by_k;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream meta(line.substr(1));
      std::string tok;
      while (meta >> tok) {
        if (tok.rfind("s=", 0) == 0) s = std::stoi(tok.substr(2));
        if (tok.rfind("sigma_y=", 0) == 0) sigma_y = std::stod(tok.substr(8));
        if (tok.rfind("fields=", 0) == 0) {
          fields.clear();
          std::string v = tok.substr(7);
          std::replace(v.begin(), v.end(), ';', ' ');
          std::istringstream fv(v);
          int x;
          while (fv >> x) fields.push_back(x);
        }
      }
      continue;
    }
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    int k, loc;
    if (!(row >> k >> loc))
      throw std::runtime_error("read_observations_csv: malformed row: " + line);
    auto& [locs, vals] = by_k[k];
    locs.push_back(loc);
    double v;
    int got = 0;
    while (row >> v) {
      vals.push_back(v);
      ++got;
    }
    if (got != s)
      throw std::runtime_error("read_observations_csv: wrong value count in: " +
                               line);
  }
  std::vector<ObservationBatch> out;
  for (auto& [k, data] : by_k) {
    ObservationBatch b;
    b.k = k;
    b.locations = std::move(data.first);
    b.values = Eigen::Map<Eigen::VectorXd>(data.second.data(),
                                           data.second.size());
    b.sigma_y = sigma_y;
    b.fields = fields;
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace da
