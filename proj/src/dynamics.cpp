#include "da/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace da {

void LinearModel::validate() const {
  if (dim < 1) throw std::invalid_argument("LinearModel: dim must be >= 1");
  if (std::abs(a_scale) > 1.0)
    throw std::invalid_argument("LinearModel: |a_scale| must be <= 1");
  if (sigma_z < 0.0) throw std::invalid_argument("LinearModel: sigma_z < 0");
}

Eigen::VectorXd linear_forward(const LinearModel& model,
                               const Eigen::VectorXd& z) {
  if (static_cast<int>(z.size()) != model.dim)
    throw std::invalid_argument("linear_forward: state dimension mismatch");
  return model.a_scale * z;
}

BoundaryProvider make_constant_boundary(const StateLayout& layout,
                                        const Eigen::VectorXd& reference) {
  const int nx = layout.nx, ny = layout.ny, n = layout.points();
  std::vector<int> frame;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i)
      if (i == 0 || i == nx - 1 || j == 0 || j == ny - 1)
        frame.push_back(i + j * nx);
  std::vector<double> values;
  values.reserve(frame.size() * layout.fields);
  for (int f = 0; f < layout.fields; ++f)
    for (int p : frame) values.push_back(reference[f * n + p]);
  const int fields = layout.fields;
  return [frame, values, n, fields](double, const StateLayout&,
                                    Eigen::VectorXd& state) {
    std::size_t c = 0;
    for (int f = 0; f < fields; ++f)
      for (int p : frame) state[f * n + p] = values[c++];
  };
}

void SweModel::validate() const {
  grid.validate();
  if (grid.nx < 3 || grid.ny < 3)
    throw std::invalid_argument("SweModel: need at least 3x3 points");
  if (bathymetry.size() != grid.points())
    throw std::invalid_argument("SweModel: bathymetry size mismatch");
  if (gravity <= 0.0) throw std::invalid_argument("SweModel: gravity <= 0");
  if (!boundary) throw std::invalid_argument("SweModel: boundary provider unset");
}

namespace {

struct Cons {
  double h, hu, hv;
};

inline Cons x_flux(double h, double u, double v, double g) {
  return {h * u, h * u * u + 0.5 * g * h * h, h * u * v};
}
inline Cons y_flux(double h, double u, double v, double g) {
  return {h * v, h * u * v, h * v * v + 0.5 * g * h * h};
}

void check_wet(const Eigen::VectorXd& state, const GridSpec& grid,
               const char* where) {
  const int n = grid.points();
  for (int p = 0; p < n; ++p) {
    if (!(state[p] > 0.0))
      throw std::runtime_error(
          std::string("swe_step: dry or invalid depth ") +
          std::to_string(state[p]) + " at point (" +
          std::to_string(grid.point_i(p)) + "," + std::to_string(grid.point_j(p)) +
          ") " + where);
  }
}

// Semi-discrete RHS of the conservative form. Fluxes are Rusanov with
// interface speed max of the two cells' |u_n| + sqrt(g*eta). Bathymetry
// source uses central differences; only interior cells receive a RHS (the
// frame is Dirichlet). When flux_out is non-null, accumulates the net mass
// flux into the interior region across the frame interfaces.
void swe_rhs(const SweModel& m, const Eigen::VectorXd& s, Eigen::VectorXd& rhs,
             double* flux_out) {
  const int nx = m.grid.nx, ny = m.grid.ny, n = nx * ny;
  const double g = m.gravity, dx = m.grid.dx, dy = m.grid.dy;
  const auto h = [&](int p) { return s[p]; };
  const auto u = [&](int p) { return s[n + p]; };
  const auto v = [&](int p) { return s[2 * n + p]; };
  rhs.setZero(3 * n);
  double bflux = 0.0;

  auto is_interior = [&](int i, int j) {
    return i > 0 && i < nx - 1 && j > 0 && j < ny - 1;
  };

  // x-direction interfaces
  for (int j = 1; j < ny - 1; ++j) {
    for (int i = 0; i < nx - 1; ++i) {
      const int pl = i + j * nx, pr = pl + 1;
      const bool il = is_interior(i, j), ir = is_interior(i + 1, j);
      if (!il && !ir) continue;
      const Cons fl = x_flux(h(pl), u(pl), v(pl), g);
      const Cons fr = x_flux(h(pr), u(pr), v(pr), g);
      const double a = std::max(std::abs(u(pl)) + std::sqrt(g * h(pl)),
                                std::abs(u(pr)) + std::sqrt(g * h(pr)));
      const Cons f{0.5 * (fl.h + fr.h) - 0.5 * a * (h(pr) - h(pl)),
                   0.5 * (fl.hu + fr.hu) - 0.5 * a * (h(pr) * u(pr) - h(pl) * u(pl)),
                   0.5 * (fl.hv + fr.hv) - 0.5 * a * (h(pr) * v(pr) - h(pl) * v(pl))};
      if (il) {
        rhs[pl] -= f.h / dx;
        rhs[n + pl] -= f.hu / dx;
        rhs[2 * n + pl] -= f.hv / dx;
      }
      if (ir) {
        rhs[pr] += f.h / dx;
        rhs[n + pr] += f.hu / dx;
        rhs[2 * n + pr] += f.hv / dx;
      }
      if (flux_out && il != ir) bflux += (ir ? f.h : -f.h) * dy;
    }
  }
  // y-direction interfaces
  for (int j = 0; j < ny - 1; ++j) {
    for (int i = 1; i < nx - 1; ++i) {
      const int pl = i + j * nx, pr = pl + nx;
      const bool il = is_interior(i, j), ir = is_interior(i, j + 1);
      if (!il && !ir) continue;
      const Cons fl = y_flux(h(pl), u(pl), v(pl), g);
      const Cons fr = y_flux(h(pr), u(pr), v(pr), g);
      const double a = std::max(std::abs(v(pl)) + std::sqrt(g * h(pl)),
                                std::abs(v(pr)) + std::sqrt(g * h(pr)));
      const Cons f{0.5 * (fl.h + fr.h) - 0.5 * a * (h(pr) - h(pl)),
                   0.5 * (fl.hu + fr.hu) - 0.5 * a * (h(pr) * u(pr) - h(pl) * u(pl)),
                   0.5 * (fl.hv + fr.hv) - 0.5 * a * (h(pr) * v(pr) - h(pl) * v(pl))};
      if (il) {
        rhs[pl] -= f.h / dy;
        rhs[n + pl] -= f.hu / dy;
        rhs[2 * n + pl] -= f.hv / dy;
      }
      if (ir) {
        rhs[pr] += f.h / dy;
        rhs[n + pr] += f.hu / dy;
        rhs[2 * n + pr] += f.hv / dy;
      }
      if (flux_out && il != ir) bflux += (ir ? f.h : -f.h) * dx;
    }
  }

  // sources: g*eta*grad(H) and Coriolis, interior cells only
  for (int j = 1; j < ny - 1; ++j) {
    const double f1 = m.coriolis(m.grid.y0 + j * m.grid.dy);
    for (int i = 1; i < nx - 1; ++i) {
      const int p = i + j * nx;
      const double dhdx = (m.bathymetry[p + 1] - m.bathymetry[p - 1]) / (2 * dx);
      const double dhdy = (m.bathymetry[p + nx] - m.bathymetry[p - nx]) / (2 * dy);
      rhs[n + p] += g * h(p) * dhdx + f1 * h(p) * v(p);
      rhs[2 * n + p] += g * h(p) * dhdy - f1 * h(p) * u(p);
    }
  }
  if (flux_out) *flux_out = bflux;
}

// one Euler stage on conserved variables, interior cells only
void apply_stage(const SweModel& m, const Eigen::VectorXd& s,
                 const Eigen::VectorXd& rhs, double dt, Eigen::VectorXd& out) {
  const int nx = m.grid.nx, ny = m.grid.ny, n = nx * ny;
  out = s;
  for (int j = 1; j < ny - 1; ++j) {
    for (int i = 1; i < nx - 1; ++i) {
      const int p = i + j * nx;
      const double h0 = s[p], u0 = s[n + p], v0 = s[2 * n + p];
      const double h1 = h0 + dt * rhs[p];
      const double hu1 = h0 * u0 + dt * rhs[n + p];
      const double hv1 = h0 * v0 + dt * rhs[2 * n + p];
      out[p] = h1;
      if (!(h1 > 0.0))
        throw std::runtime_error("swe_step: stage produced dry depth " +
                                 std::to_string(h1) + " at point (" +
                                 std::to_string(i) + "," + std::to_string(j) + ")");
      out[n + p] = hu1 / h1;
      out[2 * n + p] = hv1 / h1;
    }
  }
}

}  // namespace

Eigen::VectorXd swe_step(const SweModel& model, const Eigen::VectorXd& state,
                         double t, double dt, double* boundary_mass_flux) {
  model.validate();
  const int n = model.grid.points();
  if (static_cast<int>(state.size()) != 3 * n)
    throw std::invalid_argument("swe_step: state dimension mismatch");
  if (!(dt > 0.0)) throw std::invalid_argument("swe_step: dt must be positive");
  check_wet(state, model.grid, "on entry");

  // CFL on the incoming state
  double smax = 0.0;
  for (int p = 0; p < n; ++p) {
    const double c = std::sqrt(model.gravity * state[p]);
    smax = std::max(smax,
                    std::max(std::abs(state[n + p]), std::abs(state[2 * n + p])) + c);
  }
  const double courant = dt * smax / std::min(model.grid.dx, model.grid.dy);
  if (courant > 1.0 + 1e-12)
    throw std::runtime_error("swe_step: CFL violation, Courant number " +
                             std::to_string(courant));

  const StateLayout layout = model.layout();
  Eigen::VectorXd rhs, stage1, stage2;
  double flux0 = 0.0, flux1 = 0.0;

  swe_rhs(model, state, rhs, boundary_mass_flux ? &flux0 : nullptr);
  apply_stage(model, state, rhs, dt, stage1);
  model.boundary(t + dt, layout, stage1);
  check_wet(stage1, model.grid, "after stage 1");

  swe_rhs(model, stage1, rhs, boundary_mass_flux ? &flux1 : nullptr);
  apply_stage(model, stage1, rhs, dt, stage2);

  // Heun combination on conserved variables
  Eigen::VectorXd out = state;
  for (int j = 1; j < model.grid.ny - 1; ++j) {
    for (int i = 1; i < model.grid.nx - 1; ++i) {
      const int p = i + j * model.grid.nx;
      const double h = 0.5 * (state[p] + stage2[p]);
      const double hu = 0.5 * (state[p] * state[n + p] + stage2[p] * stage2[n + p]);
      const double hv =
          0.5 * (state[p] * state[2 * n + p] + stage2[p] * stage2[2 * n + p]);
      out[p] = h;
      out[n + p] = hu / h;
      out[2 * n + p] = hv / h;
    }
  }
  model.boundary(t + dt, layout, out);
  check_wet(out, model.grid, "after step");
  if (boundary_mass_flux) *boundary_mass_flux = 0.5 * (flux0 + flux1);
  return out;
}

Eigen::VectorXd propagate(const SweModel& model, Eigen::VectorXd z,
                          double t_prev, double t_next, int substeps) {
  if (substeps < 1) throw std::invalid_argument("propagate: substeps must be >= 1");
  if (!(t_next > t_prev))
    throw std::invalid_argument("propagate: t_next must exceed t_prev");
  const double tau = (t_next - t_prev) / substeps;
  for (int l = 0; l < substeps; ++l)
    z = swe_step(model, z, t_prev + l * tau, tau);
  return z;
}

double transition_logpdf(const CovarianceOperator& cov,
                         const Eigen::VectorXd& z_prev_propagated,
                         const Eigen::VectorXd& z) {
  if (z.size() != z_prev_propagated.size())
    throw std::invalid_argument("transition_logpdf: dimension mismatch");
  return cov.logpdf(z - z_prev_propagated);
}

double transition_logpdf(const RestrictedGaussian& restricted,
                         const Eigen::VectorXd& prev_restricted,
                         const Eigen::VectorXd& z_restricted) {
  if (prev_restricted.size() != z_restricted.size())
    throw std::invalid_argument("transition_logpdf: dimension mismatch");
  return restricted.logpdf(z_restricted - prev_restricted);
}

void write_state_csv(const std::string& path, const StateLayout& layout,
                     const Eigen::VectorXd& state, double t) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_state_csv: cannot open " + path);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", t);
  f << layout.nx << "," << layout.ny << "," << buf << "\n";
  const int n = layout.points();
  for (int fld = 0; fld < layout.fields; ++fld) {
    for (int j = 0; j < layout.ny; ++j) {
      for (int i = 0; i < layout.nx; ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", state[fld * n + i + j * layout.nx]);
        f << buf << (i + 1 < layout.nx ? "," : "\n");
      }
    }
  }
}

std::pair<Eigen::VectorXd, double> read_state_csv(const std::string& path,
                                                  StateLayout& layout_out) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_state_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line))
    throw std::runtime_error("read_state_csv: empty file " + path);
  std::replace(line.begin(), line.end(), ',', ' ');
  std::istringstream hdr(line);
  int nx, ny;
  double t;
  if (!(hdr >> nx >> ny >> t))
    throw std::runtime_error("read_state_csv: bad header in " + path);
  std::vector<double> values;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    double v;
    while (row >> v) values.push_back(v);
  }
  const int n = nx * ny;
  if (values.empty() || values.size() % n != 0)
    throw std::runtime_error("read_state_csv: malformed data in " + path);
  layout_out = {nx, ny, static_cast<int>(values.size() / n)};
  Eigen::VectorXd state(values.size());
  // rows were written j-major per field, which matches the flat layout
  for (std::size_t i = 0; i < values.size(); ++i) state[i] = values[i];
  return {state, t};
}

}  // namespace da
