#include "da/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "da/rng.hpp"

namespace da {

namespace {

double wall_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// config parsing

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct RawConfig {
  std::map<std::string, std::string> kv;  // "section.key" -> value
  bool has(const std::string& key) const { return kv.count(key) > 0; }
  const std::string& get(const std::string& key) const { return kv.at(key); }
};

RawConfig parse_ini(const std::string& text) {
  RawConfig raw;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": empty key");
    raw.kv[section + "." + key] = value;
  }
  return raw;
}

template <typename T>
T parse_scalar(const std::string& v);

template <>
int parse_scalar<int>(const std::string& v) {
  return std::stoi(v);
}
template <>
double parse_scalar<double>(const std::string& v) {
  return std::stod(v);
}
template <>
std::uint64_t parse_scalar<std::uint64_t>(const std::string& v) {
  return std::stoull(v);
}
template <>
std::string parse_scalar<std::string>(const std::string& v) {
  return v;
}

template <typename T>
void assign(const RawConfig& raw, const std::string& key, T& out) {
  if (raw.has(key)) out = parse_scalar<T>(raw.get(key));
}

std::vector<double> parse_list(const std::string& v) {
  std::string s = v;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  std::vector<double> out;
  double x;
  while (in >> x) out.push_back(x);
  return out;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  RawConfig raw = parse_ini(text);
  ExperimentConfig cfg;

  static const std::map<std::string, ModelKind> models{
      {"linear", ModelKind::kLinear}, {"swe", ModelKind::kSwe}};
  static const std::map<std::string, ObsMode> modes{
      {"swath", ObsMode::kSwath},
      {"full", ObsMode::kFull},
      {"drifters", ObsMode::kDrifters}};
  static const std::map<std::string, FilterKind> filters{
      {"kf", FilterKind::kKf},
      {"enkf", FilterKind::kEnkf},
      {"lenkf", FilterKind::kLenkf},
      {"smcmc", FilterKind::kSmcmc},
      {"lsmcmc", FilterKind::kLsmcmc}};
  static const std::map<std::string, ReferenceKind> references{
      {"auto", ReferenceKind::kAuto},
      {"kf", ReferenceKind::kKf},
      {"truth", ReferenceKind::kTruth},
      {"prior", ReferenceKind::kPrior},
      {"none", ReferenceKind::kNone}};
  static const std::map<std::string, NoiseKind> noises{
      {"diagonal", NoiseKind::kDiagonal}, {"fourier", NoiseKind::kFourier}};
  static const std::map<std::string, EnkfBranch> branches{
      {"auto", EnkfBranch::kAuto},
      {"direct", EnkfBranch::kDirect},
      {"smw", EnkfBranch::kSmw}};

  auto lookup = [&](const auto& table, const std::string& key, auto& out) {
    if (!raw.has(key)) return;
    const auto it = table.find(raw.get(key));
    if (it == table.end())
      throw std::invalid_argument("config: unknown value '" + raw.get(key) +
                                  "' for " + key);
    out = it->second;
  };

  lookup(models, "model.type", cfg.model);
  assign(raw, "model.nx", cfg.nx);
  assign(raw, "model.ny", cfg.ny);
  assign(raw, "model.a_scale", cfg.a_scale);
  assign(raw, "model.sigma_z", cfg.sigma_z);
  assign(raw, "model.dx", cfg.dx);
  assign(raw, "model.dy", cfg.dy);
  assign(raw, "model.gravity", cfg.gravity);
  assign(raw, "model.depth", cfg.depth);
  assign(raw, "model.bathymetry_file", cfg.bathymetry_file);
  assign(raw, "model.initial_file", cfg.initial_file);
  assign(raw, "model.f0", cfg.f0);
  assign(raw, "model.beta", cfg.beta);
  assign(raw, "model.tau", cfg.tau);
  assign(raw, "model.substeps", cfg.substeps);
  assign(raw, "model.bump_amp", cfg.bump_amp);
  assign(raw, "model.bump_width", cfg.bump_width);
  assign(raw, "model.u0", cfg.u0);
  assign(raw, "model.v0", cfg.v0);

  lookup(noises, "noise.kind", cfg.noise);
  assign(raw, "noise.sigma", cfg.noise_sigma);
  assign(raw, "noise.modes", cfg.noise_modes);
  assign(raw, "noise.cache", cfg.noise_cache);

  lookup(modes, "observations.mode", cfg.obs_mode);
  assign(raw, "observations.sigma_y", cfg.sigma_y);
  assign(raw, "observations.width", cfg.swath.width);
  assign(raw, "observations.slope", cfg.swath.slope_mag);
  assign(raw, "observations.stride", cfg.swath.stride);
  assign(raw, "observations.phase", cfg.swath.phase);
  assign(raw, "observations.n_drifters", cfg.n_drifters);
  assign(raw, "observations.drifter_csv", cfg.drifter_csv);
  if (raw.has("observations.positions")) {
    const auto xs = parse_list(raw.get("observations.positions"));
    if (xs.size() % 2 != 0)
      throw std::invalid_argument("config: observations.positions needs x y pairs");
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2)
      cfg.drifter_positions.push_back({xs[i], xs[i + 1]});
  }

  lookup(filters, "filter.type", cfg.filter);
  assign(raw, "filter.n_samples", cfg.n_samples);
  assign(raw, "filter.n_burn", cfg.n_burn);
  assign(raw, "filter.gamma", cfg.gamma);
  assign(raw, "filter.q", cfg.q);
  assign(raw, "filter.proposal_scale", cfg.proposal_scale);
  assign(raw, "filter.r", cfg.loc_radius);
  assign(raw, "filter.w0", cfg.w0);
  lookup(branches, "filter.branch", cfg.branch);

  assign(raw, "run.T", cfg.T);
  assign(raw, "run.M", cfg.M);
  assign(raw, "run.seed", cfg.seed);
  if (raw.has("run.seeds")) {
    for (double s : parse_list(raw.get("run.seeds")))
      cfg.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  assign(raw, "run.threads", cfg.threads);
  assign(raw, "run.out", cfg.out_dir);
  lookup(references, "run.reference", cfg.reference);
  assign(raw, "run.prior_runs", cfg.prior_runs);
  assign(raw, "run.threshold", cfg.threshold);
  assign(raw, "run.plot_coord", cfg.plot_coord);

  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("parse_config_file: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

ReferenceKind ExperimentConfig::effective_reference() const {
  if (reference != ReferenceKind::kAuto) return reference;
  if (model == ModelKind::kLinear) return ReferenceKind::kKf;
  return obs_mode == ObsMode::kDrifters ? ReferenceKind::kPrior
                                        : ReferenceKind::kTruth;
}

std::uint64_t ExperimentConfig::replica_seed(int r) const {
  if (!seeds.empty()) return seeds.at(r);
  return mix64(seed ^ (0x5851f42d4c957f2dULL * (r + 1)));
}

void ExperimentConfig::validate() const {
  const bool needs_grid = obs_mode != ObsMode::kFull ||
                          filter == FilterKind::kLsmcmc ||
                          filter == FilterKind::kLenkf;
  if (nx < 1 || ny < 1)
    throw std::invalid_argument("config: nx and ny must be >= 1");
  if (needs_grid && (nx < 2 || ny < 2))
    throw std::invalid_argument("config: this setup needs a 2-D grid (nx, ny >= 2)");
  if (model == ModelKind::kSwe) {
    if (nx < 3 || ny < 3)
      throw std::invalid_argument("config: swe model needs nx, ny >= 3");
    if (tau <= 0.0 || substeps < 1)
      throw std::invalid_argument("config: swe model needs tau > 0, substeps >= 1");
    if (bathymetry_file.empty() && depth <= 0.0)
      throw std::invalid_argument("config: swe depth must be positive");
    if (filter == FilterKind::kKf || filter == FilterKind::kEnkf ||
        filter == FilterKind::kLenkf)
      throw std::invalid_argument(
          "config: kf/enkf/lenkf are implemented for the linear model");
  } else {
    if (std::abs(a_scale) > 1.0)
      throw std::invalid_argument("config: |a_scale| must be <= 1");
    if (sigma_z <= 0.0) throw std::invalid_argument("config: sigma_z must be > 0");
    if (obs_mode == ObsMode::kDrifters)
      throw std::invalid_argument("config: drifters require the swe model");
  }
  if (sigma_y <= 0.0) throw std::invalid_argument("config: sigma_y must be > 0");
  if (obs_mode == ObsMode::kSwath) {
    if (swath.width < 1 || swath.width > nx)
      throw std::invalid_argument("config: swath width outside [1, nx]");
    if (swath.stride < 1)
      throw std::invalid_argument("config: swath stride must be >= 1");
  }
  if (obs_mode == ObsMode::kDrifters) {
    if (drifter_csv.empty() && drifter_positions.empty())
      throw std::invalid_argument(
          "config: drifters need initial positions or a CSV file");
    if (!drifter_positions.empty() && n_drifters > 0 &&
        static_cast<int>(drifter_positions.size()) != n_drifters)
      throw std::invalid_argument("config: n_drifters does not match positions");
  }
  if (n_samples < 1) throw std::invalid_argument("config: n_samples must be >= 1");
  if (n_burn < 0) throw std::invalid_argument("config: n_burn must be >= 0");
  if (filter == FilterKind::kLsmcmc || filter == FilterKind::kLenkf) {
    if (gamma < 1) throw std::invalid_argument("config: gamma must be >= 1");
  }
  if (filter == FilterKind::kLenkf) {
    if (loc_radius <= 0.0) throw std::invalid_argument("config: r must be > 0");
    if (w0 <= 0.0 || w0 >= 1.0)
      throw std::invalid_argument("config: w0 must be in (0,1)");
  }
  if (filter == FilterKind::kSmcmc || filter == FilterKind::kLsmcmc) {
    if (!(q > 0.0 && q <= 0.5))
      throw std::invalid_argument("config: q must be in (0, 1/2]");
    if (proposal_scale <= 0.0)
      throw std::invalid_argument("config: proposal_scale must be > 0");
  }
  if (T < 1) throw std::invalid_argument("config: T must be >= 1");
  if (M < 1) throw std::invalid_argument("config: M must be >= 1");
  if (!seeds.empty() && static_cast<int>(seeds.size()) < M)
    throw std::invalid_argument("config: seed list shorter than M");
  if (threads < 0) throw std::invalid_argument("config: threads must be >= 0");
  if (prior_runs < 1) throw std::invalid_argument("config: prior_runs must be >= 1");
  if (threshold < 0.0) throw std::invalid_argument("config: threshold must be >= 0");
  if (plot_coord < 0 || plot_coord >= nx * ny * (model == ModelKind::kSwe ? 3 : 1))
    throw std::invalid_argument("config: plot_coord out of range");
}

// ---------------------------------------------------------------------------
// problem assembly

namespace {

struct Problem {
  ExperimentConfig cfg;
  StateLayout layout;
  GridSpec grid;
  LinearModel linear;
  SweModel swe;
  CovarianceOperator cov{CovarianceOperator::diagonal(1, 1.0)};
  Eigen::VectorXd z0;
  std::vector<Eigen::VectorXd> truth;     // truth[k-1] is the state at t_k
  std::vector<ObservationBatch> batches;  // swath/full modes
  std::map<int, std::vector<DrifterRecord>> drifter_data;  // k -> records
  std::vector<std::array<double, 2>> drifter_init;
  Partition partition;  // lsmcmc / lenkf
  bool localized = false;

  double t_of(int k) const {
    return cfg.model == ModelKind::kSwe ? k * cfg.substeps * cfg.tau
                                        : static_cast<double>(k);
  }
  Eigen::VectorXd propagate_state(const Eigen::VectorXd& z, int k) const {
    if (cfg.model == ModelKind::kLinear) return linear_forward(linear, z);
    return propagate(swe, z, t_of(k - 1), t_of(k), cfg.substeps);
  }
};

Eigen::VectorXd initial_state(const ExperimentConfig& cfg,
                              const StateLayout& layout, const GridSpec& grid,
                              const Eigen::VectorXd& bathymetry) {
  if (!cfg.initial_file.empty()) {
    StateLayout file_layout;
    auto [state, t] = read_state_csv(cfg.initial_file, file_layout);
    if (file_layout.nx != layout.nx || file_layout.ny != layout.ny ||
        file_layout.fields != layout.fields)
      throw std::invalid_argument("initial_file layout does not match config");
    return state;
  }
  const int d = layout.dim();
  if (cfg.model == ModelKind::kLinear) {
    // first third of the coordinates drawn from -0.15 U[0,1], rest zero
    Eigen::VectorXd z0 = Eigen::VectorXd::Zero(d);
    auto rng = substream(cfg.seed, Stream::kInitState);
    for (int i = 0; i < d / 3; ++i) z0[i] = -0.15 * uniform01(rng);
    return z0;
  }
  // swe: lake at depth plus an optional smooth surface bump, uniform drift
  const int n = layout.points();
  Eigen::VectorXd z0(d);
  const double lx = (grid.nx - 1) * grid.dx, ly = (grid.ny - 1) * grid.dy;
  const double cx = grid.x0 + 0.5 * lx, cy = grid.y0 + 0.5 * ly;
  const double w2 = std::pow(cfg.bump_width * std::min(lx, ly), 2);
  for (int p = 0; p < n; ++p) {
    const double ddx = grid.point_x(p) - cx, ddy = grid.point_y(p) - cy;
    const double bump = cfg.bump_amp * std::exp(-(ddx * ddx + ddy * ddy) / (2 * w2));
    z0[p] = bathymetry[p] + bump;
    z0[n + p] = cfg.u0;
    z0[2 * n + p] = cfg.v0;
  }
  return z0;
}

Problem build_problem(const ExperimentConfig& cfg) {
  cfg.validate();
  Problem prob;
  prob.cfg = cfg;
  const int fields = cfg.model == ModelKind::kSwe ? 3 : 1;
  prob.layout = {cfg.nx, cfg.ny, fields};
  prob.grid = {cfg.nx, cfg.ny, cfg.dx, cfg.dy, 0.0, 0.0};

  Eigen::VectorXd bathy;
  if (cfg.model == ModelKind::kSwe) {
    if (!cfg.bathymetry_file.empty()) {
      StateLayout bl;
      auto [b, t] = read_state_csv(cfg.bathymetry_file, bl);
      if (bl.nx != cfg.nx || bl.ny != cfg.ny || bl.fields != 1)
        throw std::invalid_argument("bathymetry_file does not match the grid");
      bathy = b;
    } else {
      bathy = Eigen::VectorXd::Constant(prob.grid.points(), cfg.depth);
    }
  }
  prob.z0 = initial_state(cfg, prob.layout, prob.grid, bathy);

  if (cfg.model == ModelKind::kLinear) {
    prob.linear = {cfg.a_scale, cfg.sigma_z, prob.layout.dim()};
    prob.cov = CovarianceOperator::diagonal(prob.layout.dim(), cfg.sigma_z);
  } else {
    prob.swe.grid = prob.grid;
    prob.swe.bathymetry = bathy;
    prob.swe.gravity = cfg.gravity;
    prob.swe.f0 = cfg.f0;
    prob.swe.beta = cfg.beta;
    prob.swe.y_ref = prob.grid.y0 + 0.5 * (cfg.ny - 1) * cfg.dy;
    prob.swe.tau = cfg.tau;
    prob.swe.substeps = cfg.substeps;
    prob.swe.boundary = make_constant_boundary(prob.layout, prob.z0);
    const std::array<double, 4> domain{
        prob.grid.x0, prob.grid.x0 + (cfg.nx - 1) * cfg.dx, prob.grid.y0,
        prob.grid.y0 + (cfg.ny - 1) * cfg.dy};
    if (cfg.noise == NoiseKind::kFourier) {
      prob.cov = cfg.noise_cache.empty()
                     ? CovarianceOperator::fourier_sine(
                           prob.grid, cfg.noise_modes, cfg.noise_sigma, domain, 3)
                     : CovarianceOperator::fourier_sine_cached(
                           prob.grid, cfg.noise_modes, cfg.noise_sigma, domain,
                           3, cfg.noise_cache);
    } else {
      prob.cov = CovarianceOperator::diagonal(prob.layout.dim(),
                                              cfg.noise_sigma, 3);
    }
  }

  if (cfg.filter == FilterKind::kLsmcmc || cfg.filter == FilterKind::kLenkf) {
    prob.partition = make_partition(prob.grid, cfg.gamma);
    prob.localized = true;
  }

  // truth path
  prob.truth.reserve(cfg.T);
  Eigen::VectorXd z = prob.z0, w;
  for (int k = 1; k <= cfg.T; ++k) {
    z = prob.propagate_state(z, k);
    auto rng = substream(cfg.seed, Stream::kTruthNoise, k);
    prob.cov.sample(rng, w);
    z += w;
    prob.truth.push_back(z);
  }

  // observations
  if (cfg.obs_mode == ObsMode::kSwath) {
    prob.batches = synthesize_observations(prob.truth, prob.layout, prob.grid,
                                           cfg.swath, cfg.sigma_y, cfg.seed);
  } else if (cfg.obs_mode == ObsMode::kFull) {
    prob.batches.reserve(cfg.T);
    std::vector<int> all(prob.layout.points());
    std::iota(all.begin(), all.end(), 0);
    for (int k = 1; k <= cfg.T; ++k) {
      ObservationBatch b;
      b.k = k;
      b.locations = all;
      b.sigma_y = cfg.sigma_y;
      b.fields = {0};
      b.values = gather_observed(prob.truth[k - 1], prob.layout, b);
      auto rng = substream(cfg.seed, Stream::kObsNoise, k);
      Eigen::VectorXd noise(b.values.size());
      fill_standard_normal(rng, noise);
      b.values += cfg.sigma_y * noise;
      prob.batches.push_back(std::move(b));
    }
  }
  return prob;
}

// Synthetic drifter data from the truth run: positions advected by the truth
// trajectory, velocities read off the truth fields at the positions plus
// observation noise. Returns records for k = 0 (initial) through T.
std::vector<DrifterRecord> synthesize_drifters(const Problem& prob) {
  const auto& cfg = prob.cfg;
  DrifterSet set = DrifterSet::init(cfg.drifter_positions, 1);
  std::vector<DrifterRecord> records;
  auto emit = [&](int k, const Eigen::VectorXd& state) {
    auto rng = substream(cfg.seed, Stream::kObsNoise, k);
    for (int j = 0; j < set.n_drifters(); ++j) {
      auto [u, v] = interp_velocity(state, prob.layout, prob.grid,
                                    set.mean_x[j], set.mean_y[j]);
      DrifterRecord r;
      r.time_s = prob.t_of(k);
      r.drifter_id = j;
      r.x_m = set.mean_x[j];
      r.y_m = set.mean_y[j];
      r.u_mps = u + cfg.sigma_y * standard_normal(rng);
      r.v_mps = v + cfg.sigma_y * standard_normal(rng);
      records.push_back(r);
    }
  };
  emit(0, prob.z0);
  Eigen::VectorXd z = prob.z0;
  for (int k = 1; k <= cfg.T; ++k) {
    // record the substep states of the deterministic leg for the advection
    std::vector<Eigen::VectorXd> legs(cfg.substeps);
    Eigen::VectorXd cur = z;
    for (int l = 0; l < cfg.substeps; ++l) {
      legs[l] = cur;
      cur = swe_step(prob.swe, cur, prob.t_of(k - 1) + l * cfg.tau, cfg.tau);
    }
    advect_drifters(
        set, [&](int, int l) -> const Eigen::VectorXd& { return legs[l]; }, 1,
        cfg.substeps, prob.grid, prob.layout, cfg.tau);
    z = prob.truth[k - 1];  // includes the observation-time noise
    emit(k, z);
  }
  return records;
}

void load_drifters(Problem& prob) {
  auto& cfg = prob.cfg;
  std::vector<DrifterRecord> records;
  if (!cfg.drifter_csv.empty() &&
      std::filesystem::exists(cfg.drifter_csv)) {
    records = read_drifter_csv(cfg.drifter_csv);
  } else {
    if (cfg.drifter_positions.empty())
      throw std::invalid_argument("drifters: no CSV and no initial positions");
    records = synthesize_drifters(prob);
    const std::string path =
        cfg.drifter_csv.empty()
            ? (std::filesystem::path(cfg.out_dir) / "drifters_synth.csv").string()
            : cfg.drifter_csv;
    write_drifter_csv(path, records);
  }
  // bucket by time index
  for (const auto& r : records) {
    const int k = static_cast<int>(std::llround(r.time_s / (cfg.substeps * cfg.tau)));
    auto& bucket = prob.drifter_data[k];
    if (static_cast<int>(bucket.size()) <= r.drifter_id)
      bucket.resize(r.drifter_id + 1);
    bucket[r.drifter_id] = r;
  }
  const auto it = prob.drifter_data.find(0);
  if (it == prob.drifter_data.end())
    throw std::invalid_argument("drifters: CSV has no time-0 records");
  prob.drifter_init.clear();
  for (const auto& r : it->second)
    prob.drifter_init.push_back({r.x_m, r.y_m});
}

// ---------------------------------------------------------------------------
// filter drivers

Eigen::MatrixXd run_kf(const Problem& prob) {
  const auto& cfg = prob.cfg;
  const int d = prob.layout.dim();
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(d, d);
  q.diagonal().setConstant(cfg.sigma_z * cfg.sigma_z);
  KalmanState state{prob.z0, Eigen::MatrixXd::Zero(d, d)};
  Eigen::MatrixXd means(cfg.T, d);
  for (int k = 1; k <= cfg.T; ++k) {
    state = kf_step(prob.linear, q, state, prob.batches[k - 1]);
    means.row(k - 1) = state.mean.transpose();
  }
  return means;
}

Eigen::MatrixXd run_ensemble(const Problem& prob, int replica,
                             std::vector<StepDiag>* diags) {
  const auto& cfg = prob.cfg;
  const std::uint64_t seed = cfg.replica_seed(replica);
  const int d = prob.layout.dim();
  Eigen::MatrixXd ens = prob.z0.replicate(1, cfg.n_samples);
  Eigen::MatrixXd means(cfg.T, d);
  LocalizationConfig loc;
  if (cfg.filter == FilterKind::kLenkf) {
    loc.partition = prob.partition;
    loc.r = cfg.loc_radius;
    loc.w0 = cfg.w0;
  }
  for (int k = 1; k <= cfg.T; ++k) {
    const double t0 = wall_seconds();
    if (cfg.filter == FilterKind::kEnkf)
      ens = enkf_step(prob.linear, prob.cov, std::move(ens),
                      prob.batches[k - 1], seed, k, cfg.branch);
    else
      ens = lenkf_step(prob.linear, prob.cov, std::move(ens),
                       prob.batches[k - 1], loc, prob.grid, seed, k, cfg.branch);
    means.row(k - 1) = ens.rowwise().mean().transpose();
    if (diags)
      diags->push_back({replica, k, 0.0,
                        static_cast<int>(prob.batches[k - 1].locations.size()),
                        (wall_seconds() - t0) * 1e3, means.row(k - 1).sum()});
  }
  return means;
}

Eigen::MatrixXd run_mcmc(const Problem& prob, int replica,
                         std::vector<StepDiag>* diags) {
  const auto& cfg = prob.cfg;
  const std::uint64_t seed = cfg.replica_seed(replica);
  const int d = prob.layout.dim();
  const bool drifters = cfg.obs_mode == ObsMode::kDrifters;
  ChainConfig chain{cfg.n_samples, cfg.n_burn, cfg.q, cfg.proposal_scale};

  SampleBank bank;
  bank.samples = prob.z0;  // d x 1: the known initial state

  DrifterSet set;
  if (drifters) set = DrifterSet::init(prob.drifter_init, 1);

  Eigen::MatrixXd means(cfg.T, d);
  std::vector<Eigen::VectorXd> legs;  // per (sample, substep) when drifting
  for (int k = 1; k <= cfg.T; ++k) {
    const double t0 = wall_seconds();
    const int bank_n = bank.size();

    bank.propagated.resize(d, bank_n);
    if (cfg.model == ModelKind::kLinear) {
      bank.propagated = cfg.a_scale * bank.samples;
    } else if (!drifters) {
      for (int i = 0; i < bank_n; ++i)
        bank.propagated.col(i) = propagate(prob.swe, bank.samples.col(i),
                                           prob.t_of(k - 1), prob.t_of(k),
                                           cfg.substeps);
    } else {
      legs.assign(static_cast<std::size_t>(bank_n) * cfg.substeps, {});
      for (int i = 0; i < bank_n; ++i) {
        Eigen::VectorXd cur = bank.samples.col(i);
        for (int l = 0; l < cfg.substeps; ++l) {
          legs[i * cfg.substeps + l] = cur;
          cur = swe_step(prob.swe, cur, prob.t_of(k - 1) + l * cfg.tau, cfg.tau);
        }
        bank.propagated.col(i) = cur;
      }
    }

    ObservationBatch batch;
    if (drifters) {
      if (set.n_samples() != bank_n) set = set.resampled(bank_n);
      advect_drifters(
          set,
          [&](int i, int l) -> const Eigen::VectorXd& {
            return legs[i * cfg.substeps + l];
          },
          bank_n, cfg.substeps, prob.grid, prob.layout, cfg.tau);
      const DrifterLocations locs = drifter_obs_locations(set, prob.grid);
      const auto it = prob.drifter_data.find(k);
      if (it == prob.drifter_data.end())
        throw std::runtime_error("drifters: no data for step " + std::to_string(k));
      batch.k = k;
      batch.sigma_y = cfg.sigma_y;
      batch.fields = {1, 2};
      batch.locations = locs.points;
      batch.values.resize(2 * locs.points.size());
      for (std::size_t m = 0; m < locs.points.size(); ++m) {
        const auto& rec = it->second.at(locs.drifter_of_point[m]);
        batch.values[2 * m] = rec.u_mps;
        batch.values[2 * m + 1] = rec.v_mps;
      }
    } else {
      batch = prob.batches[k - 1];
    }

    SmcmcStepResult res =
        cfg.filter == FilterKind::kLsmcmc
            ? lsmcmc_step(bank, batch, prob.cov, prob.partition, chain,
                          prob.layout, seed, k)
            : smcmc_step(bank, batch, prob.cov, chain, prob.layout, seed, k);
    bank.samples = std::move(res.samples);
    means.row(k - 1) = res.mean.transpose();
    if (diags)
      diags->push_back({replica, k, res.acceptance_rate, res.active_points,
                        (wall_seconds() - t0) * 1e3, res.mean.sum()});
  }
  return means;
}

Eigen::MatrixXd run_prior_reference(const Problem& prob) {
  const auto& cfg = prob.cfg;
  const int d = prob.layout.dim();
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(cfg.T, d);
  Eigen::VectorXd w;
  for (int r = 0; r < cfg.prior_runs; ++r) {
    Eigen::VectorXd z = prob.z0;
    for (int k = 1; k <= cfg.T; ++k) {
      z = prob.propagate_state(z, k);
      auto rng = substream(cfg.seed, Stream::kPriorNoise, k, r);
      prob.cov.sample(rng, w);
      z += w;
      acc.row(k - 1) += z.transpose();
    }
  }
  return acc / cfg.prior_runs;
}

Eigen::MatrixXd truth_matrix(const Problem& prob) {
  Eigen::MatrixXd m(prob.cfg.T, prob.layout.dim());
  for (int k = 0; k < prob.cfg.T; ++k) m.row(k) = prob.truth[k].transpose();
  return m;
}

std::string filter_name(FilterKind f) {
  switch (f) {
    case FilterKind::kKf: return "kf";
    case FilterKind::kEnkf: return "enkf";
    case FilterKind::kLenkf: return "lenkf";
    case FilterKind::kSmcmc: return "smcmc";
    case FilterKind::kLsmcmc: return "lsmcmc";
  }
  return "?";
}

}  // namespace

// ---------------------------------------------------------------------------

double error_metric(const Eigen::MatrixXd& filter_means,
                    const Eigen::MatrixXd& reference_means, double threshold) {
  if (filter_means.rows() != reference_means.rows() ||
      filter_means.cols() != reference_means.cols())
    throw std::invalid_argument("error_metric: shape mismatch");
  if (!(threshold > 0.0))
    throw std::invalid_argument("error_metric: threshold must be > 0");
  const auto diff = (filter_means - reference_means).cwiseAbs();
  const auto below = (diff.array() < threshold).count();
  return 100.0 * static_cast<double>(below) /
         static_cast<double>(filter_means.size());
}

double fit_loglog_slope(const std::vector<double>& x,
                        const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("fit_loglog_slope: need >= 2 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double n = static_cast<double>(x.size());
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_matrix_csv: cannot open " + path);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      f << format_double(m(r, c)) << (c + 1 < m.cols() ? "," : "");
    f << "\n";
  }
}

Eigen::MatrixXd read_matrix_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_matrix_csv: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    std::vector<double> vals;
    double v;
    while (row >> v) vals.push_back(v);
    if (!vals.empty()) rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw std::runtime_error("read_matrix_csv: empty " + path);
  Eigen::MatrixXd m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows.front().size())
      throw std::runtime_error("read_matrix_csv: ragged rows in " + path);
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
  const double t_start = wall_seconds();
  std::filesystem::create_directories(cfg.out_dir);
  Problem prob = build_problem(cfg);
  if (cfg.obs_mode == ObsMode::kDrifters) load_drifters(prob);

  RunResult result;
  const bool mcmc =
      cfg.filter == FilterKind::kSmcmc || cfg.filter == FilterKind::kLsmcmc;
  const bool ensemble =
      cfg.filter == FilterKind::kEnkf || cfg.filter == FilterKind::kLenkf;
  const int replicas = mcmc || ensemble ? cfg.M : 1;

  std::vector<Eigen::MatrixXd> replica_means(replicas);
  std::vector<std::vector<StepDiag>> replica_diags(replicas);

  if (cfg.filter == FilterKind::kKf) {
    replica_means[0] = run_kf(prob);
  } else {
    int n_workers = cfg.threads > 0
                        ? cfg.threads
                        : static_cast<int>(std::thread::hardware_concurrency());
    n_workers = std::clamp(n_workers, 1, replicas);
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::string error_text;
    std::mutex error_mutex;
    auto worker = [&]() {
      for (;;) {
        const int r = next.fetch_add(1);
        if (r >= replicas || failed.load()) return;
        try {
          replica_means[r] = ensemble ? run_ensemble(prob, r, &replica_diags[r])
                                      : run_mcmc(prob, r, &replica_diags[r]);
        } catch (const std::exception& e) {
          std::scoped_lock lock(error_mutex);
          failed.store(true);
          if (error_text.empty())
            error_text = "replica " + std::to_string(r) + ": " + e.what();
        }
      }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failed.load()) throw std::runtime_error("run_experiment: " + error_text);
  }

  // deterministic ordered reduction over replicas
  result.means = replica_means[0];
  for (int r = 1; r < replicas; ++r) result.means += replica_means[r];
  result.means /= replicas;
  for (int r = 0; r < replicas; ++r)
    result.diagnostics.insert(result.diagnostics.end(),
                              replica_diags[r].begin(), replica_diags[r].end());

  switch (cfg.effective_reference()) {
    case ReferenceKind::kKf:
      result.reference =
          cfg.filter == FilterKind::kKf ? result.means : run_kf(prob);
      break;
    case ReferenceKind::kTruth:
      result.reference = truth_matrix(prob);
      break;
    case ReferenceKind::kPrior:
      result.reference = run_prior_reference(prob);
      break;
    default:
      break;
  }
  if (result.reference.size() > 0)
    result.pct_below_threshold =
        error_metric(result.means, result.reference, cfg.effective_threshold());
  result.total_wall_s = wall_seconds() - t_start;

  // persist
  namespace fs = std::filesystem;
  const fs::path out(cfg.out_dir);
  write_matrix_csv((out / ("means_" + filter_name(cfg.filter) + ".csv")).string(),
                   result.means);
  if (result.reference.size() > 0)
    write_matrix_csv((out / "means_reference.csv").string(), result.reference);
  if (cfg.obs_mode != ObsMode::kDrifters)
    write_observations_csv((out / "observations.csv").string(), prob.batches);

  {
    std::ofstream f(out / "diagnostics.csv");
    f << "replica,k,acceptance_rate,d_k,wall_time_ms,mean_checksum\n";
    for (const auto& d : result.diagnostics)
      f << d.replica << "," << d.k << "," << format_double(d.acceptance_rate)
        << "," << d.d_k << "," << format_double(d.wall_ms) << ","
        << format_double(d.mean_checksum) << "\n";
  }
  {
    std::ofstream f(out / "summary.csv");
    f << "filter,gamma,r,N,N_burn,M,wall_s,pct_below_threshold\n";
    const bool has_gamma =
        cfg.filter == FilterKind::kLsmcmc || cfg.filter == FilterKind::kLenkf;
    f << filter_name(cfg.filter) << ","
      << (has_gamma ? std::to_string(prob.partition.gamma_effective) : "-")
      << ","
      << (cfg.filter == FilterKind::kLenkf ? format_double(cfg.loc_radius) : "-")
      << "," << cfg.n_samples << ","
      << (mcmc ? std::to_string(cfg.n_burn) : "-") << "," << replicas << ","
      << format_double(result.total_wall_s) << ","
      << (result.pct_below_threshold >= 0.0
              ? format_double(result.pct_below_threshold)
              : "-")
      << "\n";
  }
  {
    std::ofstream f(out / "plotdata_timeseries.csv");
    f << "k,reference,filter\n";
    for (int k = 0; k < cfg.T; ++k) {
      const double ref = result.reference.size() > 0
                             ? result.reference(k, cfg.plot_coord)
                             : std::nan("");
      f << (k + 1) << "," << format_double(ref) << ","
        << format_double(result.means(k, cfg.plot_coord)) << "\n";
    }
  }
  return result;
}

ConvergenceResult convergence_study(const ExperimentConfig& cfg,
                                    const std::vector<int>& n_list) {
  if (cfg.model != ModelKind::kLinear)
    throw std::invalid_argument("convergence_study: linear model required");
  if (n_list.size() < 3)
    throw std::invalid_argument("convergence_study: need >= 3 sample counts");

  ExperimentConfig base = cfg;
  base.filter = FilterKind::kSmcmc;
  Problem prob = build_problem(base);
  const Eigen::MatrixXd kf = run_kf(prob);

  ConvergenceResult out;
  for (int n : n_list) {
    Problem sub = prob;
    sub.cfg.n_samples = n;
    sub.cfg.n_burn = n / 2;
    std::vector<Eigen::MatrixXd> means(base.M);
    int n_workers = base.threads > 0
                        ? base.threads
                        : static_cast<int>(std::thread::hardware_concurrency());
    n_workers = std::clamp(n_workers, 1, base.M);
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w)
      pool.emplace_back([&]() {
        for (;;) {
          const int r = next.fetch_add(1);
          if (r >= base.M) return;
          means[r] = run_mcmc(sub, r, nullptr);
        }
      });
    for (auto& t : pool) t.join();
    Eigen::MatrixXd avg = means[0];
    for (int r = 1; r < base.M; ++r) avg += means[r];
    avg /= base.M;
    const double rmse = std::sqrt((avg - kf).squaredNorm() / kf.size());
    out.points.push_back({n, rmse});
  }
  std::vector<double> xs, ys;
  for (const auto& p : out.points) {
    xs.push_back(p.n_samples);
    ys.push_back(p.rmse);
  }
  out.slope = fit_loglog_slope(xs, ys);
  return out;
}

}  // namespace da
