#include "da/covariance.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "da/rng.hpp"

namespace da {

double RestrictedGaussian::logpdf(const Eigen::VectorXd& x) const {
  if (static_cast<int>(x.size()) != dim_)
    throw std::invalid_argument("RestrictedGaussian::logpdf: dimension " +
                                std::to_string(x.size()) + " != " +
                                std::to_string(dim_));
  if (diagonal_) return -0.5 * inv_variance_ * x.squaredNorm();
  const int nb = static_cast<int>(block_.rows());
  double acc = 0.0;
  for (int f = 0; f < fields_; ++f) {
    auto seg = x.segment(f * nb, nb);
    acc += seg.dot(block_ * seg);
  }
  return -0.5 * acc;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> build_sine_bases(
    const GridSpec& grid, int n_modes, std::array<double, 4> domain) {
  grid.validate();
  if (n_modes < 1)
    throw std::invalid_argument("build_sine_bases: n_modes must be >= 1");
  const auto [a1, b1, a2, b2] = domain;
  if (b1 <= a1 || b2 <= a2)
    throw std::invalid_argument("build_sine_bases: empty domain");
  if (n_modes > std::min(grid.nx, grid.ny))
    std::cerr << "build_sine_bases: warning: J=" << n_modes
              << " exceeds min(nx,ny)=" << std::min(grid.nx, grid.ny)
              << ", modes will alias\n";

  Eigen::MatrixXd s1(grid.ny, n_modes), s2(grid.nx, n_modes);
  for (int l = 0; l < grid.ny; ++l) {
    const double frac = (grid.y0 + l * grid.dy - a2) / (b2 - a2);
    for (int j = 0; j < n_modes; ++j) s1(l, j) = sinpi(j * frac);
  }
  for (int s = 0; s < grid.nx; ++s) {
    const double frac = (grid.x0 + s * grid.dx - a1) / (b1 - a1);
    for (int i = 0; i < n_modes; ++i) s2(s, i) = sinpi(i * frac);
  }
  return {s1, s2};
}

Eigen::MatrixXd assemble_covariance(const Eigen::MatrixXd& s1,
                                    const Eigen::MatrixXd& s2, double sigma) {
  const int ny = static_cast<int>(s1.rows());
  const int nx = static_cast<int>(s2.rows());
  const int J = static_cast<int>(s1.cols());
  if (s2.cols() != J)
    throw std::invalid_argument("assemble_covariance: basis mode mismatch");

  // Q = B D B^T with one column of B per mode pair (l,s):
  // B[x + y*nx, (l,s)] = S1(y,l) * S2(x,s), D = sigma^2/(max(l,s)+1).
  Eigen::MatrixXd b(nx * ny, J * J);
  for (int l = 0; l < J; ++l) {
    for (int s = 0; s < J; ++s) {
      const double wt = sigma / std::sqrt(static_cast<double>(std::max(l, s) + 1));
      auto col = b.col(l * J + s);
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x)
          col[x + y * nx] = wt * s1(y, l) * s2(x, s);
    }
  }
  return b * b.transpose();
}

CovarianceOperator CovarianceOperator::diagonal(int dim, double sigma,
                                                int fields) {
  if (dim < 1 || fields < 1 || dim % fields != 0)
    throw std::invalid_argument("CovarianceOperator::diagonal: bad dimensions");
  if (sigma < 0.0)
    throw std::invalid_argument("CovarianceOperator::diagonal: sigma < 0");
  CovarianceOperator op;
  op.kind_ = Kind::kDiagonal;
  op.dim_ = dim;
  op.fields_ = fields;
  op.sigma_ = sigma;
  op.full_.diagonal_ = true;
  op.full_.inv_variance_ = sigma > 0.0 ? 1.0 / (sigma * sigma) : 0.0;
  op.full_.dim_ = dim;
  return op;
}

CovarianceOperator CovarianceOperator::dense(Eigen::MatrixXd q) {
  if (q.rows() != q.cols() || q.rows() < 1)
    throw std::invalid_argument("CovarianceOperator::dense: not square");
  const double scale = q.cwiseAbs().maxCoeff();
  if ((q - q.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(scale, 1e-300))
    throw std::invalid_argument("CovarianceOperator::dense: not symmetric");
  CovarianceOperator op;
  op.kind_ = Kind::kDense;
  op.dim_ = static_cast<int>(q.rows());
  op.fields_ = 1;
  op.block_ = std::move(q);
  Eigen::LLT<Eigen::MatrixXd> llt(op.block_);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("CovarianceOperator::dense: not positive definite");
  op.chol_ = llt.matrixL();
  op.precision_ =
      llt.solve(Eigen::MatrixXd::Identity(op.dim_, op.dim_));
  op.precision_ = 0.5 * (op.precision_ + op.precision_.transpose()).eval();
  op.finalize_dense_like();
  return op;
}

CovarianceOperator CovarianceOperator::fourier_sine(
    const GridSpec& grid, int n_modes, double sigma,
    std::array<double, 4> domain, int fields) {
  if (fields < 1)
    throw std::invalid_argument("CovarianceOperator::fourier_sine: fields < 1");
  CovarianceOperator op;
  op.kind_ = Kind::kFourierSine;
  op.nx_ = grid.nx;
  op.ny_ = grid.ny;
  op.fields_ = fields;
  op.dim_ = fields * grid.points();
  op.sigma_ = sigma;
  op.n_modes_ = n_modes;
  std::tie(op.s1_, op.s2_) = build_sine_bases(grid, n_modes, domain);
  op.block_ = assemble_covariance(op.s1_, op.s2_, sigma);
  const int n = grid.points();
  op.ridge_ = 1e-8 * op.block_.trace() / n;
  if (op.ridge_ <= 0.0) op.ridge_ = 1e-300;  // sigma == 0 degenerate case
  Eigen::MatrixXd reg = op.block_;
  reg.diagonal().array() += op.ridge_;
  op.precision_ = Eigen::LLT<Eigen::MatrixXd>(reg).solve(
      Eigen::MatrixXd::Identity(n, n));
  op.precision_ = 0.5 * (op.precision_ + op.precision_.transpose()).eval();
  op.finalize_dense_like();
  return op;
}

void CovarianceOperator::finalize_dense_like() {
  full_.diagonal_ = false;
  full_.block_ = precision_;
  full_.fields_ = fields_;
  full_.dim_ = dim_;
}

// eps(i,j) ~ N(0, sigma^2 / (max(i,j)+1)), independent entries
void CovarianceOperator::draw_modes(std::mt19937_64& rng,
                                    Eigen::MatrixXd& eps) const {
  std::normal_distribution<double> dist;
  for (int i = 0; i < n_modes_; ++i)
    for (int j = 0; j < n_modes_; ++j)
      eps(i, j) = dist(rng) * sigma_ / std::sqrt(static_cast<double>(std::max(i, j) + 1));
}

void CovarianceOperator::sample(std::mt19937_64& rng,
                                Eigen::VectorXd& out) const {
  out.resize(dim_);
  switch (kind_) {
    case Kind::kDiagonal: {
      fill_standard_normal(rng, out);
      out *= sigma_;
      return;
    }
    case Kind::kDense: {
      Eigen::VectorXd xi(dim_);
      fill_standard_normal(rng, xi);
      out.noalias() = chol_ * xi;
      return;
    }
    case Kind::kFourierSine: {
      const int n = nx_ * ny_;
      Eigen::MatrixXd eps(n_modes_, n_modes_);
      for (int f = 0; f < fields_; ++f) {
        draw_modes(rng, eps);
        // Xi = S1 eps S2^T laid out as w[i + j*nx] = Xi(j, i)
        Eigen::MatrixXd xi = s1_ * eps * s2_.transpose();
        for (int j = 0; j < ny_; ++j)
          for (int i = 0; i < nx_; ++i) out[f * n + i + j * nx_] = xi(j, i);
      }
      return;
    }
  }
  throw std::logic_error("CovarianceOperator::sample: bad kind");
}

Eigen::VectorXd CovarianceOperator::sample(std::mt19937_64& rng) const {
  Eigen::VectorXd out;
  sample(rng, out);
  return out;
}

void CovarianceOperator::sample_restricted(std::mt19937_64& rng,
                                           std::span<const int> grid_points,
                                           Eigen::VectorXd& out) const {
  const int dk = static_cast<int>(grid_points.size());
  out.resize(fields_ * dk);
  if (kind_ == Kind::kDiagonal) {
    // marginal of sigma^2 I is sigma^2 I on any subset
    fill_standard_normal(rng, out);
    out *= sigma_;
    return;
  }
  Eigen::VectorXd full(dim_);
  sample(rng, full);
  const int n = points_per_field();
  for (int f = 0; f < fields_; ++f)
    for (int m = 0; m < dk; ++m) out[f * dk + m] = full[f * n + grid_points[m]];
}

NoiseDraw CovarianceOperator::sample_field_noise(std::mt19937_64& rng) const {
  if (kind_ != Kind::kFourierSine)
    throw std::invalid_argument(
        "sample_field_noise requires a fourier_sine operator");
  NoiseDraw draw;
  const int n = nx_ * ny_;
  draw.w.resize(dim_);
  for (int f = 0; f < fields_; ++f) {
    Eigen::MatrixXd eps(n_modes_, n_modes_);
    draw_modes(rng, eps);
    Eigen::MatrixXd xi = s1_ * eps * s2_.transpose();
    for (int j = 0; j < ny_; ++j)
      for (int i = 0; i < nx_; ++i) draw.w[f * n + i + j * nx_] = xi(j, i);
    draw.eps.push_back(std::move(eps));
    draw.xi.push_back(std::move(xi));
  }
  return draw;
}

double CovarianceOperator::logpdf(const Eigen::VectorXd& x) const {
  return full_.logpdf(x);
}

RestrictedGaussian CovarianceOperator::restrict(
    std::span<const int> grid_points) const {
  const int dk = static_cast<int>(grid_points.size());
  RestrictedGaussian rg;
  rg.fields_ = fields_;
  rg.dim_ = fields_ * dk;
  if (kind_ == Kind::kDiagonal) {
    rg.diagonal_ = true;
    rg.inv_variance_ = full_.inv_variance_;
    return rg;
  }
  rg.diagonal_ = false;
  rg.block_.resize(dk, dk);
  for (int c = 0; c < dk; ++c)
    for (int r = 0; r < dk; ++r)
      rg.block_(r, c) = precision_(grid_points[r], grid_points[c]);
  return rg;
}

const Eigen::MatrixXd& CovarianceOperator::field_block() const {
  if (kind_ == Kind::kDiagonal)
    throw std::invalid_argument("field_block: diagonal operator has no block");
  return block_;
}

const Eigen::MatrixXd& CovarianceOperator::field_precision() const {
  if (kind_ == Kind::kDiagonal)
    throw std::invalid_argument("field_precision: diagonal operator");
  return precision_;
}

namespace {
void write_matrix(std::ofstream& f, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v = m(r, c);
      f.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
}
void read_matrix(std::ifstream& f, Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v;
      f.read(reinterpret_cast<char*>(&v), sizeof(double));
      m(r, c) = v;
    }
}
}  // namespace

void CovarianceOperator::save(const std::string& path) const {
  if (kind_ != Kind::kFourierSine)
    throw std::invalid_argument("save: only fourier_sine operators persist");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save: cannot open " + path);
  const std::int64_t header[4] = {nx_, ny_, n_modes_, fields_};
  f.write(reinterpret_cast<const char*>(header), sizeof(header));
  write_matrix(f, block_);
  write_matrix(f, precision_);
  double ridge = ridge_;
  f.write(reinterpret_cast<const char*>(&ridge), sizeof(double));
  if (!f) throw std::runtime_error("save: write failed for " + path);
}

CovarianceOperator CovarianceOperator::fourier_sine_cached(
    const GridSpec& grid, int n_modes, double sigma,
    std::array<double, 4> domain, int fields, const std::string& cache_path) {
  std::ifstream f(cache_path, std::ios::binary);
  if (f) {
    std::int64_t header[4];
    f.read(reinterpret_cast<char*>(header), sizeof(header));
    if (f && header[0] == grid.nx && header[1] == grid.ny &&
        header[2] == n_modes && header[3] == fields) {
      CovarianceOperator op;
      op.kind_ = Kind::kFourierSine;
      op.nx_ = grid.nx;
      op.ny_ = grid.ny;
      op.fields_ = fields;
      op.dim_ = fields * grid.points();
      op.sigma_ = sigma;
      op.n_modes_ = n_modes;
      std::tie(op.s1_, op.s2_) = build_sine_bases(grid, n_modes, domain);
      const int n = grid.points();
      op.block_.resize(n, n);
      op.precision_.resize(n, n);
      read_matrix(f, op.block_);
      read_matrix(f, op.precision_);
      f.read(reinterpret_cast<char*>(&op.ridge_), sizeof(double));
      if (f) {
        op.finalize_dense_like();
        return op;
      }
    }
    std::cerr << "fourier_sine_cached: stale or short cache at " << cache_path
              << ", recomputing\n";
  }
  CovarianceOperator op = fourier_sine(grid, n_modes, sigma, domain, fields);
  op.save(cache_path);
  return op;
}

}  // namespace da
