#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

#include "groupwarp/appearance.hpp"
#include "groupwarp/energy.hpp"
#include "groupwarp/volume.hpp"

namespace gw {

/// Separable DCT-II basis for a multiplicative exp-field over a subject
/// lattice. The constant mode is excluded, which pins the field's log-mean to
/// zero and keeps the template/means gauge fixed. An axis whose field of view
/// is below the cutoff contributes no modes; count() may be zero.
struct BiasBasis {
  Dims dims{0, 0, 0};
  Eigen::Vector3i nb = Eigen::Vector3i::Ones();  // modes per axis incl. DC
  Eigen::MatrixXd ax[3];                         // per-axis orthonormal bases

  Index count() const { return Index(nb[0]) * nb[1] * nb[2] - 1; }
};

inline BiasBasis make_bias_basis(const Dims& dims, const Eigen::Vector3d& vox_mm,
                                 double cutoff_mm) {
  if (!(cutoff_mm > 0)) throw std::invalid_argument("make_bias_basis: cutoff must be > 0");
  BiasBasis b;
  b.dims = dims;
  for (int a = 0; a < 3; ++a) {
    const Index n = dims[a];
    const double fov = double(n) * vox_mm[a];
    Index nb = Index(std::floor(2.0 * fov / cutoff_mm)) + 1;
    nb = std::max<Index>(1, std::min<Index>(nb, n));
    b.nb[a] = int(nb);
    b.ax[a].resize(n, nb);
    for (Index j = 0; j < nb; ++j) {
      const double norm = j == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
      for (Index x = 0; x < n; ++x)
        b.ax[a](x, j) = norm * std::cos(M_PI * double(j) * (double(x) + 0.5) / double(n));
    }
  }
  return b;
}

/// Dense design matrix, nvox x count. Column order follows mode index
/// j0 + nb0*(j1 + nb1*j2) with the all-DC triple skipped.
inline Eigen::MatrixXd bias_design(const BiasBasis& b) {
  const Index n = nvox(b.dims);
  Eigen::MatrixXd phi(n, b.count());
  Index col = 0;
  for (int j2 = 0; j2 < b.nb[2]; ++j2)
    for (int j1 = 0; j1 < b.nb[1]; ++j1)
      for (int j0 = 0; j0 < b.nb[0]; ++j0) {
        if (j0 == 0 && j1 == 0 && j2 == 0) continue;
        Index i = 0;
        for (Index z = 0; z < b.dims[2]; ++z) {
          const double bz = b.ax[2](z, j2);
          for (Index y = 0; y < b.dims[1]; ++y) {
            const double byz = b.ax[1](y, j1) * bz;
            for (Index x = 0; x < b.dims[0]; ++x, ++i) phi(i, col) = b.ax[0](x, j0) * byz;
          }
        }
        ++col;
      }
  return phi;
}

/// Phi^T L_bend Phi with the voxel-volume scaling, the coefficient-space
/// precision of the smoothness prior (before its lambda weight).
inline Eigen::MatrixXd bias_bending_gram(const BiasBasis& b, const Eigen::MatrixXd& phi,
                                         const Eigen::Vector3d& vox_mm) {
  EnergySpec s;
  s.bending = 1.0;
  Eigen::MatrixXd lphi(phi.rows(), phi.cols());
  for (Index j = 0; j < phi.cols(); ++j) {
    ArrayXX<double> col = phi.col(j).array();
    lphi.col(j) = operator_apply(col, b.dims, s, vox_mm).matrix();
  }
  Eigen::MatrixXd g = phi.transpose() * lphi;
  return 0.5 * (g + g.transpose().eval());
}

/// Multiplicative bias field: coef is count x C, zero coefficients give a
/// unit field exactly.
struct BiasField {
  Eigen::MatrixXd coef;

  static BiasField zeros(Index count, Index channels) {
    return BiasField{Eigen::MatrixXd::Zero(count, channels)};
  }
};

inline ArrayXX<double> bias_log_field(const Eigen::MatrixXd& phi, const BiasField& f) {
  if (phi.cols() != f.coef.rows())
    throw std::invalid_argument("bias_log_field: coefficient count mismatch");
  return (phi * f.coef).array();
}

/// ELBO terms that involve the bias: expected log-likelihood of the modulated
/// intensities, the log-Jacobian of the modulation, and the smoothness prior.
inline double bias_objective(const ArrayXX<double>& x, const Mask& mask, const GaussWishart& g,
                             const ArrayXX<double>& resp, const ArrayXX<double>& log_field,
                             const BiasField& f, const Eigen::MatrixXd& gram, double lambda) {
  ArrayXX<double> xb = x * log_field.exp();
  double total = 0;
  for (Index k = 0; k < g.classes(); ++k) {
    ArrayX<double> e = expected_log_gauss(xb, g, k);
    total += (mask).select(resp.col(k) * e, 0.0).sum();
  }
  total += mask.select(log_field.rowwise().sum(), 0.0).sum();
  for (Index c = 0; c < f.coef.cols(); ++c)
    total -= 0.5 * lambda * f.coef.col(c).dot(gram * f.coef.col(c));
  return total;
}

struct BiasUpdateResult {
  BiasField field;
  double objective = 0;
  int halvings = 0;
};

/// One Gauss-Newton ascent step on the bias coefficients (all channels
/// jointly), with step halving if the quadratic model overshoots.
inline BiasUpdateResult update_bias(const ArrayXX<double>& x, const Mask& mask,
                                    const GaussWishart& g, const ArrayXX<double>& resp,
                                    const Eigen::MatrixXd& phi, const Eigen::MatrixXd& gram,
                                    double lambda, const BiasField& f0) {
  const Index c = x.cols(), mcount = phi.cols(), n = x.rows();
  BiasUpdateResult out;
  out.field = f0;
  ArrayXX<double> lf = bias_log_field(phi, f0);
  out.objective = bias_objective(x, mask, g, resp, lf, f0, gram, lambda);
  if (mcount == 0) return out;

  ArrayXX<double> xb = x * lf.exp();
  // per-voxel precision-weighted pull toward the class means
  ArrayXX<double> pull = ArrayXX<double>::Zero(n, c);  // sum_k r nu W (xb - m)
  ArrayXX<double> acc(n, c * c);
  acc.setZero();
  for (Index k = 0; k < g.classes(); ++k) {
    Eigen::MatrixXd nw = g.nu[k] * g.W[k];
    Eigen::MatrixXd d = xb.matrix().transpose().colwise() - g.m.col(k);  // C x n
    Eigen::MatrixXd nwd = nw * d;
    for (Index ch = 0; ch < c; ++ch)
      pull.col(ch) += resp.col(k) * nwd.row(ch).transpose().array();
    for (Index a = 0; a < c; ++a)
      for (Index b = 0; b < c; ++b) acc.col(a * c + b) += resp.col(k) * nw(a, b);
  }

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(mcount * c);
  Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(mcount * c, mcount * c);
  for (Index ch = 0; ch < c; ++ch) {
    ArrayX<double> gvox = mask.select(1.0 - xb.col(ch) * pull.col(ch), 0.0);
    grad.segment(ch * mcount, mcount) = phi.transpose() * gvox.matrix();
    grad.segment(ch * mcount, mcount) -= lambda * (gram * f0.coef.col(ch));
  }
  for (Index a = 0; a < c; ++a)
    for (Index b = 0; b <= a; ++b) {
      ArrayX<double> d = mask.select(xb.col(a) * acc.col(a * c + b) * xb.col(b), 0.0);
      Eigen::MatrixXd blk = phi.transpose() * d.matrix().asDiagonal() * phi;
      if (a == b) blk += lambda * gram;
      hess.block(a * mcount, b * mcount, mcount, mcount) = blk;
      if (a != b) hess.block(b * mcount, a * mcount, mcount, mcount) = blk.transpose();
    }

  Eigen::VectorXd step = hess.ldlt().solve(grad);
  if (!step.allFinite()) return out;

  for (int half = 0; half <= 6; ++half, step *= 0.5, ++out.halvings) {
    BiasField cand = f0;
    for (Index ch = 0; ch < c; ++ch) cand.coef.col(ch) += step.segment(ch * mcount, mcount);
    ArrayXX<double> clf = bias_log_field(phi, cand);
    double obj = bias_objective(x, mask, g, resp, clf, cand, gram, lambda);
    if (std::isfinite(obj) && obj >= out.objective) {
      out.field = cand;
      out.objective = obj;
      return out;
    }
  }
  out.halvings = -1;  // kept the previous field
  return out;
}

}  // namespace gw
