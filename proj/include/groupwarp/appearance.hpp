#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "groupwarp/softmax.hpp"
#include "groupwarp/volume.hpp"

namespace gw {

/// Digamma via the ascending recurrence into the asymptotic regime.
inline double digamma(double x) {
  if (!(x > 0)) throw std::domain_error("digamma: x must be > 0");
  double r = 0;
  while (x < 8.0) {
    r -= 1.0 / x;
    x += 1.0;
  }
  const double ix = 1.0 / x, ix2 = ix * ix;
  r += std::log(x) - 0.5 * ix -
       ix2 * (1.0 / 12 -
              ix2 * (1.0 / 120 -
                     ix2 * (1.0 / 252 -
                            ix2 * (1.0 / 240 -
                                   ix2 * (1.0 / 132 - ix2 * 691.0 / 32760)))));
  return r;
}

inline double log_multigamma(double a, int p) {
  double r = 0.25 * p * (p - 1) * std::log(M_PI);
  for (int j = 1; j <= p; ++j) r += std::lgamma(a + 0.5 * (1 - j));
  return r;
}

/// Gauss-Wishart parameters of all K+1 classes over C channels. The same
/// struct holds per-subject posteriors and the population-shared prior.
struct GaussWishart {
  Eigen::MatrixXd m;               // C x classes
  Eigen::VectorXd beta;            // classes
  std::vector<Eigen::MatrixXd> W;  // classes, each C x C
  Eigen::VectorXd nu;              // classes

  Index channels() const { return m.rows(); }
  Index classes() const { return m.cols(); }

  void check() const {
    const Index k = classes(), c = channels();
    if (beta.size() != k || nu.size() != k || Index(W.size()) != k)
      throw std::invalid_argument("GaussWishart: inconsistent class counts");
    for (Index j = 0; j < k; ++j) {
      if (!(beta[j] > 0) || !(nu[j] > double(c) - 1))
        throw std::invalid_argument("GaussWishart: beta must be > 0 and nu > C-1");
      if (W[j].rows() != c || W[j].cols() != c)
        throw std::invalid_argument("GaussWishart: W shape mismatch");
      Eigen::LLT<Eigen::MatrixXd> llt(W[j]);
      if (llt.info() != Eigen::Success)
        throw std::invalid_argument("GaussWishart: W is not positive definite");
    }
  }
};

/// E[ln |Lambda|] under W(Lambda | W, nu).
inline double expected_log_det(const Eigen::MatrixXd& W, double nu) {
  const int c = int(W.rows());
  double r = c * std::log(2.0) + std::log(W.determinant());
  for (int j = 1; j <= c; ++j) r += digamma(0.5 * (nu + 1 - j));
  return r;
}

inline double log_wishart_b(const Eigen::MatrixXd& W, double nu) {
  const int c = int(W.rows());
  return -0.5 * nu * std::log(W.determinant()) - 0.5 * nu * c * std::log(2.0) -
         log_multigamma(0.5 * nu, c);
}

/// Per-voxel E[ln N(x | mu_k, Lambda_k^-1)] for one class.
inline ArrayX<double> expected_log_gauss(const ArrayXX<double>& x, const GaussWishart& g, Index k) {
  const Index c = g.channels();
  const double eldet = expected_log_det(g.W[k], g.nu[k]);
  const double cnst = 0.5 * eldet - 0.5 * c * std::log(2 * M_PI) - 0.5 * c / g.beta[k];
  Eigen::MatrixXd d = x.matrix().transpose().colwise() - g.m.col(k);  // C x nvox
  ArrayX<double> quad = (d.array() * (g.W[k] * d).array()).colwise().sum().transpose();
  return cnst - 0.5 * g.nu[k] * quad;
}

/// Posterior class responsibilities. r spans all classes explicitly and rows
/// sum to 1; on masked-out voxels r falls back to the prior.
struct Responsibilities {
  ArrayXX<double> r;  // nvox x classes
  Mask mask;
};

/// E-step. xb is the bias-modulated intensity, log_prior the warped template
/// log-probabilities over all classes (implicit class last).
inline Responsibilities responsibilities(const ArrayXX<double>& xb, const Mask& mask,
                                         const GaussWishart& g, const ArrayXX<double>& log_prior) {
  g.check();
  const Index n = xb.rows(), kk = g.classes();
  if (log_prior.rows() != n || log_prior.cols() != kk)
    throw std::invalid_argument("responsibilities: log_prior shape mismatch");
  if (xb.cols() != g.channels())
    throw std::invalid_argument("responsibilities: channel mismatch");
  ArrayXX<double> lr(n, kk);
  for (Index k = 0; k < kk; ++k) lr.col(k) = log_prior.col(k) + expected_log_gauss(xb, g, k);
  Responsibilities out;
  out.mask = mask;
  out.r.resize(n, kk);
  for (Index i = 0; i < n; ++i) {
    if (!mask[i]) {
      out.r.row(i) = log_prior.row(i).exp();
      continue;
    }
    double mx = lr.row(i).maxCoeff();
    ArrayX<double> e = (lr.row(i) - mx).exp().transpose();
    double s = e.sum();
    if (!(s > 0) || !std::isfinite(s))
      throw std::runtime_error("responsibilities: degenerate posterior at a voxel");
    out.r.row(i) = e.transpose() / s;
  }
  return out;
}

/// Soft data moments over masked-in voxels.
struct MomentStats {
  Eigen::VectorXd n;                     // classes
  Eigen::MatrixXd sum;                   // C x classes
  std::vector<Eigen::MatrixXd> scatter;  // classes, each C x C
};

inline MomentStats moment_stats(const ArrayXX<double>& xb, const Mask& mask,
                                const ArrayXX<double>& r) {
  const Index n = xb.rows(), c = xb.cols(), kk = r.cols();
  MomentStats s;
  s.n = Eigen::VectorXd::Zero(kk);
  s.sum = Eigen::MatrixXd::Zero(c, kk);
  s.scatter.assign(kk, Eigen::MatrixXd::Zero(c, c));
  for (Index i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    Eigen::VectorXd x = xb.row(i).matrix().transpose();
    for (Index k = 0; k < kk; ++k) {
      const double w = r(i, k);
      s.n[k] += w;
      s.sum.col(k) += w * x;
      s.scatter[k].noalias() += w * x * x.transpose();
    }
  }
  return s;
}

/// Conjugate Gauss-Wishart M-step. A class with no responsibility reverts to
/// its prior exactly.
inline GaussWishart update_gauss_wishart(const MomentStats& s, const GaussWishart& prior) {
  prior.check();
  const Index kk = prior.classes(), c = prior.channels();
  GaussWishart q = prior;
  for (Index k = 0; k < kk; ++k) {
    const double nk = s.n[k];
    const double b0 = prior.beta[k], n0 = prior.nu[k];
    const Eigen::VectorXd m0 = prior.m.col(k);
    q.beta[k] = b0 + nk;
    q.nu[k] = n0 + nk;
    if (nk <= 0) continue;
    Eigen::VectorXd xbar = s.sum.col(k) / nk;
    q.m.col(k) = (b0 * m0 + s.sum.col(k)) / q.beta[k];
    Eigen::MatrixXd ns = s.scatter[k] - nk * xbar * xbar.transpose();
    Eigen::VectorXd dm = xbar - m0;
    Eigen::MatrixXd winv = prior.W[k].inverse() + ns + (b0 * nk / q.beta[k]) * dm * dm.transpose();
    winv = 0.5 * (winv + winv.transpose().eval());
    q.W[k] = winv.inverse();
    q.W[k] = 0.5 * (q.W[k] + q.W[k].transpose().eval());
  }
  q.check();
  return q;
}

/// KL(q || p) for one class of paired Gauss-Wishart factors.
inline double kl_gauss_wishart(const GaussWishart& q, const GaussWishart& p, Index k) {
  const int c = int(q.channels());
  const double eldet = expected_log_det(q.W[k], q.nu[k]);
  const double b1 = q.beta[k], b0 = p.beta[k];
  Eigen::VectorXd dm = q.m.col(k) - p.m.col(k);
  double kl_n = 0.5 * (c * std::log(b1 / b0) + c * b0 / b1 - c +
                       b0 * q.nu[k] * dm.dot(q.W[k] * dm));
  double kl_w = log_wishart_b(q.W[k], q.nu[k]) - log_wishart_b(p.W[k], p.nu[k]) +
                0.5 * (q.nu[k] - p.nu[k]) * eldet +
                0.5 * q.nu[k] * ((p.W[k].inverse() * q.W[k]).trace() - c);
  return kl_n + kl_w;
}

inline double kl_gauss_wishart(const GaussWishart& q, const GaussWishart& p) {
  double s = 0;
  for (Index k = 0; k < q.classes(); ++k) s += kl_gauss_wishart(q, p, k);
  return s;
}

/// Sum over subjects and classes of E_q[ln p(mu, Lambda | prior)]; the
/// empirical-Bayes objective the shared prior maximises.
inline double shared_prior_objective(const GaussWishart& prior,
                                     const std::vector<GaussWishart>& post) {
  prior.check();
  const int c = int(prior.channels());
  double total = 0;
  for (const auto& q : post)
    for (Index k = 0; k < prior.classes(); ++k) {
      const double eldet = expected_log_det(q.W[k], q.nu[k]);
      Eigen::VectorXd dm = q.m.col(k) - prior.m.col(k);
      double equad = c / q.beta[k] + q.nu[k] * dm.dot(q.W[k] * dm);
      total += 0.5 * (c * std::log(prior.beta[k] / (2 * M_PI)) + eldet - prior.beta[k] * equad);
      total += log_wishart_b(prior.W[k], prior.nu[k]) + 0.5 * (prior.nu[k] - c - 1) * eldet -
               0.5 * q.nu[k] * (prior.W[k].inverse() * q.W[k]).trace();
    }
  return total;
}

/// Empirical-Bayes update of the shared prior from the subject posteriors:
/// closed forms for m0 and beta0, profile maximisation for nu0 with
/// W0 = S / (N nu0) at the optimum.
inline GaussWishart update_shared_prior(const std::vector<GaussWishart>& post) {
  if (post.empty()) throw std::invalid_argument("update_shared_prior: no posteriors");
  const Index kk = post[0].classes();
  const int c = int(post[0].channels());
  const double nn = double(post.size());
  GaussWishart prior = post[0];
  for (Index k = 0; k < kk; ++k) {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(c, c);
    Eigen::VectorXd sm = Eigen::VectorXd::Zero(c);
    double eldet_sum = 0;
    for (const auto& q : post) {
      s += q.nu[k] * q.W[k];
      sm += q.nu[k] * q.W[k] * q.m.col(k);
      eldet_sum += expected_log_det(q.W[k], q.nu[k]);
    }
    Eigen::VectorXd m0 = s.ldlt().solve(sm);
    double quad = 0;
    for (const auto& q : post) {
      Eigen::VectorXd dm = q.m.col(k) - m0;
      quad += c / q.beta[k] + q.nu[k] * dm.dot(q.W[k] * dm);
    }
    const double beta0 = c * nn / quad;

    const double logdet_s = std::log(s.determinant());
    auto profile = [&](double nu) {
      // sum_n E[ln W(Lambda_n | S/(N nu), nu)], constants in nu dropped
      double logdet_w0 = logdet_s - c * std::log(nn * nu);
      double lnb = -0.5 * nu * logdet_w0 - 0.5 * nu * c * std::log(2.0) -
                   log_multigamma(0.5 * nu, c);
      return nn * lnb + 0.5 * (nu - c - 1) * eldet_sum - 0.5 * nn * nu * c;
    };
    double lo = std::log(double(c) - 1 + 1e-3), hi = std::log(1e8);
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double a = lo, b = hi, x1 = b - gr * (b - a), x2 = a + gr * (b - a);
    double f1 = profile(std::exp(x1)), f2 = profile(std::exp(x2));
    for (int it = 0; it < 200; ++it) {
      if (f1 < f2) {
        a = x1; x1 = x2; f1 = f2;
        x2 = a + gr * (b - a);
        f2 = profile(std::exp(x2));
      } else {
        b = x2; x2 = x1; f2 = f1;
        x1 = b - gr * (b - a);
        f1 = profile(std::exp(x1));
      }
    }
    const double nu0 = std::exp(0.5 * (a + b));
    prior.m.col(k) = m0;
    prior.beta[k] = beta0;
    prior.nu[k] = nu0;
    prior.W[k] = s / (nn * nu0);
  }
  prior.check();
  return prior;
}

}  // namespace gw
