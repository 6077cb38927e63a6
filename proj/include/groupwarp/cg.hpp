#pragma once

#include <cmath>
#include <stdexcept>

#include "groupwarp/volume.hpp"

namespace gw {

struct CgOpts {
  Index max_iter = 32;
  double rtol = 1e-4;
};

struct CgResult {
  Index iters = 0;
  double rel_residual = 0;
  bool converged = false;
};

/// Preconditioned conjugate gradients on multi-channel voxel arrays.
/// apply_a and apply_m must be linear self-adjoint maps on nvox x C arrays;
/// apply_m should approximate the inverse of apply_a. Starts from the value
/// already in x (reshaped to match b if it does not). Bails out, keeping the
/// current iterate, if the operator loses positive definiteness.
template <class ApplyA, class ApplyM>
CgResult pcg(ApplyA&& apply_a, ApplyM&& apply_m, const ArrayXX<double>& b,
             ArrayXX<double>& x, const CgOpts& opts = {}) {
  CgResult res;
  const double bnorm = std::sqrt((b * b).sum());
  if (x.rows() != b.rows() || x.cols() != b.cols())
    x = ArrayXX<double>::Zero(b.rows(), b.cols());
  if (bnorm == 0) {
    x.setZero();
    res.converged = true;
    return res;
  }
  ArrayXX<double> r = b - apply_a(x);
  ArrayXX<double> z = apply_m(r);
  ArrayXX<double> p = z;
  double rz = (r * z).sum();
  for (Index it = 0; it < opts.max_iter; ++it) {
    res.rel_residual = std::sqrt((r * r).sum()) / bnorm;
    if (res.rel_residual <= opts.rtol) {
      res.converged = true;
      return res;
    }
    ArrayXX<double> ap = apply_a(p);
    const double pap = (p * ap).sum();
    if (!(pap > 0)) break;
    const double alpha = rz / pap;
    x += alpha * p;
    r -= alpha * ap;
    z = apply_m(r);
    const double rz_new = (r * z).sum();
    if (!std::isfinite(rz_new)) throw std::runtime_error("pcg: non-finite iterate");
    p = z + (rz_new / rz) * p;
    rz = rz_new;
    res.iters = it + 1;
  }
  res.rel_residual = std::sqrt((r * r).sum()) / bnorm;
  res.converged = res.rel_residual <= opts.rtol;
  return res;
}

}  // namespace gw
