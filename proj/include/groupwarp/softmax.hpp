#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

#include "groupwarp/volume.hpp"

namespace gw {

// K stored logits per voxel encode K+1 classes; the last class is pinned at
// logit 0, which fixes the softmax gauge. All paths subtract the running max
// (including the pinned 0) before exponentiating.

template <typename Scalar>
ArrayX<Scalar> log_partition_implicit(const ArrayXX<Scalar>& logits) {
  if (!logits.allFinite())
    throw std::invalid_argument("log_partition_implicit: non-finite logits");
  ArrayX<Scalar> m = logits.rowwise().maxCoeff().max(Scalar(0));
  ArrayX<Scalar> s = (-m).exp();
  for (Index k = 0; k < logits.cols(); ++k) s += (logits.col(k) - m).exp();
  return m + s.log();
}

/// Probabilities of the K stored classes; the implicit class keeps the rest.
template <typename Scalar>
ArrayXX<Scalar> softmax_implicit(const ArrayXX<Scalar>& logits) {
  ArrayX<Scalar> lse = log_partition_implicit(logits);
  ArrayXX<Scalar> p(logits.rows(), logits.cols());
  for (Index k = 0; k < logits.cols(); ++k) p.col(k) = (logits.col(k) - lse).exp();
  return p;
}

/// Log-probabilities of all K+1 classes, implicit class in the last column.
template <typename Scalar>
ArrayXX<Scalar> log_softmax_implicit(const ArrayXX<Scalar>& logits) {
  ArrayX<Scalar> lse = log_partition_implicit(logits);
  ArrayXX<Scalar> lp(logits.rows(), logits.cols() + 1);
  for (Index k = 0; k < logits.cols(); ++k) lp.col(k) = logits.col(k) - lse;
  lp.col(logits.cols()) = -lse;
  return lp;
}

}  // namespace gw
