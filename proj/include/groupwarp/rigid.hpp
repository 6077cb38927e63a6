#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <array>

namespace gw {

using RigidParams = Eigen::Matrix<double, 6, 1>;

/// se(3) basis: translations along x,y,z then rotations about x,y,z, in that
/// order. Translations are in world mm, rotations in radians.
inline const std::array<Eigen::Matrix4d, 6>& rigid_generators() {
  static const std::array<Eigen::Matrix4d, 6> gens = [] {
    std::array<Eigen::Matrix4d, 6> g;
    for (auto& m : g) m.setZero();
    g[0](0, 3) = 1;
    g[1](1, 3) = 1;
    g[2](2, 3) = 1;
    g[3](1, 2) = -1; g[3](2, 1) = 1;
    g[4](0, 2) = 1;  g[4](2, 0) = -1;
    g[5](0, 1) = -1; g[5](1, 0) = 1;
    return g;
  }();
  return gens;
}

inline Eigen::Matrix4d rigid_tangent(const RigidParams& q) {
  Eigen::Matrix4d s = Eigen::Matrix4d::Zero();
  const auto& gens = rigid_generators();
  for (int j = 0; j < 6; ++j) s += q[j] * gens[j];
  return s;
}

/// World-to-world rigid transform exp(sum_j q_j B_j). exp_rigid(-q) is its
/// exact inverse.
inline Eigen::Matrix4d exp_rigid(const RigidParams& q) {
  if (!q.allFinite()) throw std::invalid_argument("exp_rigid: non-finite parameters");
  Eigen::Matrix4d m = rigid_tangent(q).exp();
  m.row(3) << 0, 0, 0, 1;  // scrub Pade roundoff off the homogeneous row
  return m;
}

/// Directional derivatives d exp(S(q)) / d q_j, computed from the augmented
/// exponential exp([[S, B_j], [0, S]]) whose top-right block is the exact
/// Frechet derivative. No small-angle approximation.
inline std::array<Eigen::Matrix4d, 6> dexp_rigid(const RigidParams& q) {
  if (!q.allFinite()) throw std::invalid_argument("dexp_rigid: non-finite parameters");
  const Eigen::Matrix4d s = rigid_tangent(q);
  const auto& gens = rigid_generators();
  std::array<Eigen::Matrix4d, 6> d;
  Eigen::Matrix<double, 8, 8> aug;
  for (int j = 0; j < 6; ++j) {
    aug.setZero();
    aug.topLeftCorner<4, 4>() = s;
    aug.bottomRightCorner<4, 4>() = s;
    aug.topRightCorner<4, 4>() = gens[j];
    d[j] = Eigen::Matrix<double, 8, 8>(aug.exp()).topRightCorner<4, 4>();
  }
  return d;
}

}  // namespace gw
